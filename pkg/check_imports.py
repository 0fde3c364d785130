#!/usr/bin/env python3
"""
Verify every package module imports and the command parser builds.
"""

import sys

MODULES = (
    "ndcore", "checkpoint", "terrain", "hopper_env", "reward", "networks", "config", "rollout", "ppo",
    "rma_train", "deploy", "evaluation", "database", "plots", "cli",
)


def check_imports():
    print("Checking package imports...")

    try:
        import importlib

        from rapidmotor import build_parser
        print("[OK] rapidmotor.build_parser")

        for name in MODULES:
            importlib.import_module(f"rapidmotor.{name}")
            print(f"[OK] rapidmotor.{name}")

        build_parser()
        print("[OK] Parser construction successful")

        print("\n[SUCCESS] All imports working correctly!")
        return 0

    except Exception as e:
        print(f"\n[FAIL] Import error: {e}")
        import traceback
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(check_imports())
