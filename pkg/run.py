#!/usr/bin/env python3
"""
rapidmotor - Entry point for running from source

Examples:
    python run.py train-phase1 --preset desk --seed 7
    python run.py train-phase2 --checkpoint runs/phase1-rma-seed7/phase1.ckpt
    python run.py evaluate --checkpoint runs/phase2-seed7/phase2.ckpt
    python run.py deploy --checkpoint runs/phase2-seed7/phase2.ckpt --mode realtime
"""

import sys
import os

# Add current directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import logging


def main(argv=None):
    """Initialize the registry and hand over to the command."""
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    if not argv or argv[0] in ("-h", "--help"):
        from rapidmotor import build_parser
        build_parser().print_help()
        return 0

    print("=" * 60, file=sys.stderr)
    print(f"RAPIDMOTOR - {argv[0].upper()}", file=sys.stderr)
    print("=" * 60, file=sys.stderr)

    print("\n[1/2] Initializing run registry...", file=sys.stderr)
    try:
        from rapidmotor.database import get_database_path, init_database
        init_database()
        print(f"  [OK] Registry ready at {get_database_path()}", file=sys.stderr)
    except Exception as e:
        print(f"  [FAIL] Cannot open run registry: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return 1

    print(f"\n[2/2] Running {argv[0]}...\n", file=sys.stderr)
    from rapidmotor import main as cli_main
    status = cli_main(argv)

    print("\n" + "=" * 60, file=sys.stderr)
    print("DONE" if status == 0 else f"FAILED (exit status {status})", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
