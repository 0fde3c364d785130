"""
Command-line entry point: training, evaluation, deployment, sweeps, plots and tables.

Every command except `plot` writes into its own run directory, which must be
empty (or the directory of the checkpoint being resumed). The resolved config
is snapshotted as config.txt and the run is recorded in the registry.
"""

import argparse
import logging
import os
import traceback
from contextlib import contextmanager

import pandas as pd

from . import database
from . import plots
from .checkpoint import CheckpointError
from .config import ConfigError, PRESETS, flatten, load_config, save_config, with_overrides
from .deploy import (MODES, extrinsics_shift, extrinsics_trace_export, latency_summary, load_scenario,
                     require_fresh, run_episode, staleness_audit)
from .evaluation import SWEEP_PARAMETERS, controller_for, evaluate, ordering_checks, render_table, sweep
from .networks import FACTORS, LATENT, NONE
from .rma_train import BASELINE_KINDS, load_bundle, train_baseline, train_phase1, train_phase2


logger = logging.getLogger(__name__)

PHASE1_CONDITIONING = {"rma": LATENT, "expert": LATENT, "sysid": FACTORS, "robust": NONE}


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------------------
# Run directories
# ------------------------------------------------------------------------------

class RunContext:
    """Open run directory: log file handler plus registry row."""

    def __init__(self, path, command, config, kind=None, resume=False):
        self.path = path
        self.command = command
        if os.path.isdir(path) and os.listdir(path) and not resume:
            raise CommandError(f"run directory {path} is not empty; choose another --out")
        os.makedirs(path, exist_ok=True)

        config_path = os.path.join(path, "config.txt")
        if not os.path.exists(config_path):
            save_config(config, config_path)

        self.handler = logging.FileHandler(os.path.join(path, "run.log"), encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(self.handler)

        database.init_database()
        database.register_run(path, command, config.seed, config.preset, kind)
        database.save_run_config(path, flatten(config))
        logger.info(f"[CLI] {command} -> {path}")

    def file(self, name):
        return os.path.join(self.path, name)

    def close(self, status):
        database.set_run_status(self.path, status)
        logging.getLogger().removeHandler(self.handler)
        self.handler.close()


@contextmanager
def run_status(run):
    """Marks the registry row done or failed when the command body exits."""
    try:
        yield run
    except BaseException:
        run.close("failed")
        raise
    run.close("done")


def default_run_dir(config, command, kind=None):
    name = f"{command}-{kind}-seed{config.seed}" if kind else f"{command}-seed{config.seed}"
    return os.path.join(config.out_dir, name)


def require_file(path, what):
    if not path:
        raise CommandError(f"{what} is required (--checkpoint)")
    if not os.path.exists(path):
        raise CommandError(f"{what} not found: {path}")
    return path


def resolve_config(args):
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    config = load_config(args.config, args.preset, overrides)
    if args.seed is not None:
        config = with_overrides(config, {"seed": args.seed})
    return config


def parse_grid(text):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise CommandError(f"--grid expects comma-separated numbers, got {text!r}") from None


def load_evaluable(path, kind):
    bundle = load_bundle(require_file(path, f"checkpoint for '{kind or 'policy'}'"), kind)
    try:
        controller_for(bundle)
    except ValueError as e:
        raise CommandError(f"{path}: {e}") from None
    return bundle


# ------------------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------------------

def resumed_config(args, config, run_dir):
    """A resumed run keeps its own config.txt; explicit flags may only repeat it."""
    path = os.path.join(run_dir, "config.txt")
    if not os.path.exists(path):
        return config
    stored = load_config(path)
    if args.config or args.preset or args.set or args.seed is not None:
        requested, saved = flatten(config), flatten(stored)
        changed = sorted(key for key in saved if key != "out_dir" and requested.get(key) != saved[key])
        if changed:
            raise CommandError(f"--resume continues the run recorded in {path}; "
                               f"these values differ from it: {', '.join(changed)}")
    logger.info(f"[CLI] Resuming with the configuration in {path}")
    return stored


def cmd_train_phase1(args, config):
    kind = args.kind or "rma"
    if kind not in PHASE1_CONDITIONING:
        raise CommandError(f"phase 1 trains one of {', '.join(PHASE1_CONDITIONING)}, not {kind!r}")
    resume = args.resume
    if resume:
        require_file(resume, "resume checkpoint")
        out = args.out or os.path.dirname(resume) or "."
        config = resumed_config(args, config, out)
    else:
        out = args.out or default_run_dir(config, "phase1", kind)
    run = RunContext(out, "train-phase1", config, kind, resume=bool(resume))
    with run_status(run):
        path = train_phase1(config, config.seed, run.path, PHASE1_CONDITIONING[kind], kind, resume=resume)
        plots.plot_training(run.file("iterations.csv"), run.file("training.svg"))
        logger.info(f"[CLI] Phase-1 checkpoint: {path}")
    return 0


def cmd_train_phase2(args, config):
    phase1 = require_file(args.checkpoint, "phase-1 checkpoint")
    run = RunContext(args.out or default_run_dir(config, "phase2"), "train-phase2", config)
    with run_status(run):
        path = train_phase2(phase1, config, config.seed, run.path)
        plots.plot_adaptation(run.file("phase2.csv"), run.file("adaptation.svg"))
        logger.info(f"[CLI] Phase-2 checkpoint: {path}")
    return 0


def cmd_train_baseline(args, config):
    kind = args.kind
    if kind not in BASELINE_KINDS:
        raise CommandError(f"--kind must be one of {', '.join(BASELINE_KINDS)}")
    if args.checkpoint:
        require_file(args.checkpoint, "phase-1 checkpoint")
    run = RunContext(args.out or default_run_dir(config, "baseline", kind), "train-baseline", config, kind)
    with run_status(run):
        path = train_baseline(kind, config, config.seed, run.path, args.checkpoint)
        logger.info(f"[CLI] {kind} checkpoint: {path}")
    return 0


def cmd_evaluate(args, config):
    bundle = load_evaluable(args.checkpoint, args.kind)
    run = RunContext(args.out or default_run_dir(config, "eval", bundle.kind), "evaluate", config, bundle.kind)
    with run_status(run):
        report = evaluate(bundle, config, n_episodes=args.episodes, range_set=args.range_set)
        policy_seed = int(bundle.meta.get("seed", 0))
        row = {"kind": bundle.kind, "policy_seed": policy_seed, **report.as_row()}
        pd.DataFrame([row]).to_csv(run.file("eval.csv"), index=False, float_format="%.10g")
        database.save_metrics(run.path, "evaluate", bundle.kind, report, policy_seed)
    return 0


def cmd_deploy(args, config):
    bundle = load_evaluable(args.checkpoint, args.kind)
    if bundle.module is None:
        raise CommandError(f"{args.checkpoint}: deployment needs a phase-2 checkpoint with an adaptation module")
    scenario = None
    if args.scenario:
        try:
            scenario = load_scenario(require_file(args.scenario, "scenario file"))
        except ValueError as e:
            raise CommandError(str(e)) from None
    mode = args.mode or config.deploy.mode
    run = RunContext(args.out or default_run_dir(config, "deploy", mode), "deploy", config, bundle.kind)
    with run_status(run):
        trace = run_episode(bundle, config, mode, config.seed, scenario)
        trace_path = args.trace_out or run.file("trace.csv")
        trace.to_csv(trace_path)

        components = args.components if args.components is not None else list(range(min(2, trace.latent_dim)))
        try:
            extrinsics_trace_export(trace, components, run.file("extrinsics.csv"), config.deploy.median_window)
        except IndexError as e:
            raise CommandError(str(e)) from None
        plots.plot_trace(trace_path, run.file("trace.svg"), components, run.file("extrinsics.csv"))

        report = staleness_audit(trace, config.deploy.staleness_periods)
        latency = latency_summary(trace)
        logger.info(f"[DEPLOY] refresh interval max {report.max_interval} steps, estimate age max "
                    f"{report.max_age} (bound {report.bound}); policy latency p99 {latency['p99_ms']:.3f} ms")
        if mode == "lockstep":
            require_fresh(report)
        elif not report.ok:
            logger.warning("[DEPLOY] Estimator fell behind the staleness bound")
        if scenario and scenario.events:
            step = scenario.event_steps()[0]
            if step < trace.steps:
                shift = extrinsics_shift(trace, step)
                logger.info(f"[DEPLOY] Estimate shift at step {step} (in pre-change std): "
                            + " ".join(f"z{i}={s:+.2f}" for i, s in enumerate(shift)))
    return 0


def cmd_sweep(args, config):
    if args.parameter not in SWEEP_PARAMETERS:
        raise CommandError(f"--parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
    if not args.checkpoint:
        raise CommandError("sweep needs at least one --checkpoint kind=path")
    grid = parse_grid(args.grid)
    bundles = {}
    for spec in args.checkpoint:
        kind, sep, path = spec.partition("=")
        if not sep:
            kind, path = None, spec
        bundle = load_evaluable(path, kind)
        bundles[bundle.kind] = bundle
    run = RunContext(args.out or default_run_dir(config, "sweep", args.parameter), "sweep", config)
    with run_status(run):
        frame = sweep(bundles, args.parameter, grid, config, n_episodes=args.episodes)
        frame.to_csv(run.file("sweep.csv"), index=False, float_format="%.10g")
        for row in frame.to_dict("records"):
            database.save_metrics(run.path, "sweep", row["kind"], row, parameter=row["parameter"], value=row["value"])
        plots.plot_sweep(run.file("sweep.csv"), run.file("sweep.svg"))
    return 0


def cmd_plot(args, config):
    if not args.run or not os.path.isdir(args.run):
        raise CommandError(f"--run must name an existing run directory, got {args.run!r}")
    written = plots.plot_run(args.run)
    if not written:
        raise CommandError(f"{args.run} holds no CSV logs to plot")
    return 0


def cmd_table(args, config):
    database.init_database()
    rows = database.get_metrics("evaluate", run_dirs=args.run_dirs or None)
    if not rows:
        raise CommandError("the run registry holds no evaluation reports")
    frame = pd.DataFrame(rows)
    text, table = render_table(frame)
    out = args.out or os.path.join(config.out_dir, "table")
    os.makedirs(out, exist_ok=True)
    table.to_csv(os.path.join(out, "table.csv"), float_format="%.6g")
    with open(os.path.join(out, "table.txt"), "w", encoding="utf-8") as f:
        f.write(text + "\n")
    print(text)
    summary = frame.groupby("kind")[["success_rate", "reward"]].mean()
    for name, ok in ordering_checks(summary, config.eval.noise_band).items():
        logger.info(f"[EVAL] {'[OK]' if ok else '[FAIL]'} {name}")
    return 0


COMMANDS = {
    "train-phase1": cmd_train_phase1,
    "train-phase2": cmd_train_phase2,
    "train-baseline": cmd_train_baseline,
    "evaluate": cmd_evaluate,
    "deploy": cmd_deploy,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "table": cmd_table,
}


# ------------------------------------------------------------------------------
# Parser
# ------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="rapidmotor", description="Rapid motor adaptation on a planar hopper")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", choices=PRESETS, help="base preset (default: desk, or the file's preset)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="run directory (must be empty)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train-phase1", parents=[common], help="PPO with privileged factors")
    p.add_argument("--kind", choices=sorted(PHASE1_CONDITIONING), default="rma")
    p.add_argument("--resume", help="periodic phase-1 checkpoint to continue from")

    p = commands.add_parser("train-phase2", parents=[common], help="fit the adaptation module")
    p.add_argument("--checkpoint", help="phase-1 checkpoint")

    p = commands.add_parser("train-baseline", parents=[common], help="produce a baseline checkpoint")
    p.add_argument("--kind", choices=BASELINE_KINDS, required=True)
    p.add_argument("--checkpoint", help="phase-1 checkpoint to reuse (rma_no_adapt, awr)")

    p = commands.add_parser("evaluate", parents=[common], help="success rate, TTF, reward and costs")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--kind", choices=BASELINE_KINDS, help="evaluate as this baseline (default: stored kind)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--range-set", choices=("train", "test"))

    p = commands.add_parser("deploy", parents=[common], help="two-rate deployment episode")
    p.add_argument("--checkpoint", help="phase-2 checkpoint")
    p.add_argument("--kind", choices=BASELINE_KINDS)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--scenario", help="scenario file scripting factor changes")
    p.add_argument("--trace-out", help="trace CSV path (default: <run>/trace.csv)")
    p.add_argument("--components", type=int, nargs="+", help="estimate components to export")

    p = commands.add_parser("sweep", parents=[common], help="one-factor-at-a-time sweep")
    p.add_argument("--checkpoint", action="append", metavar="KIND=PATH", help="repeat per baseline")
    p.add_argument("--parameter", choices=SWEEP_PARAMETERS, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--episodes", type=int)

    p = commands.add_parser("plot", parents=[common], help="regenerate SVGs from a run's CSVs")
    p.add_argument("--run", help="run directory")

    p = commands.add_parser("table", parents=[common], help="aggregate registry reports over policy seeds")
    p.add_argument("--run", dest="run_dirs", action="append", help="restrict to these run directories")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (CommandError, ConfigError, CheckpointError) as e:
        logger.error(f"[CLI] {args.command}: {e}")
        return 2
    except Exception as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        traceback.print_exc()
        return 1
