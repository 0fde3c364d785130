"""Baseline evaluation, one-factor sweeps and Table-I style reporting."""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .config import worker_count
from .hopper_env import FELL
from .networks import LATENT, NONE
from .reward import CurriculumState, task_reward
from .rollout import (AdaptiveController, ConstantController, PrivilegedController, TRAIN_RANGES, begin_episode,
                      make_env, rollout_episode, run_workers)


logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("success_rate", "ttf", "reward", "distance", "adaptation_samples", "torque", "smoothness",
                  "ground_impact")
TABLE_HEADERS = {"success_rate": "Success (%)", "ttf": "TTF", "reward": "Reward", "distance": "Distance (m)",
                 "adaptation_samples": "Samples", "torque": "Torque", "smoothness": "Smoothness",
                 "ground_impact": "Ground Impact"}
SWEEP_PARAMETERS = ("payload", "terrain_z", "friction")
TABLE_ORDER = ("robust", "sysid", "awr", "rma_no_adapt", "rma", "expert")


@dataclass(frozen=True)
class EpisodeMetrics:
    steps: int
    fell: bool
    ttf: float
    reward: float
    distance: float
    torque: float
    smoothness: float
    ground_impact: float
    adaptation_samples: int = 0


@dataclass(frozen=True)
class MetricsReport:
    success_rate: float
    ttf: float
    reward: float
    distance: float
    adaptation_samples: float
    torque: float
    smoothness: float
    ground_impact: float
    episodes: int
    seed: int

    def as_row(self):
        return asdict(self)


def aggregate(episodes, seed=0):
    if not episodes:
        raise ValueError("no episodes to aggregate")

    def mean(name):
        return float(np.mean([getattr(e, name) for e in episodes]))

    return MetricsReport(success_rate=float(np.mean([not e.fell for e in episodes])), ttf=mean("ttf"),
                         reward=mean("reward"), distance=mean("distance"),
                         adaptation_samples=mean("adaptation_samples"), torque=mean("torque"),
                         smoothness=mean("smoothness"), ground_impact=mean("ground_impact"),
                         episodes=len(episodes), seed=seed)


class MetricAccumulator:
    """Per-episode sums of task reward, |tau|^2, |dtau|^2 and |dGRF|^2."""

    def __init__(self, scales):
        self.scales = scales
        self.steps = 0
        self.reward = self.torque = self.smoothness = self.ground_impact = 0.0
        self._prev_torque = np.zeros(2)
        self._prev_grf = np.zeros(2)

    def __call__(self, record):
        self.steps += 1
        if record.info is None:
            return
        torque = np.asarray(record.info.torques)
        grf = np.asarray(record.info.grf)
        d_torque = torque - self._prev_torque
        d_grf = grf - self._prev_grf
        self.reward += task_reward(record.terms, self.scales)
        self.torque += float(torque @ torque)
        self.smoothness += float(d_torque @ d_torque)
        self.ground_impact += float(d_grf @ d_grf)
        self._prev_torque, self._prev_grf = torque, grf

    def finish(self, summary, max_steps, samples=0):
        n = max(self.steps, 1)
        fell = summary.status == FELL
        return EpisodeMetrics(steps=summary.steps, fell=fell, ttf=summary.steps / max_steps if fell else 1.0,
                              reward=self.reward / n, distance=summary.distance, torque=self.torque / n,
                              smoothness=self.smoothness / n, ground_impact=self.ground_impact / n,
                              adaptation_samples=samples)


# ------------------------------------------------------------------------------
# Conditioning per baseline
# ------------------------------------------------------------------------------

def controller_for(bundle, kind=None):
    kind = kind or bundle.kind
    nets = bundle.nets
    if kind == "robust":
        if nets.conditioning != NONE:
            raise ValueError("robust evaluation needs an unconditioned policy")
        return ConstantController(None)
    if kind == "expert":
        if nets.conditioning != LATENT:
            raise ValueError("expert evaluation needs a latent-conditioned policy")
        return PrivilegedController(nets)
    if kind in ("rma", "sysid"):
        if bundle.module is None:
            raise ValueError(f"{kind} evaluation needs a phase-2 checkpoint with an adaptation module")
        return AdaptiveController(bundle.module)
    if kind in ("rma_no_adapt", "awr"):
        if bundle.frozen_latent is None:
            raise ValueError(f"{kind} evaluation needs a checkpoint with latent statistics")
        return ConstantController(bundle.frozen_latent)
    raise ValueError(f"unknown baseline kind {kind!r}")


def awr_search(bundle, config, condition, rng, range_set="test", z_scale=None):
    """Fit a constant latent to one test condition by advantage-weighted regression.

    Each round draws candidates around the current mean, scores each with a short
    rollout under `condition`, and refits mean/std to the exp(advantage)-weighted
    candidates. Returns (latent, transitions used).
    """
    ev = config.eval
    mean = np.array(bundle.frozen_latent, dtype=np.float64)
    std = np.maximum(np.array(bundle.latent_std, dtype=np.float64), 1e-3)
    curriculum = CurriculumState(k=1.0)
    samples = 0
    for _ in range(ev.awr_rounds):
        candidates = mean + std * rng.standard_normal((ev.awr_candidates, len(mean)))
        returns = np.zeros(ev.awr_candidates)
        for j, candidate in enumerate(candidates):
            env = make_env(config, np.random.default_rng(rng.integers(2 ** 31)), range_set, resample_prob=0.0)
            totals = MetricAccumulator(config.reward.scales)
            summary = rollout_episode(env, bundle.nets, ConstantController(candidate), config.terrain, curriculum,
                                      bundle.nets.dims.history, observer=totals, max_steps=ev.awr_rollout_steps,
                                      z_scale=z_scale, factors=condition, forward_cap=config.reward.forward_cap)
            samples += summary.steps
            returns[j] = totals.reward
        weights = np.exp((returns - returns.max()) / (returns.std() + 1e-8))
        weights /= weights.sum()
        mean = weights @ candidates
        std = np.maximum(np.sqrt(weights @ (candidates - mean) ** 2), 1e-3)
    return mean, samples


# ------------------------------------------------------------------------------
# Evaluation
# ------------------------------------------------------------------------------

def episode_env(config, eval_seed, episode_index, range_set, resample_prob):
    """Every baseline sees this same env stream for a given (eval_seed, episode_index)."""
    return make_env(config, np.random.default_rng([eval_seed, episode_index]), range_set,
                    resample_prob=resample_prob)


def evaluate_episode(bundle, config, episode_index, eval_seed, range_set, resample_prob, kind=None, z_scale=None):
    kind = kind or bundle.kind
    controller = controller_for(bundle, kind)
    samples = 0
    if kind == "awr":
        twin = episode_env(config, eval_seed, episode_index, range_set, resample_prob)
        begin_episode(twin, config.terrain, z_scale)
        latent, samples = awr_search(bundle, config, twin.factors,
                                     np.random.default_rng([eval_seed, episode_index, 2]), range_set, z_scale)
        controller = ConstantController(latent)

    env = episode_env(config, eval_seed, episode_index, range_set, resample_prob)
    totals = MetricAccumulator(config.reward.scales)
    summary = rollout_episode(env, bundle.nets, controller, config.terrain, CurriculumState(k=1.0),
                              bundle.nets.dims.history, observer=totals, z_scale=z_scale,
                              forward_cap=config.reward.forward_cap)
    return totals.finish(summary, env.config.max_steps, samples)


def evaluate(bundle, config, n_episodes=None, range_set=None, resample_prob=None, kind=None, eval_seed=None,
             threads=None, z_scale=None):
    """Deterministic-action episodes over randomized factors, aggregated into one MetricsReport."""
    kind = kind or bundle.kind
    n_episodes = n_episodes or config.eval.episodes
    range_set = range_set or config.eval.range_set
    resample_prob = config.eval.resample_prob if resample_prob is None else resample_prob
    eval_seed = config.seed if eval_seed is None else eval_seed
    threads = threads or worker_count()
    controller_for(bundle, kind)

    episodes = run_workers(n_episodes, lambda i: evaluate_episode(bundle, config, i, eval_seed, range_set,
                                                                  resample_prob, kind, z_scale), threads)
    report = aggregate(episodes, eval_seed)
    logger.info(f"[EVAL] {kind}: success {100 * report.success_rate:.1f}%  ttf {report.ttf:.3f}  "
                f"reward {report.reward:.3f}  over {n_episodes} episodes")
    return report


def sweep_ranges(parameter, value):
    """Training midpoints for every factor except the swept one."""
    ranges = TRAIN_RANGES.scaled(0.0)
    if parameter == "friction":
        return ranges.fixed(friction=value), None
    if parameter == "payload":
        return ranges.fixed(payload=value), None
    if parameter == "terrain_z":
        return ranges, float(value)
    raise ValueError(f"unknown sweep parameter {parameter!r} (choose from {', '.join(SWEEP_PARAMETERS)})")


def sweep(bundles, parameter, grid, config, n_episodes=None, eval_seed=None, threads=None):
    """One-factor-at-a-time sweep; returns a DataFrame with one row per (kind, grid point)."""
    n_episodes = n_episodes or config.eval.sweep_episodes
    rows = []
    for value in grid:
        ranges, z_scale = sweep_ranges(parameter, value)
        for kind, bundle in bundles.items():
            report = evaluate(bundle, config, n_episodes, ranges, 0.0, kind, eval_seed, threads, z_scale)
            rows.append({"kind": kind, "parameter": parameter, "value": float(value), **report.as_row()})
    return pd.DataFrame(rows)


# ------------------------------------------------------------------------------
# Tables
# ------------------------------------------------------------------------------

def summarize(frame):
    """Mean over policy seeds per kind, in table order."""
    grouped = frame.groupby("kind")[list(METRIC_COLUMNS)].mean()
    order = [k for k in TABLE_ORDER if k in grouped.index] + [k for k in grouped.index if k not in TABLE_ORDER]
    return grouped.loc[order]


def render_table(frame):
    """(aligned text, CSV-ready DataFrame) with the Table-I column set."""
    table = summarize(frame).copy()
    table["success_rate"] = 100.0 * table["success_rate"]
    table = table.rename(columns=TABLE_HEADERS)
    table.index.name = "Method"
    text = table.to_string(float_format=lambda v: f"{v:.3f}")
    return text, table


def ordering_checks(table, band=0.03):
    """Expert >= RMA >= RMA w/o adaptation and RMA >= Robust on success and reward, within band."""
    checks = {}

    def at_least(upper, lower, column, tolerance):
        if upper in table.index and lower in table.index:
            checks[f"{column}:{upper}>={lower}"] = bool(table.loc[upper, column] >= table.loc[lower, column] - tolerance)

    for column, tolerance in (("success_rate", band), ("reward", 0.0)):
        at_least("expert", "rma", column, tolerance)
        at_least("rma", "rma_no_adapt", column, tolerance)
        at_least("rma", "robust", column, tolerance)
    return checks
