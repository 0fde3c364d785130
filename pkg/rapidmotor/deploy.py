"""
Two-rate deployment runtime.

The controller acts every control step with whatever estimate currently sits in
the ExtrinsicsSlot; the estimator refreshes the slot from the history window
once per estimator period. Lockstep interleaves both on one thread; realtime
runs the estimator on its own thread against a wall clock.
"""

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.ndimage import median_filter

from .config import parse_lines
from .hopper_env import FACTOR_NAMES, RUNNING, TIMEOUT, deployment_gains
from .reward import PreviousStep, compute_terms, task_reward
from .rollout import HistoryWindow, TRAIN_RANGES, begin_episode, make_env


logger = logging.getLogger(__name__)

MODES = ("lockstep", "realtime")
SCRIPTABLE_FACTORS = FACTOR_NAMES[:-1]


class StalenessViolation(RuntimeError):
    pass


class ExtrinsicsSlot:
    """Latest estimate plus its update tick, replaced as one immutable tuple."""

    def __init__(self, value, tick=0):
        self._value = (self._freeze(value), tick)

    @staticmethod
    def _freeze(value):
        frozen = np.array(value, dtype=np.float64, copy=True)
        frozen.setflags(write=False)
        return frozen

    def publish(self, value, tick):
        self._value = (self._freeze(value), tick)

    def read(self):
        return self._value

    @property
    def tick(self):
        return self._value[1]


# ------------------------------------------------------------------------------
# Scenarios
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    seed: int = None
    resample_prob: float = 0.0
    z_scale: float = None
    max_steps: int = None
    initial: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)

    def event_steps(self):
        return sorted(self.events)


def _factor_value(name, value, where):
    if name not in SCRIPTABLE_FACTORS:
        raise ValueError(f"{where}: unknown factor {name!r} (choose from {', '.join(SCRIPTABLE_FACTORS)})")
    try:
        return float(value)
    except ValueError:
        raise ValueError(f"{where}: {value!r} is not a number") from None


def parse_scenario(text, source="<scenario>"):
    """Keys: seed, resample_prob, terrain.z_scale, max_steps, initial.<factor>, event.<step>.<factor>."""
    values = parse_lines(text, source)
    options = {"initial": {}, "events": {}}
    for key, value in values.items():
        parts = key.split(".")
        where = f"{source}: {key}"
        if key == "seed":
            options["seed"] = int(value)
        elif key == "resample_prob":
            options["resample_prob"] = float(value)
        elif key == "max_steps":
            options["max_steps"] = int(value)
        elif key == "terrain.z_scale":
            options["z_scale"] = float(value)
        elif parts[0] == "initial" and len(parts) == 2:
            options["initial"][parts[1]] = _factor_value(parts[1], value, where)
        elif parts[0] == "event" and len(parts) == 3 and parts[1].isdigit():
            step = int(parts[1])
            options["events"].setdefault(step, {})[parts[2]] = _factor_value(parts[2], value, where)
        else:
            raise ValueError(f"{where}: unrecognized scenario key")
    return Scenario(**options)


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_scenario(f.read(), path)


def friction_drop_scenario(step=500, before=1.0, after=0.05, seed=None):
    return Scenario(seed=seed, initial={"friction": before}, events={step: {"friction": after}})


def payload_drop_scenario(step=500, payload=0.5, seed=None):
    return Scenario(seed=seed, initial={"payload": payload}, events={step: {"payload": 0.0}})


# ------------------------------------------------------------------------------
# Runtime
# ------------------------------------------------------------------------------

@dataclass
class EpisodeTrace:
    mode: str
    period: int
    rows: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    status: str = RUNNING
    latent_dim: int = 0

    @property
    def steps(self):
        return len(self.rows)

    @property
    def fell(self):
        return self.status not in (RUNNING, TIMEOUT)

    def frame(self):
        return pd.DataFrame(self.rows)

    def latents(self):
        return np.array([[row[f"z{i}"] for i in range(self.latent_dim)] for row in self.rows])

    def ticks(self):
        return np.array([row["tick"] for row in self.rows], dtype=np.int64)

    def total_reward(self):
        return float(sum(row["task_reward"] for row in self.rows))

    def to_csv(self, path):
        self.frame().to_csv(path, index=False, float_format="%.10g")
        return path


def _trace_row(t, env, action, info, z, tick, terms, scales):
    state = env.state
    row = {
        "t": t,
        "x": state.x,
        "z": state.z,
        "pitch": state.pitch,
        "hip_angle": state.hip_angle,
        "leg_length": state.leg_length,
        "vx": state.vx,
        "action_hip": float(action[0]),
        "action_leg": float(action[1]),
        "torque_hip": info.torques[0] if info else 0.0,
        "torque_leg": info.torques[1] if info else 0.0,
        "grf_x": info.grf[0] if info else 0.0,
        "grf_z": info.grf[1] if info else 0.0,
        "contact": int(info.contact) if info else 0,
        "friction": env.factors.friction,
        "payload": env.factors.payload,
        "task_reward": task_reward(terms, scales) if terms else 0.0,
        "tick": tick,
    }
    for i, value in enumerate(z):
        row[f"z{i}"] = float(value)
    return row


def _prepare(bundle, config, seed, scenario, max_steps):
    if bundle.module is None:
        raise ValueError(f"'{bundle.kind}' checkpoint has no adaptation module to deploy")
    scenario = scenario or Scenario(seed=seed)
    rng = np.random.default_rng([scenario.seed if scenario.seed is not None else seed, 11])
    env = make_env(config, rng, "test", resample_prob=scenario.resample_prob, fixed_gains=True)
    factors = None
    if scenario.initial or scenario.events:
        factors = deployment_gains(TRAIN_RANGES.midpoints().with_values(**scenario.initial))
    obs = begin_episode(env, config.terrain, scenario.z_scale, factors)
    limit = max_steps or scenario.max_steps or config.deploy.max_steps
    return env, obs, scenario, min(limit, env.config.max_steps)


def run_episode(bundle, config, mode="lockstep", seed=0, scenario=None, max_steps=None):
    """Deterministic-action episode with the estimate refreshed at the estimator rate."""
    if mode not in MODES:
        raise ValueError(f"unknown deploy mode {mode!r} (choose from {', '.join(MODES)})")
    env, obs, scenario, limit = _prepare(bundle, config, seed, scenario, max_steps)
    period = config.deploy.period_steps
    dims = bundle.nets.dims
    history = HistoryWindow(dims.history, dims.obs_dim, dims.action_dim)
    slot = ExtrinsicsSlot(bundle.module.estimate(history.array()), tick=1)
    trace = EpisodeTrace(mode=mode, period=period, latent_dim=bundle.module.output_dim)
    logger.info(f"[DEPLOY] {mode} episode, {limit} steps, estimator every {period} control steps")
    if mode == "lockstep":
        _run_lockstep(bundle, config, env, obs, scenario, limit, history, slot, trace)
    else:
        _run_realtime(bundle, config, env, obs, scenario, limit, history, slot, trace)
    logger.info(f"[DEPLOY] Episode ended after {trace.steps} steps ({trace.status})")
    return trace


def _control_step(bundle, config, env, obs, prev_action, prev, slot, scenario, t, trace):
    if t in scenario.events:
        env.set_factors(**scenario.events[t])
        logger.info(f"[DEPLOY] Step {t}: factors changed {scenario.events[t]}")
    started = time.perf_counter()
    z, tick = slot.read()
    action, _, _ = bundle.nets.act(obs, prev_action, z, deterministic=True)
    trace.latencies.append(time.perf_counter() - started)
    info, status = env.step(action)
    terms = None
    if info is not None:
        terms = compute_terms(info, env.state, prev, action, config.reward.forward_cap)
        prev = PreviousStep(action=tuple(action), torques=info.torques, grf=info.grf)
    trace.rows.append(_trace_row(t, env, action, info, z, tick, terms, config.reward.scales))
    trace.status = status
    return action, prev, status


def _run_lockstep(bundle, config, env, obs, scenario, limit, history, slot, trace):
    prev_action = np.zeros(bundle.nets.dims.action_dim)
    prev = PreviousStep()
    for t in range(limit):
        if t > 0 and t % trace.period == 0:
            slot.publish(bundle.module.estimate(history.array()), slot.tick + 1)
        action, prev, status = _control_step(bundle, config, env, obs, prev_action, prev, slot, scenario, t, trace)
        history.push(obs, action)
        prev_action = action
        obs = env.observation()
        if status != RUNNING:
            return
    trace.status = TIMEOUT


def _run_realtime(bundle, config, env, obs, scenario, limit, history, slot, trace):
    control_period = 1.0 / config.deploy.control_hz
    estimator_period = 1.0 / config.deploy.estimator_hz
    lock = threading.Lock()
    stop = threading.Event()

    def estimator():
        next_time = time.perf_counter() + estimator_period
        while not stop.is_set():
            delay = next_time - time.perf_counter()
            if delay > 0 and stop.wait(delay):
                return
            with lock:
                window = history.array()
            slot.publish(bundle.module.estimate(window), slot.tick + 1)
            next_time += estimator_period

    worker = threading.Thread(target=estimator, name="estimator", daemon=True)
    worker.start()
    prev_action = np.zeros(bundle.nets.dims.action_dim)
    prev = PreviousStep()
    start = time.perf_counter()
    try:
        for t in range(limit):
            delay = start + t * control_period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            action, prev, status = _control_step(bundle, config, env, obs, prev_action, prev, slot, scenario, t,
                                                 trace)
            with lock:
                history.push(obs, action)
            prev_action = action
            obs = env.observation()
            if status != RUNNING:
                return
        trace.status = TIMEOUT
    finally:
        stop.set()
        worker.join()


# ------------------------------------------------------------------------------
# Audits and exports
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class StalenessReport:
    mode: str
    period: int
    max_interval: int
    refreshes: int
    max_age: int
    bound: int
    ok: bool


def staleness_audit(trace, tolerance_periods=2):
    """Control steps between estimate refreshes as seen by the controller."""
    ticks = trace.ticks()
    if len(ticks) == 0:
        return StalenessReport(trace.mode, trace.period, 0, 0, 0, trace.period, True)
    changes = np.flatnonzero(np.diff(ticks) != 0) + 1
    refresh_steps = np.concatenate([[0], changes])
    intervals = np.diff(refresh_steps)
    max_interval = int(intervals.max()) if len(intervals) else 0
    ages = np.arange(len(ticks)) - refresh_steps[np.searchsorted(refresh_steps, np.arange(len(ticks)), "right") - 1]
    max_age = int(ages.max()) + 1

    if trace.mode == "lockstep":
        bound = trace.period
        ok = bool(np.all(intervals == trace.period)) and max_age <= bound
    else:
        bound = tolerance_periods * trace.period
        ok = max_interval <= bound and max_age <= bound
    return StalenessReport(trace.mode, trace.period, max_interval, len(changes), max_age, bound, ok)


def require_fresh(report):
    if not report.ok:
        raise StalenessViolation(f"{report.mode}: estimate refresh interval {report.max_interval} "
                                 f"(age {report.max_age}) exceeds {report.bound} control steps")
    return report


def latency_summary(trace):
    latencies = np.asarray(trace.latencies) * 1e3
    if len(latencies) == 0:
        return {"p50_ms": 0.0, "p99_ms": 0.0, "max_ms": 0.0}
    return {"p50_ms": float(np.percentile(latencies, 50)), "p99_ms": float(np.percentile(latencies, 99)),
            "max_ms": float(latencies.max())}


def extrinsics_trace_export(trace, components, path=None, window=5):
    """Median-filtered estimate components next to torques and contacts."""
    for index in components:
        if not 0 <= index < trace.latent_dim:
            raise IndexError(f"component {index} out of range for a {trace.latent_dim}-dim estimate")
    frame = trace.frame()
    out = pd.DataFrame({"t": frame["t"]})
    for index in components:
        raw = frame[f"z{index}"].to_numpy()
        out[f"z{index}"] = raw
        out[f"z{index}_filtered"] = median_filter(raw, size=window, mode="nearest")
    for column in ("torque_hip", "torque_leg", "contact", "friction", "payload"):
        out[column] = frame[column]
    if path:
        out.to_csv(path, index=False, float_format="%.10g")
        logger.info(f"[DEPLOY] Extrinsics trace written to {path}")
    return out


def extrinsics_shift(trace, change_step, window=None):
    """(post mean - pre mean) / pre std per estimate component around a scripted change."""
    latents = trace.latents()
    window = window or change_step
    pre = latents[max(0, change_step - window):change_step]
    post = latents[change_step:change_step + window]
    if len(pre) < 2 or len(post) == 0:
        return np.zeros(trace.latent_dim)
    spread = pre.std(axis=0)
    return (post.mean(axis=0) - pre.mean(axis=0)) / np.maximum(spread, 1e-9)
