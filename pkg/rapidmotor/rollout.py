"""
Episode loops and the rollout worker pool shared by training, evaluation and deployment.
"""

import logging
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import terrain
from .hopper_env import FELL, RUNNING, TIMEOUT, HopperEnv, HopperParams, factor_ranges
from .reward import PreviousStep, RewardTerms, compute_terms, scale_and_sum, scaled_terms


logger = logging.getLogger(__name__)

TRAIN_RANGES = factor_ranges("train")


def normalized_factors(factors):
    return TRAIN_RANGES.normalize(factors.to_vector())


# ------------------------------------------------------------------------------
# Worker pool
# ------------------------------------------------------------------------------

def run_workers(count, job, threads=1):
    """Run job(i) for i in range(count) on a thread pool; results come back in index order."""
    if threads <= 1 or count <= 1:
        return [job(i) for i in range(count)]

    work_queue = queue.Queue()
    for i in range(count):
        work_queue.put(i)
    results = [None] * count
    errors = []
    stop = threading.Event()

    def consumer():
        while not stop.is_set():
            try:
                index = work_queue.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = job(index)
            except Exception as e:
                errors.append((index, e))
                stop.set()
            finally:
                work_queue.task_done()

    workers = [threading.Thread(target=consumer, daemon=True) for _ in range(min(threads, count))]
    for worker in workers:
        worker.start()
    for worker in workers:
        worker.join()

    if errors:
        index, error = min(errors, key=lambda item: item[0])
        logger.error(f"[ROLLOUT] Worker failed on job {index}: {error}")
        raise error
    return results


# ------------------------------------------------------------------------------
# History window
# ------------------------------------------------------------------------------

class HistoryWindow:
    """Last k (observation, action) pairs, oldest first, zero-padded until k steps exist."""

    def __init__(self, length, obs_dim, action_dim):
        self.length = length
        self.obs_dim = obs_dim
        self._buffer = np.zeros((length, obs_dim + action_dim))
        self._next = 0
        self.count = 0

    def push(self, obs, action):
        row = self._buffer[self._next]
        row[:self.obs_dim] = obs
        row[self.obs_dim:] = action
        self._next = (self._next + 1) % self.length
        self.count += 1

    def array(self):
        return np.concatenate([self._buffer[self._next:], self._buffer[:self._next]], axis=0)

    def clear(self):
        self._buffer.fill(0.0)
        self._next = 0
        self.count = 0


# ------------------------------------------------------------------------------
# Conditioning sources
# ------------------------------------------------------------------------------

class PrivilegedController:
    """Conditions the policy on the true factors (through mu for latent policies)."""

    ground_truth = True

    def __init__(self, nets):
        self.nets = nets

    def reset(self, env, history):
        pass

    def condition(self, env, history, t):
        if self.nets.conditioning == "none":
            return None
        e = normalized_factors(env.factors)
        if self.nets.conditioning == "latent":
            return self.nets.latent(e)
        return e


class ConstantController:
    ground_truth = False

    def __init__(self, value):
        self.value = None if value is None else np.asarray(value, dtype=np.float64)

    def reset(self, env, history):
        pass

    def condition(self, env, history, t):
        return self.value


class AdaptiveController:
    """Re-estimates the conditioning from the history window every `period` steps."""

    ground_truth = False

    def __init__(self, module, period=1):
        self.module = module
        self.period = period
        self.current = None
        self.refreshes = 0

    def reset(self, env, history):
        self.current = None
        self.refreshes = 0

    def condition(self, env, history, t):
        if self.current is None or t % self.period == 0:
            self.current = self.module.estimate(history.array())
            self.refreshes += 1
        return self.current


# ------------------------------------------------------------------------------
# Episodes
# ------------------------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    obs: np.ndarray
    action: np.ndarray
    cond: object
    log_prob: float
    value: float
    info: object
    terms: object
    reward: float
    status: str
    factors: object = None
    window: object = None


@dataclass
class EpisodeSummary:
    steps: int
    status: str
    start_x: float
    end_x: float
    ground_truth_steps: int = 0

    @property
    def fell(self):
        return self.status == FELL

    @property
    def distance(self):
        return self.end_x - self.start_x


def make_profile(terrain_section, seed, z_scale=None):
    return terrain.generate(int(seed), terrain_section.params(z_scale), terrain_section.length,
                            terrain_section.resolution, terrain_section.origin)


def make_env(config, rng, range_set="train", scale=1.0, resample_prob=None, fixed_gains=False, params=None):
    params = params or HopperParams()
    episode = config.env.episode_config(resample_prob, params)
    return HopperEnv(None, rng, range_set, scale, params, episode, fixed_gains)


def begin_episode(env, terrain_section, z_scale=None, factors=None):
    env.profile = make_profile(terrain_section, env.rng.integers(2 ** 31), z_scale)
    return env.reset(factors)


def rollout_episode(env, nets, controller, terrain_section, curriculum, history_length=50, rng=None,
                    deterministic=True, observer=None, max_steps=None, z_scale=None, factors=None,
                    keep_windows=False, forward_cap=0.35):
    """Run one episode to fall/timeout (or max_steps); observer(StepRecord) sees every step."""
    obs = begin_episode(env, terrain_section, z_scale, factors)
    history = HistoryWindow(history_length, nets.dims.obs_dim, nets.dims.action_dim)
    controller.reset(env, history)
    limit = max_steps or env.config.max_steps
    start_x = env.state.x
    prev_action = np.zeros(nets.dims.action_dim)
    prev = PreviousStep()
    ground_truth_steps = 0
    status = RUNNING
    t = 0

    while status == RUNNING and t < limit:
        window = history.array() if keep_windows else None
        cond = controller.condition(env, history, t)
        if controller.ground_truth:
            ground_truth_steps += 1
        action, log_prob, value = nets.act(obs, prev_action, cond, rng, deterministic)
        factors_t = env.factors
        info, status = env.step(action)
        if info is None:
            terms, reward = RewardTerms(), 0.0
        else:
            terms = compute_terms(info, env.state, prev, action, forward_cap)
            reward = scale_and_sum(terms, curriculum)
            prev = PreviousStep(action=tuple(action), torques=info.torques, grf=info.grf)
        if observer is not None:
            observer(StepRecord(t, obs, action, cond, log_prob, value, info, terms, reward, status, factors_t, window))
        history.push(obs, action)
        prev_action = action
        obs = env.observation()
        t += 1

    if status == RUNNING:
        status = TIMEOUT
    return EpisodeSummary(steps=t, status=status, start_x=start_x, end_x=env.state.x,
                          ground_truth_steps=ground_truth_steps)


# ------------------------------------------------------------------------------
# Phase-1 segments
# ------------------------------------------------------------------------------

@dataclass
class Segment:
    """steps_per_env transitions from one environment, possibly spanning several episodes."""

    obs: np.ndarray
    prev_actions: np.ndarray
    factors: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap_values: np.ndarray
    raw_terms: np.ndarray
    scaled_terms: np.ndarray
    episodes: int = 0
    falls: int = 0
    forward_velocity: float = 0.0
    stats: dict = field(default_factory=dict)


def collect_segment(nets, config, curriculum, scale, rng, steps, range_set="train"):
    """Stochastic on-policy transitions for PPO with privileged conditioning."""
    dims = nets.dims
    env = make_env(config, rng, range_set, scale)
    buffers = {
        "obs": np.zeros((steps, dims.obs_dim)),
        "prev_actions": np.zeros((steps, dims.action_dim)),
        "factors": np.zeros((steps, dims.factor_dim)),
        "actions": np.zeros((steps, dims.action_dim)),
        "log_probs": np.zeros(steps),
        "values": np.zeros(steps),
        "rewards": np.zeros(steps),
        "dones": np.zeros(steps, dtype=bool),
        "bootstrap_values": np.zeros(steps),
        "raw_terms": np.zeros((steps, 10)),
        "scaled_terms": np.zeros((steps, 10)),
    }
    controller = PrivilegedController(nets)
    scales = config.reward.scales
    episodes = falls = 0
    velocity_sum = 0.0

    obs = begin_episode(env, config.terrain)
    prev_action = np.zeros(dims.action_dim)
    prev = PreviousStep()
    for t in range(steps):
        e = normalized_factors(env.factors)
        cond = controller.condition(env, None, t)
        action, log_prob, value = nets.act(obs, prev_action, cond, rng)
        buffers["obs"][t] = obs
        buffers["prev_actions"][t] = prev_action
        buffers["factors"][t] = e
        buffers["actions"][t] = action
        buffers["log_probs"][t] = log_prob
        buffers["values"][t] = value

        info, status = env.step(action)
        if info is not None:
            terms = compute_terms(info, env.state, prev, action, config.reward.forward_cap)
            buffers["raw_terms"][t] = terms.as_array()
            buffers["scaled_terms"][t] = scaled_terms(terms, curriculum, scales)
            buffers["rewards"][t] = scale_and_sum(terms, curriculum, scales)
            prev = PreviousStep(action=tuple(action), torques=info.torques, grf=info.grf)
            velocity_sum += env.state.vx

        if status != RUNNING or t == steps - 1:
            buffers["dones"][t] = True
            if status == FELL:
                buffers["bootstrap_values"][t] = 0.0
            else:
                next_cond = controller.condition(env, None, t + 1)
                _, _, buffers["bootstrap_values"][t] = nets.act(env.observation(), action, next_cond, rng,
                                                                deterministic=True)
            if status != RUNNING:
                episodes += 1
                falls += status == FELL
                obs = begin_episode(env, config.terrain)
                prev_action = np.zeros(dims.action_dim)
                prev = PreviousStep()
                continue
        obs = env.observation()
        prev_action = action

    not_done = ~buffers["dones"]
    buffers["bootstrap_values"][:-1][not_done[:-1]] = buffers["values"][1:][not_done[:-1]]
    return Segment(**buffers, episodes=episodes, falls=falls, forward_velocity=velocity_sum / steps)
