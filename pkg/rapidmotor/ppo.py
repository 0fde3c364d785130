"""
PPO with GAE for the Phase-1 policy, encoder and critic.

Batch layout is flat in environment-index order: all transitions from env 0,
then env 1, ... . A done flag ends the advantage recursion; the matching
bootstrap value is V(x_{t+1}) (0 after a fall).
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd


logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PpoConfig:
    clip_ratio_low: float = 0.8
    clip_ratio_high: float = 1.2
    value_clip_low: float = 0.8
    value_clip_high: float = 1.2
    value_clip_floor: float = 0.0
    epochs: int = 4
    minibatches: int = 4
    lr: float = 5e-4
    gamma: float = 0.998
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True

    @classmethod
    def from_section(cls, section):
        return cls(clip_ratio_low=section.clip_low, clip_ratio_high=section.clip_high,
                   value_clip_low=section.value_clip_low, value_clip_high=section.value_clip_high,
                   value_clip_floor=section.value_clip_floor, epochs=section.epochs,
                   minibatches=section.minibatches, lr=section.lr, gamma=section.gamma, lam=section.lam,
                   value_coef=section.value_coef, entropy_coef=section.entropy_coef,
                   normalize_advantages=section.normalize_advantages)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    prev_actions: np.ndarray
    factors: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap_values: np.ndarray
    advantages: np.ndarray = None
    targets: np.ndarray = None

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_segments(cls, segments):
        names = ("obs", "prev_actions", "factors", "actions", "log_probs", "values", "rewards", "dones",
                 "bootstrap_values")
        return cls(**{name: np.concatenate([getattr(s, name) for s in segments]) for name in names})

    def take(self, index):
        return RolloutBatch(**{name: None if value is None else value[index]
                               for name, value in vars(self).items()})


def compute_gae(batch, gamma=0.998, lam=0.95, normalize=True):
    """Returns (advantages, value_targets); targets use the raw advantages."""
    n = len(batch)
    advantages = np.zeros(n)
    deltas = batch.rewards + gamma * batch.bootstrap_values - batch.values
    running = 0.0
    for t in range(n - 1, -1, -1):
        if batch.dones[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    targets = advantages + batch.values
    if normalize and n > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    batch.advantages, batch.targets = advantages, targets
    return advantages, targets


def value_band(old_values, config):
    """Per-sample clip band: [low, high] x old value; value_clip_floor > 0 sets a minimum half-width."""
    a = config.value_clip_low * old_values
    b = config.value_clip_high * old_values
    low, high = np.minimum(a, b), np.maximum(a, b)
    widen = np.maximum(config.value_clip_floor - 0.5 * (high - low), 0.0)
    return low - widen, high + widen


def ppo_loss(nets, batch, config):
    """Clipped surrogate + value_coef * clipped value loss for one minibatch."""
    cond = nets.condition(batch.factors)
    mean = nets.policy_mean(batch.obs, batch.prev_actions, cond)
    log_prob = nd.gaussian_log_prob(mean, nets.params["log_std"], batch.actions)
    ratio = nd.exp(log_prob - batch.log_probs)
    advantages = batch.advantages
    surrogate = nd.minimum(ratio * advantages,
                           nd.clip(ratio, config.clip_ratio_low, config.clip_ratio_high) * advantages)
    policy_loss = -nd.mean(surrogate)

    value = nets.value(batch.obs, batch.prev_actions, cond)
    low, high = value_band(batch.values, config)
    clipped_value = nd.clip(value, low, high)
    value_loss = nd.mean(nd.maximum(nd.square(value - batch.targets), nd.square(clipped_value - batch.targets)))
    total = policy_loss + config.value_coef * value_loss

    ratio_data = ratio.data
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "total_loss": total.item(),
        "clip_fraction": float(np.mean((ratio_data < config.clip_ratio_low) | (ratio_data > config.clip_ratio_high))),
        "approx_kl": float(np.mean(batch.log_probs - log_prob.data)),
    }
    return total, stats


def ppo_update(nets, optimizer, batch, config, rng):
    """epochs x minibatches Adam steps; on a non-finite loss restore params and raise TrainingDiverged."""
    if batch.advantages is None:
        compute_gae(batch, config.gamma, config.lam, config.normalize_advantages)
    snapshot = nets.params.snapshot()
    optim_snapshot = optimizer.state_arrays()
    n = len(batch)
    history = []
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for chunk in np.array_split(order, config.minibatches):
                nets.params.zero_grad()
                loss, stats = ppo_loss(nets, batch.take(chunk), config)
                if not np.isfinite(loss.item()):
                    raise nd.NonFiniteError("non-finite PPO loss")
                nd.backward(loss)
                optimizer.step()
                history.append(stats)
    except FloatingPointError as e:
        nets.params.restore(snapshot)
        optimizer.load_state_arrays(optim_snapshot)
        diagnostics = {"epoch": epoch, "steps_done": len(history), "error": str(e)}
        logger.error(f"[PPO] Update diverged after {len(history)} steps: {e}")
        raise TrainingDiverged(f"PPO update diverged: {e}", diagnostics) from e

    summary = {key: float(np.mean([h[key] for h in history])) for key in history[0]}
    summary["optimizer_steps"] = len(history)
    return summary
