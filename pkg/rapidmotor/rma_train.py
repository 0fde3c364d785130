"""
Two-phase training: PPO on privileged factors, then on-policy regression of the adaptation module.
"""

import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import checkpoint as ckpt
from . import ndcore as nd
from .config import worker_count
from .hopper_env import sample_env_factors
from .networks import CONDITIONINGS, FACTORS, LATENT, NONE, AdaptationModule, AgentDims, PolicyNetworks
from .ppo import PpoConfig, RolloutBatch, TrainingDiverged, compute_gae, ppo_update
from .reward import CurriculumState, RewardTerms, advance_curriculum, difficulty_schedule
from .rollout import (AdaptiveController, collect_segment, make_env, normalized_factors, rollout_episode,
                      run_workers)


logger = logging.getLogger(__name__)

BASELINE_KINDS = ("rma", "rma_no_adapt", "robust", "sysid", "awr", "expert")
PHASE1_CSV = "iterations.csv"
TERMS_CSV = "reward_terms.csv"
PHASE2_CSV = "phase2.csv"


# ------------------------------------------------------------------------------
# Checkpoint bundles
# ------------------------------------------------------------------------------

@dataclass
class PolicyBundle:
    """Everything needed to act: policy networks plus the kind-specific conditioning source."""

    kind: str
    nets: PolicyNetworks
    module: AdaptationModule = None
    frozen_latent: np.ndarray = None
    latent_std: np.ndarray = None
    meta: dict = None


def policy_arrays(nets):
    return {name: t.data.copy() for name, t in nets.params.items()}


def policy_meta(nets, kind, seed):
    meta = nets.dims.to_meta()
    meta.update({"conditioning": nets.conditioning, "kind": kind, "seed": seed})
    return meta


def save_phase1(path, nets, optimizer, curriculum, next_iteration, kind, seed):
    arrays = policy_arrays(nets)
    arrays.update(optimizer.state_arrays())
    arrays["curriculum/k"] = np.array([curriculum.k])
    arrays["curriculum/iteration"] = np.array([float(curriculum.iteration)])
    arrays["train/next_iteration"] = np.array([float(next_iteration)])
    return ckpt.save(path, arrays, "phase1", policy_meta(nets, kind, seed))


def networks_from_checkpoint(checkpoint):
    meta = checkpoint.meta
    for key in ("conditioning", "obs_dim", "policy_hidden"):
        if key not in meta:
            raise ckpt.CheckpointError(f"checkpoint '{checkpoint.tag}' has no '{key}' metadata")
    dims = AgentDims.from_meta(meta)
    shell = PolicyNetworks(dims, meta["conditioning"], rng=np.random.default_rng(0))
    missing = [name for name in shell.params.names() if name not in checkpoint.arrays]
    if missing:
        raise ckpt.CheckpointError(f"checkpoint '{checkpoint.tag}' is missing {missing[0]}")
    shell.params.restore({name: checkpoint.arrays[name] for name in shell.params.names()})
    return shell


def module_from_checkpoint(checkpoint, dims):
    output_dim = int(checkpoint.meta.get("adaptation_output", dims.latent_dim))
    module = AdaptationModule(dims, output_dim, rng=np.random.default_rng(0))
    names = module.params.names()
    checkpoint.require(*names)
    module.params.restore({name: checkpoint.arrays[name] for name in names})
    return module


def load_bundle(path, kind=None):
    checkpoint = ckpt.load(path)
    nets = networks_from_checkpoint(checkpoint)
    stored_kind = checkpoint.meta.get("kind", "rma")
    kind = kind or stored_kind
    bundle = PolicyBundle(kind=kind, nets=nets, meta=checkpoint.meta)
    if "adaptation/cnn/projection/weight" in checkpoint.arrays:
        bundle.module = module_from_checkpoint(checkpoint, nets.dims)
    if "latent/mean" in checkpoint.arrays:
        bundle.frozen_latent = checkpoint.arrays["latent/mean"]
        bundle.latent_std = checkpoint.arrays["latent/std"]
    return bundle


# ------------------------------------------------------------------------------
# CSV logs
# ------------------------------------------------------------------------------

def append_rows(path, rows, start_iteration=None):
    """Append rows to a CSV; on resume, rows at or beyond start_iteration are dropped first."""
    frame = pd.DataFrame(rows)
    if os.path.exists(path):
        existing = pd.read_csv(path)
        if start_iteration is not None:
            existing = existing[existing["iteration"] < start_iteration]
        frame = pd.concat([existing, frame], ignore_index=True)
    frame.to_csv(path, index=False, float_format="%.10g")


# ------------------------------------------------------------------------------
# Phase 1
# ------------------------------------------------------------------------------

def new_policy(config, seed, conditioning=LATENT):
    dims = config.agent_dims()
    return PolicyNetworks(dims, conditioning, rng=np.random.default_rng([seed, 1]),
                          init_log_std=config.ppo.init_log_std)


def new_optimizer(params, section):
    return nd.Adam(params, lr=section.lr, beta1=getattr(section, "beta1", 0.9),
                   beta2=getattr(section, "beta2", 0.999), eps=getattr(section, "eps", 1e-8))


def phase1_iteration(nets, optimizer, config, seed, iteration, curriculum, threads=1):
    """One collect + update cycle; returns (log row, term row)."""
    ppo_cfg = PpoConfig.from_section(config.ppo)
    scale = difficulty_schedule(iteration, config.ppo.ramp_iters)
    steps = config.ppo.steps_per_env

    def job(env_index):
        rng = np.random.default_rng([seed, iteration, env_index])
        return collect_segment(nets, config, curriculum, scale, rng, steps)

    segments = run_workers(config.ppo.num_envs, job, threads)
    batch = RolloutBatch.from_segments(segments)
    compute_gae(batch, ppo_cfg.gamma, ppo_cfg.lam, ppo_cfg.normalize_advantages)
    stats = ppo_update(nets, optimizer, batch, ppo_cfg, np.random.default_rng([seed, iteration, 104729]))

    raw = np.concatenate([s.raw_terms for s in segments])
    scaled = np.concatenate([s.scaled_terms for s in segments])
    task = scaled[:, :2].sum(axis=1)
    penalty = scaled[:, 2:].sum(axis=1)
    row = {
        "iteration": iteration,
        "k": curriculum.k,
        "difficulty": scale,
        "transitions": len(batch),
        "episodes": sum(s.episodes for s in segments),
        "falls": sum(s.falls for s in segments),
        "mean_reward": float(batch.rewards.mean()),
        "task_reward": float(task.mean()),
        "penalty": float(penalty.mean()),
        "forward_velocity": float(np.mean([s.forward_velocity for s in segments])),
    }
    row.update(stats)
    terms_row = {"iteration": iteration}
    for i, name in enumerate(RewardTerms.names()):
        terms_row[f"raw_{name}"] = float(raw[:, i].mean())
        terms_row[f"scaled_{name}"] = float(scaled[:, i].mean())
    return row, terms_row


def train_phase1(config, seed, out_dir, conditioning=LATENT, kind="rma", resume=None, threads=None):
    """Train pi, mu and the critic with PPO; returns the final checkpoint path."""
    if conditioning not in CONDITIONINGS:
        raise ValueError(f"unknown conditioning {conditioning!r}")
    threads = threads or worker_count(config.ppo.num_envs)
    os.makedirs(out_dir, exist_ok=True)

    if resume:
        state = ckpt.load(resume)
        if state.tag != "phase1":
            raise ckpt.CheckpointError(f"{resume} is a '{state.tag}' checkpoint, expected phase1")
        nets = networks_from_checkpoint(state)
        optimizer = new_optimizer(nets.params, config.ppo)
        optimizer.load_state_arrays(state.arrays)
        curriculum = CurriculumState(k=float(state.arrays["curriculum/k"][0]),
                                     iteration=int(state.arrays["curriculum/iteration"][0]))
        start = int(state.arrays["train/next_iteration"][0])
        kind = state.meta.get("kind", kind)
        stored_seed = state.meta.get("seed")
        if stored_seed is not None:
            if seed is not None and int(seed) != int(stored_seed):
                raise ckpt.CheckpointError(f"{resume} was trained with seed {stored_seed}, not {seed}")
            seed = int(stored_seed)
        logger.info(f"[PHASE1] Resuming from {resume} at iteration {start}")
    else:
        nets = new_policy(config, seed, conditioning)
        optimizer = new_optimizer(nets.params, config.ppo)
        curriculum = CurriculumState(k=config.reward.k0)
        start = 0

    total = config.ppo.iterations
    final_path = os.path.join(out_dir, "phase1.ckpt")
    logger.info(f"[PHASE1] {kind}: {total} iterations x {config.ppo.batch_size} transitions, "
                f"{nets.params.count()} parameters, {threads} worker(s)")

    for iteration in range(start, total):
        started = time.perf_counter()
        try:
            row, terms_row = phase1_iteration(nets, optimizer, config, seed, iteration, curriculum, threads)
        except TrainingDiverged:
            logger.error(f"[PHASE1] Diverged at iteration {iteration}; last good checkpoint kept")
            raise
        append_rows(os.path.join(out_dir, PHASE1_CSV), [row], start if iteration == start else None)
        append_rows(os.path.join(out_dir, TERMS_CSV), [terms_row], start if iteration == start else None)
        curriculum = advance_curriculum(curriculum, config.reward.exponent)
        logger.info(f"[PHASE1] iter {iteration:4d}  reward {row['mean_reward']:8.4f}  "
                    f"vx {row['forward_velocity']:6.3f}  falls {row['falls']:3d}  k {row['k']:.4f}  "
                    f"({time.perf_counter() - started:.1f}s)")

        done = iteration + 1
        if done % config.ppo.checkpoint_every == 0 or done == total:
            save_phase1(os.path.join(out_dir, f"phase1_iter{done:05d}.ckpt"), nets, optimizer, curriculum,
                        done, kind, seed)
    save_phase1(final_path, nets, optimizer, curriculum, total, kind, seed)
    return final_path


# ------------------------------------------------------------------------------
# Phase 2
# ------------------------------------------------------------------------------

@dataclass
class WindowSet:
    windows: np.ndarray
    targets: np.ndarray
    factors: np.ndarray
    episodes: int
    falls: int
    ground_truth_steps: int


def regression_targets(nets, factors):
    """z = mu(e) for latent policies, the normalized factors themselves for sysid."""
    if nets.conditioning == LATENT:
        with nd.no_grad():
            return nets.encode(factors).data
    return np.asarray(factors, dtype=np.float64).copy()


def collect_windows(nets, module, config, rng, steps, curriculum):
    """On-policy (history window, e_t) pairs; the policy is conditioned only on phi's estimates."""
    env = make_env(config, rng, "train", 1.0)
    controller = AdaptiveController(module)
    windows, factors = [], []
    episodes = falls = ground_truth = 0

    def observer(record):
        windows.append(record.window)
        factors.append(normalized_factors(record.factors))

    while len(windows) < steps:
        summary = rollout_episode(env, nets, controller, config.terrain, curriculum, config.rma.history,
                                  observer=observer, max_steps=steps - len(windows), keep_windows=True,
                                  forward_cap=config.reward.forward_cap)
        episodes += 1
        falls += summary.fell
        ground_truth += summary.ground_truth_steps

    factors = np.array(factors)
    return WindowSet(np.array(windows), regression_targets(nets, factors), factors, episodes, falls, ground_truth)


def merge_windows(sets):
    return WindowSet(np.concatenate([s.windows for s in sets]), np.concatenate([s.targets for s in sets]),
                     np.concatenate([s.factors for s in sets]), sum(s.episodes for s in sets),
                     sum(s.falls for s in sets), sum(s.ground_truth_steps for s in sets))


def mse_loss(module, windows, targets):
    return nd.mean(nd.square(module.forward(windows) - targets))


def evaluate_mse(module, data):
    with nd.no_grad():
        return mse_loss(module, data.windows, data.targets).item()


def target_variance(targets):
    return float(np.mean(np.var(targets, axis=0)))


def regression_steps(module, optimizer, data, minibatches, rng):
    order = rng.permutation(len(data.targets))
    losses = []
    for chunk in np.array_split(order, minibatches):
        module.params.zero_grad()
        loss = mse_loss(module, data.windows[chunk], data.targets[chunk])
        if not np.isfinite(loss.item()):
            raise nd.NonFiniteError("non-finite adaptation loss")
        nd.backward(loss)
        optimizer.step()
        losses.append(loss.item())
    return losses


def save_phase2(path, nets, module, kind, seed, extra_meta=None):
    arrays = policy_arrays(nets)
    arrays.update({name: t.data.copy() for name, t in module.params.items()})
    meta = policy_meta(nets, kind, seed)
    meta["adaptation_output"] = module.output_dim
    meta.update(extra_meta or {})
    return ckpt.save(path, arrays, "phase2", meta)


def train_phase2(phase1_path, config, seed, out_dir, threads=None):
    """Fit phi to mu(e) (or to e for sysid) on its own rollouts; returns the checkpoint path."""
    state = ckpt.load(phase1_path)
    nets = networks_from_checkpoint(state)
    if nets.conditioning == NONE:
        raise ValueError("an unconditioned policy has nothing to adapt")
    kind = state.meta.get("kind", "rma")
    threads = threads or worker_count(config.rma.num_envs)
    os.makedirs(out_dir, exist_ok=True)

    output_dim = nets.dims.latent_dim if nets.conditioning == LATENT else nets.dims.factor_dim
    module = AdaptationModule(nets.dims, output_dim, rng=np.random.default_rng([seed, 2]))
    optimizer = new_optimizer(module.params, config.rma)
    frozen = nets.params.fingerprint()
    curriculum = CurriculumState(k=1.0)
    rma = config.rma

    best, best_iteration = np.inf, 0
    ground_truth_total = 0
    val_mse = ratio = np.nan
    logger.info(f"[PHASE2] {kind}: up to {rma.iterations} iterations x {rma.num_envs * rma.steps_per_env} windows")

    for iteration in range(rma.iterations):
        started = time.perf_counter()
        sets = run_workers(rma.num_envs, lambda i: collect_windows(
            nets, module, config, np.random.default_rng([seed, 2, iteration, i]), rma.steps_per_env, curriculum),
            threads)
        data = merge_windows(sets)
        ground_truth_total += data.ground_truth_steps

        snapshot = module.params.snapshot()
        try:
            losses = regression_steps(module, optimizer, data, rma.minibatches,
                                      np.random.default_rng([seed, 2, iteration, 104729]))
        except FloatingPointError as e:
            module.params.restore(snapshot)
            logger.error(f"[PHASE2] Diverged at iteration {iteration}: {e}")
            raise TrainingDiverged(f"adaptation regression diverged: {e}", {"iteration": iteration}) from e

        last = iteration == rma.iterations - 1
        if iteration % rma.validate_every == 0 or last:
            validation = merge_windows(run_workers(rma.validation_envs, lambda i: collect_windows(
                nets, module, config, np.random.default_rng([seed, 3, iteration, i]), rma.validation_steps,
                curriculum), threads))
            ground_truth_total += validation.ground_truth_steps
            val_mse = evaluate_mse(module, validation)
            ratio = val_mse / max(target_variance(validation.targets), 1e-12)
            if val_mse < best * (1.0 - rma.min_improvement):
                best, best_iteration = val_mse, iteration

        append_rows(os.path.join(out_dir, PHASE2_CSV), [{
            "iteration": iteration,
            "train_mse": float(np.mean(losses)),
            "val_mse": val_mse,
            "variance_ratio": ratio,
            "windows": len(data.targets),
            "episodes": data.episodes,
            "falls": data.falls,
            "ground_truth_conditioned_steps": ground_truth_total,
        }])
        logger.info(f"[PHASE2] iter {iteration:4d}  mse {np.mean(losses):.5f}  val {val_mse:.5f}  "
                    f"ratio {ratio:.3f}  ({time.perf_counter() - started:.1f}s)")

        if (iteration + 1) % rma.checkpoint_every == 0:
            save_phase2(os.path.join(out_dir, f"phase2_iter{iteration + 1:05d}.ckpt"), nets, module, kind, seed)
        if iteration - best_iteration >= rma.patience:
            logger.info(f"[PHASE2] Validation MSE flat for {rma.patience} iterations; stopping at {iteration}")
            break

    if nets.params.fingerprint() != frozen:
        raise RuntimeError("phase-1 parameters changed during adaptation training")
    if ground_truth_total:
        raise RuntimeError(f"{ground_truth_total} phase-2 steps were conditioned on ground-truth factors")
    return save_phase2(os.path.join(out_dir, "phase2.ckpt"), nets, module, kind, seed,
                       {"variance_ratio": f"{ratio:.6g}", "ground_truth_conditioned_steps": ground_truth_total})


# ------------------------------------------------------------------------------
# Baselines
# ------------------------------------------------------------------------------

def latent_statistics(nets, config, seed):
    """Mean and std of mu(e) over training-range draws."""
    rng = np.random.default_rng([seed, 5])
    draws = np.array([normalized_factors(sample_env_factors(rng, "train"))
                      for _ in range(config.eval.latent_draws)])
    latents = regression_targets(nets, draws)
    return latents.mean(axis=0), latents.std(axis=0)


def save_latent_baseline(path, nets, kind, seed, config):
    mean, std = latent_statistics(nets, config, seed)
    arrays = policy_arrays(nets)
    arrays["latent/mean"] = mean
    arrays["latent/std"] = std
    return ckpt.save(path, arrays, "baseline", policy_meta(nets, kind, seed))


def train_baseline(kind, config, seed, out_dir, phase1_checkpoint=None, threads=None):
    """Produce the checkpoint a baseline is evaluated from."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r} (choose from {', '.join(BASELINE_KINDS)})")
    os.makedirs(out_dir, exist_ok=True)

    if kind == "robust":
        return train_phase1(config, seed, out_dir, NONE, kind, threads=threads)
    if kind in ("sysid", "rma"):
        conditioning = FACTORS if kind == "sysid" else LATENT
        phase1 = train_phase1(config, seed, out_dir, conditioning, kind, threads=threads)
        return train_phase2(phase1, config, seed, out_dir, threads)

    if phase1_checkpoint is None:
        phase1_checkpoint = train_phase1(config, seed, out_dir, LATENT, "rma", threads=threads)
    nets = networks_from_checkpoint(ckpt.load(phase1_checkpoint))
    if nets.conditioning != LATENT:
        raise ValueError(f"{kind} needs a latent-conditioned phase-1 policy")
    path = save_latent_baseline(os.path.join(out_dir, f"{kind}.ckpt"), nets, kind, seed, config)
    logger.info(f"[BASELINE] {kind} checkpoint written to {path}")
    return path
