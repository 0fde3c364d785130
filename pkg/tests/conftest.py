import os
import sys

import numpy as np
import pytest

# Add repository root to path for imports (as run.py does)
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rapidmotor.config import preset_config, with_overrides


TINY = {
    "env.max_steps": "120",
    "terrain.length": "12",
    "ppo.iterations": "2",
    "ppo.num_envs": "2",
    "ppo.steps_per_env": "64",
    "ppo.policy_hidden": "16",
    "ppo.encoder_hidden": "16",
    "ppo.critic_hidden": "16",
    "ppo.checkpoint_every": "1",
    "rma.iterations": "2",
    "rma.num_envs": "2",
    "rma.steps_per_env": "48",
    "rma.validate_every": "1",
    "rma.validation_envs": "1",
    "rma.validation_steps": "32",
    "rma.checkpoint_every": "1",
    "deploy.max_steps": "60",
    "eval.episodes": "3",
    "eval.awr_rounds": "2",
    "eval.awr_candidates": "3",
    "eval.awr_rollout_steps": "15",
    "eval.latent_draws": "16",
    "eval.sweep_episodes": "2",
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full training oracles")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training/timing oracle (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def finite_difference(loss_fn, array, index, h=1e-5):
    """Central difference of loss_fn() w.r.t. array[index], restoring the entry afterwards."""
    original = array[index]
    array[index] = original + h
    plus = loss_fn()
    array[index] = original - h
    minus = loss_fn()
    array[index] = original
    return (plus - minus) / (2.0 * h)


def assert_gradients_match(params, loss_fn, analytic, rng, samples=100, rtol=1e-4, atol=1e-8):
    """Compare stored analytic grads to central differences on random coordinates."""
    names = params.names()
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        data = params[name].data
        index = tuple(int(rng.integers(s)) for s in data.shape)
        numeric = finite_difference(loss_fn, data, index)
        exact = analytic[name][index]
        assert abs(exact - numeric) <= rtol * max(abs(exact), abs(numeric)) + atol, (name, index, exact, numeric)


@pytest.fixture
def tiny_config():
    return with_overrides(preset_config("desk"), TINY)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Two-iteration phase 1 and phase 2 shared by the slower integration tests."""
    from rapidmotor.rma_train import train_phase1, train_phase2

    config = with_overrides(preset_config("desk"), TINY)
    out = tmp_path_factory.mktemp("trained")
    phase1 = train_phase1(config, 3, str(out / "phase1"), threads=1)
    phase2 = train_phase2(phase1, config, 3, str(out / "phase2"), threads=1)
    return {"config": config, "phase1": phase1, "phase2": phase2, "dir": out}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
