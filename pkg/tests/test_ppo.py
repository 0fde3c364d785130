import numpy as np
import pytest

from conftest import assert_gradients_match, finite_difference
from rapidmotor import ndcore as nd
from rapidmotor import ppo
from rapidmotor.networks import AgentDims, LATENT, NONE, PolicyNetworks
from rapidmotor.ppo import PpoConfig, RolloutBatch


def _gae_batch(rewards, values, bootstrap, dones):
    n = len(rewards)
    return RolloutBatch(obs=np.zeros((n, 1)), prev_actions=np.zeros((n, 1)), factors=np.zeros((n, 1)),
                        actions=np.zeros((n, 1)), log_probs=np.zeros(n), values=np.asarray(values, float),
                        rewards=np.asarray(rewards, float), dones=np.asarray(dones, bool),
                        bootstrap_values=np.asarray(bootstrap, float))


def _nets(seed=0, conditioning=NONE):
    dims = AgentDims.hopper(policy_hidden=(8,), critic_hidden=(8,), encoder_hidden=(8,))
    return PolicyNetworks(dims, conditioning, rng=np.random.default_rng(seed))


def _policy_batch(nets, rng, n=32, log_prob_shift=0.0):
    obs = rng.standard_normal((n, nets.dims.obs_dim))
    prev = rng.standard_normal((n, nets.dims.action_dim))
    factors = rng.uniform(-1.0, 1.0, (n, nets.dims.factor_dim))
    actions = rng.standard_normal((n, nets.dims.action_dim))
    with nd.no_grad():
        cond = nets.condition(factors)
        mean = nets.policy_mean(obs, prev, cond)
        log_probs = nd.gaussian_log_prob(mean, nets.params["log_std"], actions).data + log_prob_shift
        values = nets.value(obs, prev, cond).data.copy()
    return RolloutBatch(obs=obs, prev_actions=prev, factors=factors, actions=actions, log_probs=log_probs,
                        values=values, rewards=rng.standard_normal(n), dones=np.arange(n) % 8 == 7,
                        bootstrap_values=rng.standard_normal(n))


# ------------------------------------------------------------------------------
# GAE
# ------------------------------------------------------------------------------

def test_gae_single_step():
    batch = _gae_batch([2.0], [1.0], [0.5], [True])
    advantages, targets = ppo.compute_gae(batch, 0.998, 0.95, normalize=False)
    assert advantages[0] == pytest.approx(2.0 + 0.998 * 0.5 - 1.0)
    assert targets[0] == pytest.approx(2.0 + 0.998 * 0.5)
    assert batch.advantages is advantages


def test_gae_lambda_zero_is_td_error(rng):
    rewards, values, bootstrap = rng.standard_normal((3, 6))
    batch = _gae_batch(rewards, values, bootstrap, [False] * 5 + [True])
    advantages, _ = ppo.compute_gae(batch, 0.9, 0.0, normalize=False)
    np.testing.assert_allclose(advantages, rewards + 0.9 * bootstrap - values)


def test_gae_matches_brute_force_with_episode_boundary(rng):
    gamma, lam = 0.99, 0.9
    rewards, values, bootstrap = rng.standard_normal((3, 5))
    dones = [False, False, True, False, True]
    batch = _gae_batch(rewards, values, bootstrap, dones)
    advantages, _ = ppo.compute_gae(batch, gamma, lam, normalize=False)

    deltas = rewards + gamma * bootstrap - values
    expected = []
    for t in range(5):
        total, power = 0.0, 1.0
        for s in range(t, 5):
            total += power * deltas[s]
            power *= gamma * lam
            if dones[s]:
                break
        expected.append(total)
    np.testing.assert_allclose(advantages, expected, rtol=1e-12)


def test_gae_undiscounted_targets_are_monte_carlo_returns(rng):
    rewards = rng.standard_normal(6)
    values = rng.standard_normal(6)
    bootstrap = np.append(values[1:], 0.0)
    batch = _gae_batch(rewards, values, bootstrap, [False] * 5 + [True])
    _, targets = ppo.compute_gae(batch, 1.0, 1.0, normalize=False)
    returns = np.cumsum(rewards[::-1])[::-1]
    np.testing.assert_allclose(targets, returns, rtol=1e-10, atol=1e-12)


def test_gae_normalization(rng):
    batch = _gae_batch(*rng.standard_normal((3, 40)), np.arange(40) % 10 == 9)
    advantages, targets = ppo.compute_gae(batch)
    assert advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert advantages.std() == pytest.approx(1.0, rel=1e-6)
    # targets come from the unnormalized advantages
    raw, _ = ppo.compute_gae(_gae_batch(batch.rewards, batch.values, batch.bootstrap_values, batch.dones),
                             normalize=False)
    np.testing.assert_allclose(targets, raw + batch.values)


# ------------------------------------------------------------------------------
# Loss
# ------------------------------------------------------------------------------

def test_value_band():
    old = np.array([5.0, -5.0, 0.1, 20.0, 0.0, -0.3])
    low, high = ppo.value_band(old, PpoConfig())
    np.testing.assert_array_equal(low, np.minimum(0.8 * old, 1.2 * old))
    np.testing.assert_array_equal(high, np.maximum(0.8 * old, 1.2 * old))
    np.testing.assert_allclose(low, [4.0, -6.0, 0.08, 16.0, 0.0, -0.36])
    np.testing.assert_allclose(high, [6.0, -4.0, 0.12, 24.0, 0.0, -0.24])


def test_value_band_with_opt_in_floor():
    low, high = ppo.value_band(np.array([5.0, -5.0, 0.1, 20.0]), PpoConfig(value_clip_floor=1.0))
    np.testing.assert_allclose(low, [4.0, -6.0, -0.9, 16.0])
    np.testing.assert_allclose(high, [6.0, -4.0, 1.1, 24.0])


def test_unchanged_policy_has_unit_ratio(rng):
    nets = _nets()
    batch = _policy_batch(nets, rng)
    ppo.compute_gae(batch)
    _, stats = ppo.ppo_loss(nets, batch, PpoConfig())
    assert stats["clip_fraction"] == 0.0
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-12)
    assert stats["policy_loss"] == pytest.approx(-batch.advantages.mean(), abs=1e-12)


def test_ratio_above_band_is_clipped(rng):
    nets = _nets()
    batch = _policy_batch(nets, rng, log_prob_shift=-1.0)
    batch.advantages = np.ones(len(batch))
    batch.targets = batch.values.copy()
    nets.params.zero_grad()
    loss, stats = ppo.ppo_loss(nets, batch, PpoConfig())
    nd.backward(loss)

    assert stats["clip_fraction"] == 1.0
    assert stats["policy_loss"] == pytest.approx(-1.2)
    # the clipped branch carries no policy gradient; log_std only feeds the policy term
    assert np.array_equal(nets.params["log_std"].grad, np.zeros(2))


def test_loss_gradients_match_finite_differences(rng):
    nets = _nets(seed=3)
    batch = _policy_batch(nets, rng, n=16)
    ppo.compute_gae(batch)
    config = PpoConfig()

    def loss_fn():
        with nd.no_grad():
            return ppo.ppo_loss(nets, batch, config)[0].item()

    nets.params.zero_grad()
    loss, _ = ppo.ppo_loss(nets, batch, config)
    nd.backward(loss)
    analytic = {name: t.grad.copy() for name, t in nets.params.items()}
    assert_gradients_match(nets.params, loss_fn, analytic, rng, samples=60)


def test_latent_loss_gradients_reach_encoder_and_critic(rng):
    nets = _nets(seed=5, conditioning=LATENT)
    batch = _policy_batch(nets, rng, n=16)
    ppo.compute_gae(batch)
    config = PpoConfig()

    def loss_fn():
        with nd.no_grad():
            return ppo.ppo_loss(nets, batch, config)[0].item()

    nets.params.zero_grad()
    loss, _ = ppo.ppo_loss(nets, batch, config)
    nd.backward(loss)

    prefixes = {name.split("/")[0] for name in nets.params.names()}
    assert prefixes == {"policy", "encoder", "critic", "log_std"}
    for name, tensor in nets.params.items():
        assert np.any(tensor.grad != 0.0), name
        for _ in range(4):
            index = tuple(int(rng.integers(s)) for s in tensor.shape)
            exact = tensor.grad[index]
            numeric = finite_difference(loss_fn, tensor.data, index)
            assert exact == pytest.approx(numeric, rel=1e-4, abs=1e-8), (name, index)


# ------------------------------------------------------------------------------
# Update
# ------------------------------------------------------------------------------

def test_update_runs_epochs_times_minibatches(rng):
    nets = _nets()
    batch = _policy_batch(nets, rng)
    before = nets.params.fingerprint()
    optimizer = nd.Adam(nets.params, lr=5e-4)
    summary = ppo.ppo_update(nets, optimizer, batch, PpoConfig(), rng)

    assert summary["optimizer_steps"] == 16
    assert set(summary) >= {"policy_loss", "value_loss", "total_loss", "clip_fraction", "approx_kl"}
    assert nets.params.fingerprint() != before


def test_diverged_update_restores_parameters(rng):
    nets = _nets()
    batch = _policy_batch(nets, rng)
    batch.rewards[3] = np.nan
    before = nets.params.fingerprint()
    optimizer = nd.Adam(nets.params)

    with pytest.raises(ppo.TrainingDiverged) as err:
        ppo.ppo_update(nets, optimizer, batch, PpoConfig(), rng)
    assert nets.params.fingerprint() == before
    assert err.value.diagnostics["steps_done"] == 0


def test_batch_take_and_concatenate(rng):
    nets = _nets()
    a = _policy_batch(nets, rng, n=4)
    b = _policy_batch(nets, rng, n=6)
    joined = RolloutBatch.from_segments([a, b])
    assert len(joined) == 10
    np.testing.assert_array_equal(joined.take(np.array([4, 5])).obs, b.obs[:2])
