import math

import numpy as np
import pytest
from scipy import stats

from conftest import assert_gradients_match
from rapidmotor import ndcore as nd
from rapidmotor.ndcore import Conv1dSpec, MlpSpec, ADAPTATION_CONV_LAYERS, ParamTree


def _mlp(spec, seed=0, gain=1.0):
    params = ParamTree()
    nd.init_mlp(spec, params, np.random.default_rng(seed), "net", output_gain=gain)
    return params


def _grads_of(params, loss):
    params.zero_grad()
    nd.backward(loss)
    return {name: t.grad.copy() for name, t in params.items()}


# ------------------------------------------------------------------------------
# Forward passes
# ------------------------------------------------------------------------------

def test_mlp_zero_weights_give_zero_output():
    spec = MlpSpec(3, (4, 4), 2)
    params = _mlp(spec)
    for _, tensor in params.items():
        tensor.data[...] = 0.0
    out = nd.mlp_forward(spec, params, np.random.default_rng(1).standard_normal((5, 3)), "net")
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_mlp_matches_hand_unrolled_matrices(rng):
    spec = MlpSpec(2, (3,), 1, "tanh")
    params = _mlp(spec, seed=4)
    for _, tensor in params.items():
        tensor.data[...] = rng.standard_normal(tensor.shape)
    x = rng.standard_normal((5, 2))

    w0, b0 = params["net/layer0/weight"].data, params["net/layer0/bias"].data
    w1, b1 = params["net/layer1/weight"].data, params["net/layer1/bias"].data
    expected = np.tanh(x @ w0 + b0) @ w1 + b1

    out = nd.mlp_forward(spec, params, x, "net")
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_mlp_forward_is_pure():
    spec = MlpSpec(3, (8,), 2)
    params = _mlp(spec)
    before = params.fingerprint()
    nd.mlp_forward(spec, params, np.ones((2, 3)), "net")
    assert params.fingerprint() == before


def test_mlp_shape_mismatch_names_layer():
    spec = MlpSpec(3, (8,), 2)
    params = _mlp(spec)
    with pytest.raises(nd.DimensionError) as err:
        nd.mlp_forward(spec, params, np.ones((2, 4)), "net")
    assert err.value.layer == 0


def test_mlp_spec_needs_hidden_layers():
    with pytest.raises(ValueError):
        MlpSpec(3, (), 2)


def test_adaptation_conv_temporal_chain():
    spec = Conv1dSpec(ADAPTATION_CONV_LAYERS, 8)
    assert spec.temporal_lengths(50) == [11, 7, 3]
    assert spec.flattened_width(50) == 96
    assert spec.min_input_length() == 40

    params = ParamTree()
    nd.init_conv1d(spec, params, np.random.default_rng(0), "cnn", 50)
    out = nd.conv1d_forward(spec, params, np.random.default_rng(1).standard_normal((3, 32, 50)), "cnn")
    assert out.shape == (3, 8)


def test_conv_underflow_reports_layer_and_minimum():
    spec = Conv1dSpec(ADAPTATION_CONV_LAYERS, 8)
    params = ParamTree()
    nd.init_conv1d(spec, params, np.random.default_rng(0), "cnn", 50)
    with pytest.raises(nd.DimensionError) as err:
        nd.conv1d_forward(spec, params, np.zeros((1, 32, 12)), "cnn")
    assert err.value.layer == 2
    assert err.value.required == 40

    with pytest.raises(nd.DimensionError) as err:
        nd.conv1d_forward(spec, params, np.zeros((1, 32, 30)), "cnn")
    assert err.value.layer == 3


def test_identity_convolution_projects_input():
    spec = Conv1dSpec(((2, 2, 1, 1),), 6)
    params = ParamTree()
    nd.init_conv1d(spec, params, np.random.default_rng(0), "cnn", 3)
    params["cnn/conv0/weight"].data[...] = np.eye(2)
    params["cnn/projection/weight"].data[...] = np.eye(6)
    x = np.abs(np.random.default_rng(2).standard_normal((1, 2, 3)))
    out = nd.conv1d_forward(spec, params, x, "cnn")
    # channel-major flatten of a relu'd identity map
    np.testing.assert_allclose(out.data[0], x[0].reshape(-1))


def test_conv_channel_chain_checked():
    with pytest.raises(ValueError):
        Conv1dSpec(((32, 16, 3, 1), (32, 32, 3, 1)), 4)


# ------------------------------------------------------------------------------
# Reverse mode
# ------------------------------------------------------------------------------

def test_linear_gradient_is_input():
    x = np.array([1.5, -2.0, 0.25])
    w = nd.Tensor(np.zeros(3), requires_grad=True)
    nd.backward(nd.sum(w * x))
    assert np.array_equal(w.grad, x)


def test_constant_loss_leaves_zero_grads():
    w = nd.Tensor(np.ones(4), requires_grad=True)
    nd.backward(nd.sum(w * 0.0))
    assert np.array_equal(w.grad, np.zeros(4))


def test_backward_rejects_non_scalar():
    w = nd.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nd.GraphError):
        nd.backward(w * 2.0)


def test_backward_frees_graph():
    w = nd.Tensor(np.ones(3), requires_grad=True)
    loss = nd.sum(nd.square(w))
    nd.backward(loss)
    assert loss._parents == ()
    assert loss._backward is None


def test_grads_accumulate_until_zeroed():
    w = nd.Tensor(np.array([2.0]), requires_grad=True)
    nd.backward(nd.sum(nd.square(w)))
    nd.backward(nd.sum(nd.square(w)))
    assert w.grad[0] == pytest.approx(8.0)


def test_no_grad_records_nothing():
    w = nd.Tensor(np.ones(2), requires_grad=True)
    with nd.no_grad():
        out = nd.sum(w * 3.0)
    assert not out.requires_grad
    assert nd.grad_enabled()


def test_non_finite_result_raises():
    with pytest.raises(nd.NonFiniteError):
        nd.log(nd.Tensor(np.array([-1.0])))


def test_mlp_gradients_match_finite_differences(rng):
    spec = MlpSpec(13, (32, 32), 2, "tanh")
    params = _mlp(spec, seed=5)
    x = rng.standard_normal((6, 13))
    weights = rng.standard_normal((6, 2))

    def loss_fn():
        with nd.no_grad():
            return nd.sum(nd.mlp_forward(spec, params, x, "net") * weights).item()

    analytic = _grads_of(params, nd.sum(nd.mlp_forward(spec, params, x, "net") * weights))
    assert_gradients_match(params, loss_fn, analytic, rng)


def test_adaptation_conv_gradients_match_finite_differences(rng):
    # tanh keeps the check away from relu kinks; the conv arithmetic is the same
    spec = Conv1dSpec(ADAPTATION_CONV_LAYERS, 8, activation="tanh")
    params = ParamTree()
    nd.init_conv1d(spec, params, np.random.default_rng(6), "cnn", 50)
    x = rng.standard_normal((2, 32, 50))
    weights = rng.standard_normal((2, 8))

    def loss_fn():
        with nd.no_grad():
            return nd.sum(nd.conv1d_forward(spec, params, x, "cnn") * weights).item()

    analytic = _grads_of(params, nd.sum(nd.conv1d_forward(spec, params, x, "cnn") * weights))
    assert_gradients_match(params, loss_fn, analytic, rng)


def test_windows_gradient_counts_overlaps():
    a = nd.Tensor(np.arange(10.0).reshape(1, 1, 10), requires_grad=True)
    nd.backward(nd.sum(nd.windows(a, kernel=4, stride=2)))
    # positions covered by windows starting at 0, 2, 4, 6
    assert a.grad[0, 0].tolist() == [1, 1, 2, 2, 2, 2, 2, 2, 1, 1]


# ------------------------------------------------------------------------------
# Parameters and Adam
# ------------------------------------------------------------------------------

def test_param_tree_order_and_snapshot():
    params = ParamTree()
    params.add("b", np.zeros(2))
    params.add("a", np.ones(3))
    assert params.names() == ["b", "a"]
    assert params.count() == 5

    saved = params.snapshot()
    params["a"].data += 1.0
    params.restore(saved)
    assert np.array_equal(params["a"].data, np.ones(3))

    with pytest.raises(nd.DimensionError):
        params["missing"]


def test_adam_first_step_moves_by_lr():
    params = ParamTree()
    w = params.add("w", np.array([1.0]))
    optimizer = nd.Adam(params, lr=5e-4)
    w.grad[...] = 3.0
    nd.adam_step(optimizer)
    assert 1.0 - w.data[0] == pytest.approx(5e-4, rel=1e-6)


def test_adam_zero_gradient_is_identity():
    params = ParamTree()
    w = params.add("w", np.array([0.3, -0.7]))
    optimizer = nd.Adam(params)
    nd.adam_step(optimizer)
    assert np.array_equal(w.data, [0.3, -0.7])


def test_adam_sign_flip_shrinks_step():
    params = ParamTree()
    w = params.add("w", np.array([0.0]))
    optimizer = nd.Adam(params, lr=5e-4)
    w.grad[...] = 2.0
    optimizer.step()
    after_first = w.data[0]
    w.grad[...] = -2.0
    optimizer.step()
    _, v = optimizer.moments["w"]
    assert v[0] > 0.0
    assert 0.0 < abs(w.data[0] - after_first) < 5e-4


def test_adam_step_on_param_tree_keeps_state():
    params = ParamTree()
    w = params.add("w", np.array([1.0]))
    w.grad[...] = 3.0
    nd.adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    assert 1.0 - w.data[0] == pytest.approx(1e-3, rel=1e-6)
    assert params.adam.step_count == 1

    w.grad[...] = 0.0
    before = w.data[0]
    nd.adam_step(params, lr=1e-3)
    assert params.adam.step_count == 2
    # momentum from the first step still moves the parameter
    assert w.data[0] < before


def test_adam_step_on_param_tree_with_zero_gradient():
    params = ParamTree()
    w = params.add("w", np.array([0.3, -0.7]))
    nd.adam_step(params, 5e-4, 0.9, 0.999, 1e-8)
    assert np.array_equal(w.data, [0.3, -0.7])


def test_adam_state_round_trip_resumes_identically():
    def build():
        params = ParamTree()
        params.add("w", np.array([1.0, 2.0]))
        return params, nd.Adam(params)

    p1, o1 = build()
    for g in (0.5, -0.2, 0.9):
        p1["w"].grad[...] = g
        o1.step()
    p2, o2 = build()
    p2.restore(p1.snapshot())
    o2.load_state_arrays(o1.state_arrays())
    for params, optimizer in ((p1, o1), (p2, o2)):
        params["w"].grad[...] = 0.3
        optimizer.step()
    assert np.array_equal(p1["w"].data, p2["w"].data)


# ------------------------------------------------------------------------------
# Gaussian head
# ------------------------------------------------------------------------------

def test_std_is_floored():
    log_std = nd.Tensor(np.log([0.05, 0.5]))
    assert np.allclose(nd.effective_std(log_std).data, [0.2, 0.5])


def test_deterministic_head_returns_mean():
    mean = nd.Tensor(np.array([[0.1, -0.4]]))
    sample, _ = nd.gaussian_head(mean, nd.Tensor(np.zeros(2)), deterministic=True)
    assert np.array_equal(sample, mean.data)


def test_log_prob_of_mean_closed_form():
    log_prob = nd.gaussian_log_prob(nd.Tensor(np.zeros((1, 1))), nd.Tensor(np.log([0.2])), np.zeros((1, 1)))
    assert log_prob.data[0] == pytest.approx(-math.log(0.2) - 0.5 * math.log(2.0 * math.pi))
    assert log_prob.data[0] == pytest.approx(0.69049, abs=1e-5)


def test_log_prob_matches_scipy(rng):
    mean = rng.standard_normal((4, 3))
    log_std = np.log([0.1, 0.6, 1.3])
    sample, log_prob = nd.gaussian_head(nd.Tensor(mean), nd.Tensor(log_std), rng)
    std = np.maximum(np.exp(log_std), nd.MIN_STD)
    expected = stats.norm.logpdf(sample, loc=mean, scale=std).sum(axis=1)
    np.testing.assert_allclose(log_prob.data, expected, rtol=1e-10)


def test_sampling_std_uses_floor():
    rng = np.random.default_rng(9)
    mean = nd.Tensor(np.zeros((20000, 1)))
    sample, _ = nd.gaussian_head(mean, nd.Tensor(np.log([0.05])), rng)
    assert sample.std() == pytest.approx(0.2, rel=0.03)
