"""
Dense float64 arrays with define-by-run reverse-mode differentiation.

Everything trainable in rapidmotor (policy, encoder, critic, adaptation
module) is built from the ops in this file, stored in a ParamTree and
updated with Adam.
"""

import hashlib
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


MIN_STD = 0.2
LOG_2PI = math.log(2.0 * math.pi)

_grad_state = threading.local()


class DimensionError(ValueError):
    """Shape mismatch inside a network, naming the layer at fault."""

    def __init__(self, message, layer=None, required=None):
        super().__init__(message)
        self.layer = layer
        self.required = required


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (per thread)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """A float64 array, optionally a node of the autodiff graph.

    Leaves created with requires_grad=True own a grad slot of the same shape.
    Intermediate results keep references to their parents and a closure
    that maps the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ------------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), add_backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def sub_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), sub_backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), mul_backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def div_backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), div_backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")

    def matmul_backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), matmul_backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def tanh_backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), tanh_backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0

    def relu_backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), relu_backward)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)

    def exp_backward(g):
        return (g * y,)

    return _result(y, (a,), exp_backward)


def log(a):
    a = as_tensor(a)

    def log_backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), log_backward)


def square(a):
    a = as_tensor(a)

    def square_backward(g):
        return (2.0 * a.data * g,)

    return _result(a.data * a.data, (a,), square_backward)


def clip(a, low, high):
    """Clamp elementwise; the gradient passes only where the input is inside the band."""
    a = as_tensor(a)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    inside = (a.data >= low) & (a.data <= high)

    def clip_backward(g):
        return (g * inside,)

    return _result(np.clip(a.data, low, high), (a,), clip_backward)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def minimum_backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), minimum_backward)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def maximum_backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), maximum_backward)


def sum(a, axis=None):
    a = as_tensor(a)

    def sum_backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), sum_backward)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def reshape_backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), reshape_backward)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def transpose_backward(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), transpose_backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def concat_backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), concat_backward)


def windows(a, kernel, stride):
    """[batch, channels, time] -> [batch, channels, out_time, kernel] sliding windows."""
    a = as_tensor(a)
    length = a.shape[2]
    out_len = (length - kernel) // stride + 1
    index = stride * np.arange(out_len)[:, None] + np.arange(kernel)[None, :]

    def windows_backward(g):
        grad = np.zeros_like(a.data)
        last = stride * (out_len - 1) + 1
        for j in range(kernel):
            grad[:, :, j:j + last:stride] += g[:, :, :, j]
        return (grad,)

    return _result(a.data[:, :, index], (a,), windows_backward)


# ------------------------------------------------------------------------------
# Reverse pass
# ------------------------------------------------------------------------------

def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad slot, then free the graph."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.grad is not None:
                node.grad += g
            continue
        if g is not None:
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        node._parents = ()
        node._backward = None


# ------------------------------------------------------------------------------
# Parameters
# ------------------------------------------------------------------------------

class ParamTree:
    """Ordered name -> leaf Tensor map; each leaf carries its grad slot."""

    def __init__(self):
        self._entries = {}
        self.version = 0
        self.adam = None

    def add(self, name, value):
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name}")
        self._entries[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        return self._entries[name]

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise DimensionError(f"missing parameter {name}") from None

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def count(self):
        return int(np.sum([t.size for t in self._entries.values()]))

    def zero_grad(self):
        for tensor in self._entries.values():
            tensor.grad.fill(0.0)

    def snapshot(self):
        return {name: t.data.copy() for name, t in self._entries.items()}

    def restore(self, snapshot):
        for name, value in snapshot.items():
            target = self[name]
            if target.shape != value.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != {target.shape}")
            target.data[...] = value
        self.version += 1

    def fingerprint(self):
        digest = hashlib.sha256()
        for name, tensor in self._entries.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


def orthogonal(rng, shape, gain=1.0):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# ------------------------------------------------------------------------------
# Architectures
# ------------------------------------------------------------------------------

ACTIVATIONS = {"tanh": tanh, "relu": relu}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation}")

    def layer_dims(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class Conv1dSpec:
    """layers: (in_channels, out_channels, kernel, stride) per conv layer."""

    layers: tuple
    projection_dim: int
    activation: str = "relu"

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i][0] != self.layers[i - 1][1]:
                raise ValueError(f"conv layer {i + 1} expects {self.layers[i][0]} channels, "
                                 f"layer {i} produces {self.layers[i - 1][1]}")

    def temporal_lengths(self, length):
        lengths = []
        for _, _, kernel, stride in self.layers:
            length = (length - kernel) // stride + 1
            lengths.append(length)
        return lengths

    def min_input_length(self):
        needed = 1
        for _, _, kernel, stride in reversed(self.layers):
            needed = (needed - 1) * stride + kernel
        return needed

    def flattened_width(self, length):
        return self.layers[-1][1] * self.temporal_lengths(length)[-1]


ADAPTATION_CONV_LAYERS = ((32, 32, 8, 4), (32, 32, 5, 1), (32, 32, 5, 1))


def init_mlp(spec, params, rng, prefix, output_gain=1.0):
    layers = spec.layer_dims()
    for i, (din, dout) in enumerate(layers):
        gain = output_gain if i == len(layers) - 1 else 1.0
        params.add(f"{prefix}/layer{i}/weight", orthogonal(rng, (din, dout), gain))
        params.add(f"{prefix}/layer{i}/bias", np.zeros(dout))


def init_conv1d(spec, params, rng, prefix, length, output_gain=1.0):
    for i, (cin, cout, kernel, _) in enumerate(spec.layers):
        params.add(f"{prefix}/conv{i}/weight", orthogonal(rng, (cin * kernel, cout)))
        params.add(f"{prefix}/conv{i}/bias", np.zeros(cout))
    width = spec.flattened_width(length)
    params.add(f"{prefix}/projection/weight", orthogonal(rng, (width, spec.projection_dim), output_gain))
    params.add(f"{prefix}/projection/bias", np.zeros(spec.projection_dim))


def linear(x, weight, bias, layer):
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"layer {layer}: input width {x.shape[1]} != weight rows {weight.shape[0]}", layer=layer)
    return matmul(x, weight) + bias


def mlp_forward(spec, params, x, prefix=""):
    h = as_tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise DimensionError(f"{prefix or 'mlp'} layer 0: expected [batch, {spec.input_dim}], got {h.shape}",
                             layer=0)
    activation = ACTIVATIONS[spec.activation]
    layers = spec.layer_dims()
    for i in range(len(layers)):
        h = linear(h, params[f"{prefix}/layer{i}/weight"], params[f"{prefix}/layer{i}/bias"], i)
        if i < len(layers) - 1:
            h = activation(h)
    return h


def conv1d_forward(spec, params, x, prefix=""):
    h = as_tensor(x)
    if h.ndim != 3 or h.shape[1] != spec.layers[0][0]:
        raise DimensionError(f"conv layer 1: expected [batch, {spec.layers[0][0]}, time], got {h.shape}",
                             layer=1)
    activation = ACTIVATIONS[spec.activation]
    batch = h.shape[0]
    for i, (cin, cout, kernel, stride) in enumerate(spec.layers):
        length = h.shape[2]
        if length < kernel:
            raise DimensionError(
                f"conv layer {i + 1}: temporal length {length} < kernel {kernel}; "
                f"input needs at least {spec.min_input_length()} steps",
                layer=i + 1, required=spec.min_input_length())
        out_len = (length - kernel) // stride + 1
        cols = transpose(windows(h, kernel, stride), (0, 2, 1, 3))
        cols = reshape(cols, (batch * out_len, cin * kernel))
        y = linear(cols, params[f"{prefix}/conv{i}/weight"], params[f"{prefix}/conv{i}/bias"], i + 1)
        y = activation(reshape(y, (batch, out_len, cout)))
        h = transpose(y, (0, 2, 1))
    flat = reshape(h, (batch, h.shape[1] * h.shape[2]))
    return linear(flat, params[f"{prefix}/projection/weight"], params[f"{prefix}/projection/bias"],
                  len(spec.layers) + 1)


# ------------------------------------------------------------------------------
# Gaussian action head
# ------------------------------------------------------------------------------

def effective_std(log_std):
    return maximum(exp(log_std), MIN_STD)


def gaussian_log_prob(mean, log_std, actions):
    """Diagonal Gaussian log density, summed over action dims -> [batch]."""
    std = effective_std(log_std)
    z = (as_tensor(actions) - mean) / std
    per_dim = mul(square(z), -0.5) - log(std) - 0.5 * LOG_2PI
    return sum(per_dim, axis=1)


def gaussian_head(mean, log_std, rng=None, deterministic=False):
    """Sample an action (or return the mean) together with its log density."""
    mean = as_tensor(mean)
    if deterministic:
        sample = mean.data.copy()
    else:
        std = np.maximum(np.exp(as_tensor(log_std).data), MIN_STD)
        sample = mean.data + std * rng.standard_normal(mean.shape)
    return sample, gaussian_log_prob(mean, log_std, sample)


# ------------------------------------------------------------------------------
# Optimizer
# ------------------------------------------------------------------------------

@dataclass
class Adam:
    params: ParamTree
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, tensor in self.params.items():
            self.moments.setdefault(name, (np.zeros_like(tensor.data), np.zeros_like(tensor.data)))

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            m, v = self.moments[name]
            g = tensor.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        self.params.version += 1

    def state_arrays(self, prefix="optim"):
        arrays = {f"{prefix}/step": np.array([float(self.step_count)])}
        for name, (m, v) in self.moments.items():
            arrays[f"{prefix}/m/{name}"] = m.copy()
            arrays[f"{prefix}/v/{name}"] = v.copy()
        return arrays

    def load_state_arrays(self, arrays, prefix="optim"):
        self.step_count = int(arrays[f"{prefix}/step"][0])
        for name in self.moments:
            self.moments[name] = (arrays[f"{prefix}/m/{name}"].copy(), arrays[f"{prefix}/v/{name}"].copy())


def adam_step(target, lr=None, beta1=None, beta2=None, eps=None):
    """One Adam update.

    `target` is either an Adam instance or a ParamTree; a ParamTree keeps its
    own optimizer state between calls. Hyperparameters given here replace the
    stored ones.
    """
    if isinstance(target, ParamTree):
        if target.adam is None:
            target.adam = Adam(target)
        optimizer = target.adam
    else:
        optimizer = target
    for name, value in (("lr", lr), ("beta1", beta1), ("beta2", beta2), ("eps", eps)):
        if value is not None:
            setattr(optimizer, name, value)
    optimizer.step()
