"""
Parameterisations of the base policy, factor encoder, critic and adaptation module.

Phase-1 parameters (policy, encoder, critic, log_std) live in one ParamTree so a
single Adam instance trains them end to end. The adaptation module has its own tree.
"""

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Conv1dSpec, MlpSpec, ADAPTATION_CONV_LAYERS, ParamTree


LATENT = "latent"
FACTORS = "factors"
NONE = "none"
CONDITIONINGS = (LATENT, FACTORS, NONE)


@dataclass(frozen=True)
class AgentDims:
    obs_dim: int = 10
    action_dim: int = 2
    factor_dim: int = 8
    latent_dim: int = 8
    history: int = 50
    embed_dim: int = 32
    policy_hidden: tuple = (128, 128)
    encoder_hidden: tuple = (256, 128)
    critic_hidden: tuple = (128, 128)

    @classmethod
    def hopper(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def a1(cls):
        return cls(obs_dim=30, action_dim=12, factor_dim=17, latent_dim=8)

    def condition_dim(self, conditioning):
        return {LATENT: self.latent_dim, FACTORS: self.factor_dim, NONE: 0}[conditioning]

    def to_meta(self):
        return {
            "obs_dim": self.obs_dim, "action_dim": self.action_dim, "factor_dim": self.factor_dim,
            "latent_dim": self.latent_dim, "history": self.history, "embed_dim": self.embed_dim,
            "policy_hidden": _dims_text(self.policy_hidden),
            "encoder_hidden": _dims_text(self.encoder_hidden),
            "critic_hidden": _dims_text(self.critic_hidden),
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(obs_dim=int(meta["obs_dim"]), action_dim=int(meta["action_dim"]),
                   factor_dim=int(meta["factor_dim"]), latent_dim=int(meta["latent_dim"]),
                   history=int(meta["history"]), embed_dim=int(meta["embed_dim"]),
                   policy_hidden=_parse_dims(meta["policy_hidden"]),
                   encoder_hidden=_parse_dims(meta["encoder_hidden"]),
                   critic_hidden=_parse_dims(meta["critic_hidden"]))


def _dims_text(dims):
    return ",".join(str(d) for d in dims)


def _parse_dims(text):
    return tuple(int(d) for d in text.split(",") if d)


class PolicyNetworks:
    """pi(x, a_prev, cond), mu(e) and V(x, a_prev, cond) over one ParamTree."""

    def __init__(self, dims, conditioning=LATENT, params=None, rng=None, init_log_std=0.0):
        if conditioning not in CONDITIONINGS:
            raise ValueError(f"unknown conditioning {conditioning!r}")
        self.dims = dims
        self.conditioning = conditioning
        cond = dims.condition_dim(conditioning)
        head_in = dims.obs_dim + dims.action_dim + cond
        self.policy_spec = MlpSpec(head_in, dims.policy_hidden, dims.action_dim, "tanh")
        self.critic_spec = MlpSpec(head_in, dims.critic_hidden, 1, "tanh")
        self.encoder_spec = MlpSpec(dims.factor_dim, dims.encoder_hidden, dims.latent_dim, "tanh")

        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ParamTree()
            nd.init_mlp(self.policy_spec, params, rng, "policy", output_gain=0.01)
            if conditioning == LATENT:
                nd.init_mlp(self.encoder_spec, params, rng, "encoder")
            nd.init_mlp(self.critic_spec, params, rng, "critic")
            params.add("log_std", np.full(dims.action_dim, init_log_std))
        self.params = params

    @property
    def condition_dim(self):
        return self.dims.condition_dim(self.conditioning)

    def encode(self, factors):
        """z = mu(e) for normalized factor rows [batch, factor_dim]."""
        return nd.mlp_forward(self.encoder_spec, self.params, factors, "encoder")

    def condition(self, factors):
        if self.conditioning == LATENT:
            return self.encode(factors)
        if self.conditioning == FACTORS:
            return nd.as_tensor(factors)
        return None

    def _inputs(self, obs, prev_actions, cond):
        parts = [nd.as_tensor(obs), nd.as_tensor(prev_actions)]
        if cond is not None:
            parts.append(nd.as_tensor(cond))
        return nd.concat(parts, axis=1)

    def policy_mean(self, obs, prev_actions, cond):
        return nd.mlp_forward(self.policy_spec, self.params, self._inputs(obs, prev_actions, cond), "policy")

    def value(self, obs, prev_actions, cond):
        out = nd.mlp_forward(self.critic_spec, self.params, self._inputs(obs, prev_actions, cond), "critic")
        return nd.reshape(out, (out.shape[0],))

    def act(self, obs, prev_action, cond, rng=None, deterministic=False):
        """Single-step inference: returns (action, log_prob, value) as numpy values."""
        with nd.no_grad():
            obs = np.asarray(obs)[None, :]
            prev = np.asarray(prev_action)[None, :]
            cond = None if cond is None else np.asarray(cond)[None, :]
            mean = self.policy_mean(obs, prev, cond)
            action, log_prob = nd.gaussian_head(mean, self.params["log_std"], rng, deterministic)
            value = self.value(obs, prev, cond)
        return action[0], float(log_prob.data[0]), float(value.data[0])

    def latent(self, normalized_factors):
        with nd.no_grad():
            return self.encode(np.asarray(normalized_factors)[None, :]).data[0]


class AdaptationModule:
    """phi: [batch, history, obs+action] -> estimate (latent or factors)."""

    def __init__(self, dims, output_dim=None, params=None, rng=None, conv_layers=ADAPTATION_CONV_LAYERS):
        self.dims = dims
        self.output_dim = output_dim or dims.latent_dim
        step_dim = dims.obs_dim + dims.action_dim
        self.embed_spec = MlpSpec(step_dim, (dims.embed_dim,), dims.embed_dim, "relu")
        layers = tuple((dims.embed_dim if i == 0 else cin, cout, k, s)
                       for i, (cin, cout, k, s) in enumerate(conv_layers))
        self.conv_spec = Conv1dSpec(layers, self.output_dim, "relu")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ParamTree()
            nd.init_mlp(self.embed_spec, params, rng, "adaptation/embed")
            nd.init_conv1d(self.conv_spec, params, rng, "adaptation/cnn", dims.history)
        self.params = params

    def forward(self, windows):
        windows = nd.as_tensor(windows)
        if windows.ndim != 3 or windows.shape[1] != self.dims.history:
            raise nd.DimensionError(
                f"history window must be [batch, {self.dims.history}, {self.dims.obs_dim + self.dims.action_dim}],"
                f" got {windows.shape}", layer=0, required=self.dims.history)
        batch, length, width = windows.shape
        flat = nd.reshape(windows, (batch * length, width))
        embedded = nd.relu(nd.mlp_forward(self.embed_spec, self.params, flat, "adaptation/embed"))
        stacked = nd.reshape(embedded, (batch, length, self.dims.embed_dim))
        return nd.conv1d_forward(self.conv_spec, self.params, nd.transpose(stacked, (0, 2, 1)),
                                 "adaptation/cnn")

    def estimate(self, window):
        with nd.no_grad():
            return self.forward(np.asarray(window)[None, :, :]).data[0]


def adaptation_forward(module, windows):
    return module.forward(windows)
