"""The multitask recurrent network: LSTM trunk, task-specific layers, distribution heads.

All forward functions are batch-first: vectors carry a leading batch axis and
each batch row owns its own dropout masks. Weights of shape (out, in) map a row
vector ``x`` to ``x @ W.T + a``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_continuous: int
    num_binary: int
    num_events: int
    num_covariates: int
    hidden_size: int = 32
    task_layer_size: int = 16
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.num_continuous < 1 or self.num_events < 1:
            raise ValueError("need at least one continuous channel and one event")
        if self.num_binary < 0 or self.num_covariates < 0:
            raise ValueError("channel counts cannot be negative")
        if self.hidden_size < 1 or self.task_layer_size < 1:
            raise ValueError("layer sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def longitudinal_size(self) -> int:
        return self.num_continuous + self.num_binary

    @property
    def input_size(self) -> int:
        return self.num_covariates + self.longitudinal_size


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, T = config.hidden_size, config.task_layer_size
    C, D, M = config.num_continuous, config.num_binary, config.num_events
    shapes = {
        "lstm_W": (4 * H, config.input_size),
        "lstm_U": (4 * H, H),
        "lstm_b": (4 * H,),
        "task_c_W": (T, H + 1),
        "task_c_b": (T,),
        "task_e_W": (T, H),
        "task_e_b": (T,),
        "mu_W": (C, T),
        "mu_b": (C,),
        "sigma_W": (C, T),
        "sigma_b": (C,),
        "lambda_W": (M, T),
        "lambda_b": (M,),
    }
    if D:
        shapes.update({"task_b_W": (T, H + 1), "task_b_b": (T,), "p_W": (D, T), "p_b": (D,)})
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


def glorot(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in weight_shapes(config).items():
        params[name] = glorot(shape, rng) if len(shape) == 2 else np.zeros(shape)
    return ModelWeights(config, params)


@dataclass
class HiddenState:
    h: Tensor
    m: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_size: int) -> "HiddenState":
        return cls(Tensor(np.zeros((batch, hidden_size))), Tensor(np.zeros((batch, hidden_size))))


@dataclass
class DropoutMasks:
    """One mask set per trajectory (batch row), reused at every time step."""

    input_mask: np.ndarray
    state_mask: np.ndarray
    output_mask: np.ndarray
    task_masks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.input_mask.shape[0]

    def rows(self, index) -> "DropoutMasks":
        return DropoutMasks(self.input_mask[index], self.state_mask[index], self.output_mask[index],
                            {k: v[index] for k, v in self.task_masks.items()})


def _bernoulli_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def sample_masks(config: ModelConfig, seed_or_rng, batch: int = 1,
                 rate: float | None = None) -> DropoutMasks:
    """Inverted-dropout masks: entries are 0 or 1/(1-rate)."""
    rate = config.dropout_rate if rate is None else rate
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    H, T = config.hidden_size, config.task_layer_size
    masks = DropoutMasks(
        input_mask=_bernoulli_mask(rng, (batch, config.input_size), rate),
        state_mask=_bernoulli_mask(rng, (batch, H), rate),
        output_mask=_bernoulli_mask(rng, (batch, H), rate),
    )
    groups = ("c", "b", "e") if config.num_binary else ("c", "e")
    for g in groups:
        masks.task_masks[g] = _bernoulli_mask(rng, (batch, T), rate)
    return masks


def as_tensors(weights: ModelWeights | Mapping[str, Tensor]) -> Mapping[str, Tensor]:
    if isinstance(weights, ModelWeights):
        return {k: Tensor(v) for k, v in weights.params.items()}
    return weights


# -- forward pieces ----------------------------------------------------------

def lstm_step(params: Mapping[str, Tensor], x, state: HiddenState, masks: DropoutMasks) -> HiddenState:
    """One LSTM step; the candidate memory uses ELU, gates use sigmoid.

    Input and recurrent-state masks are applied here; the output mask is
    applied by the consumer of ``h`` (see :func:`forward`).
    """
    x = nx.as_tensor(x)
    in_size = params["lstm_W"].shape[1]
    if x.shape[-1] != in_size:
        raise DimensionError(f"lstm_step: input width {x.shape[-1]} != expected {in_size}")
    H = params["lstm_U"].shape[1]
    pre = nx.affine(x * masks.input_mask, params["lstm_W"], params["lstm_b"])
    pre = pre + nx.linear(state.h * masks.state_mask, params["lstm_U"])
    i = nx.sigmoid(pre[:, 0:H])
    f = nx.sigmoid(pre[:, H:2 * H])
    o = nx.sigmoid(pre[:, 2 * H:3 * H])
    g = nx.elu(pre[:, 3 * H:4 * H])
    m = f * state.m + i * g
    h = o * nx.tanh(m)
    return HiddenState(h, m)


def unroll(params: Mapping[str, Tensor], inputs: np.ndarray, masks: DropoutMasks,
           active: np.ndarray | None = None) -> list[Tensor]:
    """Run the trunk over ``inputs`` of shape (steps, batch, input_size).

    ``active`` (steps, batch) marks real steps for right-aligned histories:
    inactive leading steps keep the state at exactly zero. Returns the raw
    (unmasked) ``h_t`` at every step.
    """
    steps, batch = inputs.shape[0], inputs.shape[1]
    H = params["lstm_U"].shape[1]
    state = HiddenState.zeros(batch, H)
    outputs = []
    for s in range(steps):
        state = lstm_step(params, inputs[s], state, masks)
        if active is not None and not active[s].all():
            keep = active[s][:, None].astype(float)
            state = HiddenState(state.h * keep, state.m * keep)
        outputs.append(state.h)
    return outputs


def task_forward(params: Mapping[str, Tensor], h, tau, masks: DropoutMasks | None = None):
    """Task layers; the horizon is appended for the continuous/binary layers only."""
    h = nx.as_tensor(h)
    tau_col = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    if np.any(tau_col < 0):
        raise ValueError("prediction horizon must be non-negative")
    if tau_col.shape[0] == 1 and h.shape[0] != 1:
        tau_col = np.repeat(tau_col, h.shape[0], axis=0)
    h_tilde = nx.concat([h, tau_col], axis=1)
    z_c = nx.elu(nx.affine(h_tilde, params["task_c_W"], params["task_c_b"]))
    z_e = nx.elu(nx.affine(h, params["task_e_W"], params["task_e_b"]))
    z_b = None
    if "task_b_W" in params:
        z_b = nx.elu(nx.affine(h_tilde, params["task_b_W"], params["task_b_b"]))
    if masks is not None:
        z_c = z_c * masks.task_masks["c"]
        z_e = z_e * masks.task_masks["e"]
        if z_b is not None:
            z_b = z_b * masks.task_masks["b"]
    return z_c, z_b, z_e


@dataclass
class HeadOutputs:
    """Distribution parameters plus the pre-activations the losses use."""

    mu: Tensor
    sigma_pre: Tensor
    p_logit: Tensor | None
    lambda_pre: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return nx.softplus_np(self.sigma_pre.value)

    @property
    def p(self) -> np.ndarray | None:
        return None if self.p_logit is None else nx.sigmoid_np(self.p_logit.value)

    @property
    def lam(self) -> np.ndarray:
        return nx.softplus_np(self.lambda_pre.value)

    def submodel(self) -> "SubmodelParams":
        p = self.p if self.p_logit is not None else np.zeros((self.mu.shape[0], 0))
        return SubmodelParams(self.mu.value, self.sigma, p, self.lam)


@dataclass
class SubmodelParams:
    mu: np.ndarray
    sigma: np.ndarray
    p: np.ndarray
    lam: np.ndarray


def output_heads(params: Mapping[str, Tensor], z_c, z_b, z_e) -> HeadOutputs:
    mu = nx.affine(z_c, params["mu_W"], params["mu_b"])
    sigma_pre = nx.affine(z_c, params["sigma_W"], params["sigma_b"])
    p_logit = nx.affine(z_b, params["p_W"], params["p_b"]) if z_b is not None else None
    lambda_pre = nx.affine(z_e, params["lambda_W"], params["lambda_b"])
    return HeadOutputs(mu, sigma_pre, p_logit, lambda_pre)


def forward(params: Mapping[str, Tensor], inputs: np.ndarray, active: np.ndarray | None,
            tau, masks: DropoutMasks) -> HeadOutputs:
    """Full pass for right-aligned histories; heads are read at the last step."""
    h = unroll(params, inputs, masks, active)[-1]
    z_c, z_b, z_e = task_forward(params, h * masks.output_mask, tau, masks)
    return output_heads(params, z_c, z_b, z_e)


# -- checkpoints -------------------------------------------------------------

def checkpoint_dict(weights: ModelWeights, extra: Mapping | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(weights.config),
        "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in sorted(weights.params.items())},
        "extra": dict(extra or {}),
    }


def save_checkpoint(path, weights: ModelWeights, extra: Mapping | None = None) -> None:
    text = json.dumps(checkpoint_dict(weights, extra), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path) -> tuple[ModelWeights, dict]:
    blob = json.loads(Path(path).read_text())
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = ModelConfig(**blob["model_config"])
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in blob["params"].items()}
    expected = weight_shapes(config)
    if set(params) != set(expected) or any(params[k].shape != expected[k] for k in expected):
        raise ValueError("checkpoint tensors do not match the stored model config")
    return ModelWeights(config, params), blob.get("extra", {})
