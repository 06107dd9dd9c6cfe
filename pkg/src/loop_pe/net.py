"""Optimality module: shared per-agent embedding, self-attention, shared head.

Nothing here depends on the agent index or the agent count: the embedding
and head are applied row by row with the same weights, and attention uses
shared projections with no positional information. Reordering the input rows
therefore reorders the output rows the same way.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

__all__ = ["ModelConfig", "Model", "init_model", "embed", "attend", "forward"]

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 2
    d_e: int = 64
    d_k: int = 64
    d_v_attn: int = 64
    d_u: int = 1
    embed_depth: int = 2
    head_depth: int = 2
    activation: str = "relu"
    seed: int = 0
    attn_layers: int = 1
    head_residual: bool = True

    def __post_init__(self):
        for name in ("d_x", "d_e", "d_k", "d_v_attn", "d_u", "embed_depth", "head_depth", "attn_layers"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"ModelConfig.{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Model:
    """Configuration plus named parameter tensors, in a fixed order."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_values(self, values: dict[str, np.ndarray]) -> "Model":
        """New model with the same config and replaced parameter values."""
        params = {name: Tensor(values[name], requires_grad=True, name=name) for name in self.params}
        return Model(self.config, params)


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    shapes = []
    width = cfg.d_x
    for i in range(cfg.embed_depth):
        shapes.append((f"embed.{i}.weight", (width, cfg.d_e)))
        shapes.append((f"embed.{i}.bias", (1, cfg.d_e)))
        width = cfg.d_e
    for layer in range(cfg.attn_layers):
        shapes.append((f"attn.{layer}.query", (width, cfg.d_k)))
        shapes.append((f"attn.{layer}.key", (width, cfg.d_k)))
        shapes.append((f"attn.{layer}.value", (width, cfg.d_v_attn)))
        width = cfg.d_v_attn
    width = cfg.d_v_attn + (cfg.d_e if cfg.head_residual else 0)
    for i in range(cfg.head_depth):
        out = cfg.d_u if i == cfg.head_depth - 1 else cfg.d_e
        shapes.append((f"head.{i}.weight", (width, out)))
        shapes.append((f"head.{i}.bias", (1, out)))
        width = out
    return shapes


def init_model(config: ModelConfig) -> Model:
    """Glorot-uniform weights from ``config.seed``; zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, (fan_in, fan_out) in _layer_shapes(config):
        if name.endswith(".bias"):
            values = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[name] = Tensor(values, requires_grad=True, name=name)
    return Model(config, params)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # bias broadcast as ones(n, 1) @ bias keeps every op broadcast-free
    ones = Tensor(np.ones((x.shape[0], 1)))
    return ad.matmul(x, weight) + ad.matmul(ones, bias)


def _as_tensor(X) -> Tensor:
    if isinstance(X, Tensor):
        return X
    return Tensor(np.asarray(X, dtype=np.float64))


def embed(model: Model, X) -> Tensor:
    """Apply the shared embedding network to every row of ``X`` (``n x d_x``)."""
    cfg = model.config
    X = _as_tensor(X)
    if X.ndim != 2 or X.shape[1] != cfg.d_x:
        raise ShapeError(f"embed: expected features of shape (n, {cfg.d_x}), got {X.shape}")
    if X.shape[0] < 1:
        raise ShapeError("embed: at least one agent is required")
    act = ACTIVATIONS[cfg.activation]
    h = X
    for i in range(cfg.embed_depth):
        h = act(_linear(h, model[f"embed.{i}.weight"], model[f"embed.{i}.bias"]))
    return h


def attend(model: Model, E, layer: int = 0) -> Tensor:
    """Single-head scaled dot-product self-attention over the agent rows."""
    cfg = model.config
    E = _as_tensor(E)
    wq = model[f"attn.{layer}.query"]
    if E.ndim != 2 or E.shape[1] != wq.shape[0]:
        raise ShapeError(f"attend: expected rows of width {wq.shape[0]}, got {E.shape}")
    Q = ad.matmul(E, wq)
    K = ad.matmul(E, model[f"attn.{layer}.key"])
    V = ad.matmul(E, model[f"attn.{layer}.value"])
    scores = ad.matmul(Q, ad.transpose(K)) * (1.0 / math.sqrt(cfg.d_k))
    A = ad.softmax_rows(scores)
    return ad.matmul(A, V)


def forward(model: Model, X) -> Tensor:
    """Virtual predictions ``v`` of shape ``(n, d_u)``, one row per agent."""
    cfg = model.config
    E = embed(model, X)
    h = E
    for layer in range(cfg.attn_layers):
        h = attend(model, h, layer)
    if cfg.head_residual:
        h = ad.concat([E, h], axis=1)
    act = ACTIVATIONS[cfg.activation]
    for i in range(cfg.head_depth):
        h = _linear(h, model[f"head.{i}.weight"], model[f"head.{i}.bias"])
        if i < cfg.head_depth - 1:
            h = act(h)
    return h
