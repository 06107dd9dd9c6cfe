"""Feasibility module: interior point and the generalized gauge map.

Given a strictly feasible ``u0`` with row slacks ``s = h - H u0``, a virtual
prediction ``v`` is mapped to

    u = u0 + c * v,    c = 1 / max(1, max_r (H v)_r / s_r)

where the max runs over every local row of every agent and every coupled row
(the coupled lhs is the sum over agents). Predictions that already stay inside
the polytope are kept; the others are pulled radially onto its boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, MarginError, ShapeError
from .net import Model, forward
from .oracle import _id_key, water_fill
from .problem import ConstraintSystem, Instance, build_vpp_constraints, features

__all__ = [
    "DELTA",
    "GaugeContext",
    "ScalingFactor",
    "interior_point",
    "gauge_context",
    "ratios",
    "scaling_factor",
    "gauge_map",
    "apply",
    "apply_tensor",
]

DELTA = 0.01


@dataclass(frozen=True)
class GaugeContext:
    """Interior point ``u0`` (n, d_u) and the strictly positive slacks it leaves."""

    u0: np.ndarray
    local_slacks: np.ndarray
    coupled_slacks: np.ndarray

    def __post_init__(self):
        if np.any(self.local_slacks <= 0) or np.any(self.coupled_slacks <= 0):
            raise ContractError("interior point is not strictly feasible: a slack is non-positive")


@dataclass(frozen=True)
class ScalingFactor:
    c: float
    max_ratio: float
    argmax: int


def interior_point(instance: Instance, delta: float = DELTA) -> np.ndarray:
    """Optimal dispatch of the instance tightened by ``delta``.

    The boxes shrink to ``[delta p_c, (1 - delta) p_c]`` and the net-output
    band to ``(1 - delta) p_omax``, so the result keeps a positive slack in
    every original row. It is computed with the order-independent breakpoint
    sweep, so permuting the agents permutes ``u0`` exactly.
    """
    p_c = instance.p_c
    lo = delta * p_c
    hi = (1.0 - delta) * p_c
    band = (1.0 - delta) * instance.p_omax
    demand = math.fsum(instance.p_d)
    if math.fsum(hi) < demand - band or math.fsum(lo) > demand + band:
        usable = 1.0 - demand / (math.fsum(p_c) + instance.p_omax)
        raise MarginError(
            f"tightened instance infeasible at delta={delta}; "
            f"delta must be reduced below {max(usable, 0.0):.6g}"
        )
    keys = [_id_key(a) for a in instance.agent_ids]
    u0, _ = water_fill(p_c, lo, hi, demand + band, keys)
    return u0


def gauge_context(cs: ConstraintSystem, X: np.ndarray, u0) -> GaugeContext:
    """Slacks of ``u0`` in every row of ``cs`` for the agents described by ``X``."""
    X = np.asarray(X, dtype=np.float64)
    U0 = np.asarray(u0, dtype=np.float64).reshape(X.shape[0], cs.d_u)
    local = cs.local_rhs(X) - U0 @ cs.H_loc.T
    summed = np.array([math.fsum(col) for col in U0.T])
    coupled = cs.coupled_rhs(X) - cs.H_cpl @ summed
    return GaugeContext(U0, local, coupled)


def _ratio_tensor(cs: ConstraintSystem, ctx: GaugeContext, V: Tensor) -> Tensor:
    n = ctx.u0.shape[0]
    if V.ndim != 2 or V.shape != (n, cs.d_u):
        raise ShapeError(f"prediction shape {V.shape} does not match ({n}, {cs.d_u})")
    local = ad.matmul(V, Tensor(cs.H_loc.T)) / Tensor(ctx.local_slacks)
    summed = ad.matmul(Tensor(np.ones((1, n))), V)
    coupled = ad.matmul(summed, Tensor(cs.H_cpl.T)) / Tensor(ctx.coupled_slacks.reshape(1, -1))
    return ad.concat([ad.reshape(local, (local.size,)), ad.reshape(coupled, (coupled.size,))], axis=0)


def _gauge_tensor(cs: ConstraintSystem, ctx: GaugeContext, V: Tensor) -> tuple[Tensor, Tensor]:
    r = _ratio_tensor(cs, ctx, V)
    c = ad.reciprocal(ad.maximum(ad.max_all(r), 1.0))
    u = Tensor(ctx.u0) + V * c
    return u, c


def _as_prediction(v, n: int, d_u: int) -> Tensor:
    if isinstance(v, Tensor):
        return v if v.ndim == 2 else ad.reshape(v, (n, d_u))
    arr = np.asarray(v, dtype=np.float64)
    if arr.size != n * d_u:
        raise ShapeError(f"prediction has {arr.size} values, expected {n} x {d_u}")
    return Tensor(arr.reshape(n, d_u))


def ratios(cs: ConstraintSystem, ctx: GaugeContext, v) -> np.ndarray:
    """Row ratios ``(H v)_r / s_r``: all local rows (agent-major) then the coupled rows."""
    V = _as_prediction(v, ctx.u0.shape[0], cs.d_u)
    return _ratio_tensor(cs, ctx, V).numpy()


def scaling_factor(cs: ConstraintSystem, ctx: GaugeContext, v) -> ScalingFactor:
    r = ratios(cs, ctx, v)
    k = int(np.argmax(r))
    top = float(r[k])
    return ScalingFactor(c=1.0 / max(top, 1.0), max_ratio=top, argmax=k)


def gauge_map(cs: ConstraintSystem, ctx: GaugeContext, v):
    """Map a virtual prediction to a feasible decision.

    Accepts a :class:`Tensor` (the result is differentiable and stays a
    tensor) or an array (returns an ``(n, d_u)`` array).
    """
    V = _as_prediction(v, ctx.u0.shape[0], cs.d_u)
    u, _ = _gauge_tensor(cs, ctx, V)
    return u if isinstance(v, Tensor) else u.numpy()


def apply_tensor(model: Model, instance: Instance) -> Tensor:
    """Full pipeline ``u = T(O(x))`` as an ``(n, d_u)`` tensor (tape-aware)."""
    cs = build_vpp_constraints(instance)
    X = features(instance)
    ctx = gauge_context(cs, X, interior_point(instance))
    v = forward(model, X)
    u, _ = _gauge_tensor(cs, ctx, v)
    return u


def apply(model: Model, instance: Instance) -> np.ndarray:
    """Feasible dispatch for ``instance``, one value per agent in input order."""
    return apply_tensor(model, instance).numpy().reshape(-1)
