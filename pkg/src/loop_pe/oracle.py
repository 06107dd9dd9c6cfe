"""Exact solver for the VPP dispatch problem.

    min  sum_i (u_i - p_c_i)^2
    s.t. 0 <= u_i <= p_c_i
         -p_omax <= sum_i (u_i - p_d_i) <= p_omax

The unconstrained optimum is ``u = p_c``. Lowering any coordinate only lowers
the net output, so at most the upper band binds. With multiplier ``lam`` the
optimal dispatch is ``u_i(lam) = clip(p_c_i - lam/2, 0, p_c_i)``, a monotone
piecewise-linear family; the breakpoints are swept in sorted order and the
root is solved exactly on its linear piece.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .problem import Instance, is_feasible_instance

__all__ = [
    "OracleSolution",
    "solve_exact",
    "brute_force_solve",
    "kkt_residual",
    "water_fill",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class OracleSolution:
    u_star: np.ndarray
    dual_lambda: float
    status: str

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _id_key(agent_id) -> tuple[str, str]:
    return (type(agent_id).__name__, str(agent_id))


def water_fill(target, lo, hi, total, keys) -> tuple[np.ndarray, float]:
    """Minimise ``sum (u - target)^2`` over ``lo <= u <= hi``, ``sum u <= total``.

    Requires ``target >= hi`` entrywise and ``sum lo <= total``. ``keys`` give
    a total order used to break ties between equal breakpoints, which makes the
    result independent of the order the agents are listed in.

    Returns the minimiser and the multiplier of the sum row.
    """
    target = np.asarray(target, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = target.size
    if math.fsum(hi) <= total:
        return hi.copy(), 0.0

    # (lam, kind, key, index): kind 0 leaves the upper bound, kind 1 hits the lower
    events = []
    for i in range(n):
        events.append((2.0 * (target[i] - hi[i]), 0, keys[i], i))
        events.append((2.0 * (target[i] - lo[i]), 1, keys[i], i))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    fixed = math.fsum(hi)
    free_target = 0.0
    m = 0
    state = np.zeros(n, dtype=np.int8)  # 0 at hi, 1 free, 2 at lo
    found = False
    for lam_k, kind, _, i in events:
        if m > 0 and fixed + free_target - m * lam_k / 2.0 <= total:
            found = True
            break
        if kind == 0:
            fixed -= hi[i]
            free_target += target[i]
            m += 1
            state[i] = 1
        else:
            fixed += lo[i]
            free_target -= target[i]
            m -= 1
            state[i] = 2
    if not found:
        raise ContractError("sum of lower bounds exceeds the total")

    free = state == 1
    fixed_sum = math.fsum(np.concatenate([hi[state == 0], lo[state == 2]]))
    lam = 2.0 * (fixed_sum + math.fsum(target[free]) - total) / int(free.sum())
    lam = max(lam, 0.0)
    u = np.clip(target - lam / 2.0, lo, hi)
    return u, lam


def solve_exact(instance: Instance) -> OracleSolution:
    """Exact minimiser via the dual breakpoint sweep.

    Infeasible instances (``sum p_c < sum p_d - p_omax``) return
    ``status="infeasible"`` with a zero dispatch instead of raising.
    """
    p_c = instance.p_c
    if not is_feasible_instance(instance):
        return OracleSolution(np.zeros(instance.n), 0.0, INFEASIBLE)
    total = math.fsum(instance.p_d) + instance.p_omax
    keys = [_id_key(a) for a in instance.agent_ids]
    u, lam = water_fill(p_c, np.zeros_like(p_c), p_c, total, keys)
    return OracleSolution(u, lam, OPTIMAL)


def _grid(cap: float, step: float) -> np.ndarray:
    k = int(math.floor(cap / step + 1e-9))
    pts = np.arange(k + 1) * step
    pts = pts[pts <= cap]
    if cap - pts[-1] > 1e-12:
        pts = np.append(pts, cap)
    return pts


def brute_force_solve(instance: Instance, step: float) -> np.ndarray:
    """Exhaustive grid search over ``[0, p_c]`` per agent.

    Only meant as an independent check; the cost grows as ``(p_c/step)^n``.
    """
    n = instance.n
    if n > 4:
        raise ContractError(f"brute force supports at most 4 agents, got {n}")
    if step <= 0:
        raise ContractError("grid step must be positive")
    p_c = instance.p_c
    grids = [_grid(c, step) for c in p_c]
    upper = math.fsum(instance.p_d) + instance.p_omax
    lower = math.fsum(instance.p_d) - instance.p_omax

    tail = grids[-2:] if n >= 2 else grids
    mesh = np.meshgrid(*tail, indexing="ij")
    tail_sum = sum(m for m in mesh)
    tail_obj = sum((m - c) ** 2 for m, c in zip(mesh, p_c[n - len(tail):]))

    best_val = math.inf
    best = None
    for head in itertools.product(*grids[:-2]) if n > 2 else [()]:
        head_sum = sum(head)
        head_obj = sum((h - c) ** 2 for h, c in zip(head, p_c))
        s = head_sum + tail_sum
        viol = np.maximum(s - upper, lower - s)
        obj = np.where(viol <= 1e-9, head_obj + tail_obj, np.inf)
        idx = int(np.argmin(obj))
        if obj.flat[idx] < best_val:
            best_val = float(obj.flat[idx])
            pos = np.unravel_index(idx, obj.shape)
            best = list(head) + [float(m[pos]) for m in mesh]
    if best is None:
        raise ContractError("no feasible grid point")
    return np.array(best)


def kkt_residual(instance: Instance, sol: OracleSolution) -> float:
    """Largest violation among primal feasibility, dual signs, complementarity and stationarity."""
    if not sol.optimal:
        raise ContractError("KKT residual is only defined for optimal solutions")
    u = np.asarray(sol.u_star, dtype=np.float64).reshape(-1)
    lam = float(sol.dual_lambda)
    p_c = instance.p_c
    total = math.fsum(instance.p_d) + instance.p_omax
    lower = math.fsum(instance.p_d) - instance.p_omax
    s = math.fsum(u)

    primal = max(0.0, float(np.max(u - p_c)), float(np.max(-u)), s - total, lower - s)
    dual = max(0.0, -lam)
    complementarity = abs(lam * (total - s))

    grad = 2.0 * (u - p_c) + lam
    interior = (u > 0.0) & (u < p_c)
    at_cap = u == p_c
    at_zero = u == 0.0
    stationarity = 0.0
    if interior.any():
        stationarity = float(np.max(np.abs(grad[interior])))
    # bound multipliers must have the right sign: -grad at the cap, +grad at zero
    if at_cap.any():
        stationarity = max(stationarity, float(np.max(np.maximum(grad[at_cap], 0.0))))
    if at_zero.any():
        stationarity = max(stationarity, float(np.max(np.maximum(-grad[at_zero], 0.0))))
    return max(primal, dual, complementarity, stationarity)
