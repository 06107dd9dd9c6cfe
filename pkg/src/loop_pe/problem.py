"""Instances, decisions and the summation-form linear constraint system.

Every agent contributes through the same row template, so the system reads

    local rows    H_loc u^i <= h_loc(x^i)                  for every agent i
    coupled rows  sum_i H_cpl u^i <= sum_i h_cpl(x^i) + g
    equalities    A_eq u^i + B_eq(x^i) = 0                 for every agent i

Right-hand sides are affine in the agent features: ``h(x) = h_x @ x + h_c``.
The global offset ``g`` holds constants (such as the VPP net-output limit)
that must not be split across agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .errors import ContractError, ShapeError, SingularityError

__all__ = [
    "AgentRecord",
    "Instance",
    "ConstraintSystem",
    "Reparameterization",
    "Permutation",
    "features",
    "build_vpp_constraints",
    "check_feasibility",
    "objective",
    "eliminate_equalities",
    "is_feasible_instance",
]


@dataclass(frozen=True)
class AgentRecord:
    """One DER as seen by the aggregator: capacity and demand in kW."""

    agent_id: Hashable
    p_c: float
    p_d: float

    def __post_init__(self):
        if not (self.p_c > 0 and math.isfinite(self.p_c)):
            raise ContractError(f"agent {self.agent_id!r}: capacity must be positive, got {self.p_c}")
        if not (self.p_d >= 0 and math.isfinite(self.p_d)):
            raise ContractError(f"agent {self.agent_id!r}: demand must be non-negative, got {self.p_d}")


@dataclass(frozen=True)
class Instance:
    """One dispatch scene: the active agents and the net-output limit ``p_omax``."""

    agents: tuple[AgentRecord, ...]
    p_omax: float

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.agents:
            raise ContractError("an instance needs at least one agent")
        if not self.p_omax > 0:
            raise ContractError(f"p_omax must be positive, got {self.p_omax}")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ContractError("agent ids must be distinct")

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def p_c(self) -> np.ndarray:
        return np.array([a.p_c for a in self.agents])

    @property
    def p_d(self) -> np.ndarray:
        return np.array([a.p_d for a in self.agents])

    @property
    def agent_ids(self) -> list:
        return [a.agent_id for a in self.agents]

    def permuted(self, perm: "Permutation") -> "Instance":
        return Instance(tuple(perm.apply(self.agents)), self.p_omax)

    def without(self, index: int) -> "Instance":
        agents = self.agents[:index] + self.agents[index + 1:]
        return Instance(agents, self.p_omax)

    def with_agent(self, agent: AgentRecord) -> "Instance":
        return Instance(self.agents + (agent,), self.p_omax)


def is_feasible_instance(instance: Instance) -> bool:
    """``u = 0`` and ``u = p_c`` bracket every net output, so only the lower band can fail."""
    return math.fsum(instance.p_c) >= math.fsum(instance.p_d) - instance.p_omax


def features(instance: Instance) -> np.ndarray:
    """Per-agent feature matrix ``[p_c, p_d]`` of shape ``(n, 2)``."""
    return np.array([[a.p_c, a.p_d] for a in instance.agents], dtype=np.float64)


@dataclass(frozen=True)
class Permutation:
    """Row permutation: ``apply(X)[i] = X[sigma[i]]``."""

    sigma: tuple[int, ...]

    def __post_init__(self):
        sigma = tuple(int(s) for s in self.sigma)
        if sorted(sigma) != list(range(len(sigma))):
            raise ContractError(f"not a permutation: {sigma}")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(tuple(rng.permutation(n).tolist()))

    def __len__(self) -> int:
        return len(self.sigma)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.sigma)
        for i, s in enumerate(self.sigma):
            inv[s] = i
        return Permutation(tuple(inv))

    def apply(self, items):
        if isinstance(items, np.ndarray):
            return items[list(self.sigma)]
        return [items[s] for s in self.sigma]

    def matrix(self) -> np.ndarray:
        P = np.zeros((len(self.sigma), len(self.sigma)))
        P[np.arange(len(self.sigma)), list(self.sigma)] = 1.0
        return P


@dataclass(frozen=True)
class ConstraintSystem:
    """Per-agent row templates plus a global offset for the coupled rows.

    Shapes: ``H_loc (r_loc, d_u)``, ``h_loc_x (r_loc, d_x)``, ``h_loc_c (r_loc,)``;
    ``H_cpl (r_cpl, d_u)``, ``h_cpl_x (r_cpl, d_x)``, ``h_cpl_c (r_cpl,)``,
    ``g (r_cpl,)``; optional ``A_eq (r_eq, d_u)``, ``B_eq_x (r_eq, d_x)``,
    ``B_eq_c (r_eq,)``.
    """

    H_loc: np.ndarray
    h_loc_x: np.ndarray
    h_loc_c: np.ndarray
    H_cpl: np.ndarray
    h_cpl_x: np.ndarray
    h_cpl_c: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    B_eq_x: np.ndarray | None = None
    B_eq_c: np.ndarray | None = None

    def __post_init__(self):
        for name in ("H_loc", "h_loc_x", "h_loc_c", "H_cpl", "h_cpl_x", "h_cpl_c", "g"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        d_u = self.H_loc.shape[1]
        d_x = self.h_loc_x.shape[1]
        if self.H_cpl.shape[1] != d_u or self.h_cpl_x.shape[1] != d_x:
            raise ShapeError("local and coupled templates disagree on d_u / d_x")
        if self.h_loc_x.shape[0] != self.H_loc.shape[0] or self.h_loc_c.shape != (self.H_loc.shape[0],):
            raise ShapeError("local right-hand side does not match H_loc rows")
        r_cpl = self.H_cpl.shape[0]
        if self.h_cpl_x.shape[0] != r_cpl or self.h_cpl_c.shape != (r_cpl,) or self.g.shape != (r_cpl,):
            raise ShapeError("coupled right-hand side does not match H_cpl rows")
        if self.A_eq is not None:
            A = np.array(self.A_eq, dtype=np.float64).reshape(-1, d_u)
            if A.shape[0] == 0:
                object.__setattr__(self, "A_eq", None)
                object.__setattr__(self, "B_eq_x", None)
                object.__setattr__(self, "B_eq_c", None)
            else:
                Bx = np.zeros((A.shape[0], d_x)) if self.B_eq_x is None else np.array(self.B_eq_x, dtype=np.float64)
                Bc = np.zeros(A.shape[0]) if self.B_eq_c is None else np.array(self.B_eq_c, dtype=np.float64)
                if Bx.shape != (A.shape[0], d_x) or Bc.shape != (A.shape[0],):
                    raise ShapeError("equality right-hand side does not match A_eq rows")
                object.__setattr__(self, "A_eq", A)
                object.__setattr__(self, "B_eq_x", Bx)
                object.__setattr__(self, "B_eq_c", Bc)

    @property
    def d_u(self) -> int:
        return self.H_loc.shape[1]

    @property
    def d_x(self) -> int:
        return self.h_loc_x.shape[1]

    @property
    def has_equalities(self) -> bool:
        return self.A_eq is not None

    def local_rhs(self, X: np.ndarray) -> np.ndarray:
        """``h_loc(x^i)`` for every agent, shape ``(n, r_loc)``."""
        return X @ self.h_loc_x.T + self.h_loc_c

    def coupled_rhs(self, X: np.ndarray) -> np.ndarray:
        """``sum_i h_cpl(x^i) + g``, shape ``(r_cpl,)``."""
        per_agent = X @ self.h_cpl_x.T + self.h_cpl_c
        return np.array([math.fsum(col) for col in per_agent.T]) + self.g

    def violations(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Signed residual ``lhs - rhs`` of every inequality row, flattened."""
        U = _as_decision(U, X.shape[0], self.d_u)
        local = U @ self.H_loc.T - self.local_rhs(X)
        summed = np.array([math.fsum(col) for col in U.T])
        coupled = self.H_cpl @ summed - self.coupled_rhs(X)
        parts = [local.ravel(), coupled]
        if self.has_equalities:
            eq = U @ self.A_eq.T + X @ self.B_eq_x.T + self.B_eq_c
            parts.append(np.abs(eq).ravel())
        return np.concatenate(parts)


def _as_decision(u, n: int, d_u: int) -> np.ndarray:
    U = np.asarray(u, dtype=np.float64)
    if U.size != n * d_u:
        raise ShapeError(f"decision has {U.size} values, expected {n} agents x {d_u}")
    return U.reshape(n, d_u)


def build_vpp_constraints(instance: Instance) -> ConstraintSystem:
    """Capacity box per agent and the two-sided net-output band.

    Local rows ``u <= p_c`` and ``-u <= 0``; coupled rows
    ``sum u <= sum p_d + p_omax`` and ``-sum u <= -sum p_d + p_omax``.
    """
    p = float(instance.p_omax)
    return ConstraintSystem(
        H_loc=[[1.0], [-1.0]],
        h_loc_x=[[1.0, 0.0], [0.0, 0.0]],
        h_loc_c=[0.0, 0.0],
        H_cpl=[[1.0], [-1.0]],
        h_cpl_x=[[0.0, 1.0], [0.0, -1.0]],
        h_cpl_c=[0.0, 0.0],
        g=[p, p],
    )


def check_feasibility(cs: ConstraintSystem, instance: Instance, u) -> float:
    """Largest positive constraint violation in kW; 0 means feasible."""
    X = features(instance)
    if X.shape[1] != cs.d_x:
        raise ShapeError(f"instance has {X.shape[1]} features, system expects {cs.d_x}")
    return float(max(0.0, np.max(cs.violations(X, u))))


def objective(instance: Instance, u) -> float:
    """``sum_i (u_i - p_c_i)^2`` in kW^2."""
    U = np.asarray(u, dtype=np.float64).reshape(-1)
    if U.size != instance.n:
        raise ShapeError(f"decision has {U.size} entries for {instance.n} agents")
    return math.fsum((U - instance.p_c) ** 2)


@dataclass(frozen=True)
class Reparameterization:
    """Per-agent affine map ``u = p(x) + N z`` with ``p(x) = p_x @ x + p_c``."""

    N: np.ndarray
    p_x: np.ndarray
    p_c: np.ndarray

    @classmethod
    def identity(cls, d_u: int, d_x: int) -> "Reparameterization":
        return cls(np.eye(d_u), np.zeros((d_u, d_x)), np.zeros(d_u))

    @property
    def d_z(self) -> int:
        return self.N.shape[1]

    def particular(self, X: np.ndarray) -> np.ndarray:
        return X @ self.p_x.T + self.p_c

    def lift(self, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Map reduced coordinates ``(n, d_z)`` back to full decisions ``(n, d_u)``."""
        Z = np.asarray(Z, dtype=np.float64).reshape(X.shape[0], self.d_z)
        return self.particular(X) + Z @ self.N.T


def eliminate_equalities(cs: ConstraintSystem) -> tuple[ConstraintSystem, Reparameterization]:
    """Remove the per-agent equality rows by substitution.

    Uses the minimum-norm particular solution ``p = -pinv(A_eq) B_eq(x)`` and
    an orthonormal null-space basis ``N`` of ``A_eq``; the inequality templates
    become ``H N`` with right-hand sides ``h - H p``.

    Raises
    ------
    SingularityError
        If ``A_eq`` does not have full row rank.
    """
    if not cs.has_equalities:
        return cs, Reparameterization.identity(cs.d_u, cs.d_x)
    A = cs.A_eq
    r = A.shape[0]
    _, s, vt = np.linalg.svd(A)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < r:
        raise SingularityError(f"A_eq has rank {rank} < {r} rows")
    N = vt[rank:].T.copy()
    for j in range(N.shape[1]):
        # deterministic sign: first non-negligible entry positive
        col = N[:, j]
        k = int(np.argmax(np.abs(col) > 1e-12))
        if col[k] < 0:
            N[:, j] = -col
    pinv = np.linalg.pinv(A)
    reparam = Reparameterization(N=N, p_x=-pinv @ cs.B_eq_x, p_c=-pinv @ cs.B_eq_c)
    reduced = ConstraintSystem(
        H_loc=cs.H_loc @ N,
        h_loc_x=cs.h_loc_x - cs.H_loc @ reparam.p_x,
        h_loc_c=cs.h_loc_c - cs.H_loc @ reparam.p_c,
        H_cpl=cs.H_cpl @ N,
        h_cpl_x=cs.h_cpl_x - cs.H_cpl @ reparam.p_x,
        h_cpl_c=cs.h_cpl_c - cs.H_cpl @ reparam.p_c,
        g=cs.g,
    )
    return reduced, reparam
