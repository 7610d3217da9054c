"""Smoothness objectives on a multiplex sample graph and their descent steps.

The multiplex objective for embeddings ``Z[m]`` (N x d each) is

    H = sum_m 1/2 tr(Z[m]^T (I - S[m]) Z[m])
        + 1/4 sum_{e,n} P[e, n] ||Z[e] - Z[n]||_F^2
        + 1/2 sum_m ||Z[m] - Z_init[m]||_F^2

The intra-omics term is written as a quadratic form in the normalized
Laplacian ``I - S``. For a symmetric ``S`` with unit row sums it equals a
pairwise smoothness sum (1/4 sum_ij S_ij ||Z_i - Z_j||^2), and it is the form
whose exact gradient is ``(3I - S) Z - sum_e P[e, m] Z[e] - Z_init`` once
``P`` is symmetric with unit row sums.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .diffcore import as_matrix, spectral_norm
from .errors import ParameterError, ShapeError, SingularityError

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class StepDiagnostics:
    objective_before: float
    objective_after: float
    step_size_used: Optional[float]
    bound: Optional[float]
    spectral_radius_S_over_3: float
    kind: str = "second_order"
    step: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class EmbeddingState:
    Z: tuple
    Z_init: tuple
    k: int = 0
    diagnostics: Optional[StepDiagnostics] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.Z) != len(self.Z_init):
            raise ShapeError("Z and Z_init list different modality counts")
        for z, z0 in zip(self.Z, self.Z_init):
            if z.shape != z0.shape:
                raise ShapeError(f"Z {z.shape} vs Z_init {z0.shape}")
        for z0 in self.Z_init:
            z0.setflags(write=False)

    @classmethod
    def start(cls, Z_init: Sequence) -> "EmbeddingState":
        anchors = tuple(as_matrix(z, "Z_init").copy() for z in Z_init)
        return cls(tuple(a.copy() for a in anchors), anchors, 0)

    @property
    def M(self) -> int:
        return len(self.Z)


@dataclass(frozen=True)
class MultiplexStructure:
    S: tuple
    P: np.ndarray

    def __post_init__(self):
        M = len(self.S)
        if self.P.shape != (M, M):
            raise ShapeError(f"P has shape {self.P.shape}, expected ({M}, {M})")
        for m, s in enumerate(self.S):
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise ShapeError(f"S[{m}] must be square, got {s.shape}")
            if not np.allclose(s, s.T, rtol=0.0, atol=1e-10):
                raise ShapeError(f"S[{m}] is not symmetric")

    @classmethod
    def of(cls, S: Sequence, P) -> "MultiplexStructure":
        return cls(tuple(as_matrix(s, "S") for s in S), as_matrix(P, "P"))

    @property
    def M(self) -> int:
        return len(self.S)


def _check(state: EmbeddingState, structure: MultiplexStructure):
    if state.M != structure.M:
        raise ShapeError(f"state has {state.M} modalities, structure has {structure.M}")
    for m, (z, s) in enumerate(zip(state.Z, structure.S)):
        if s.shape[0] != z.shape[0]:
            raise ShapeError(f"S[{m}] is {s.shape}, Z[{m}] has {z.shape[0]} rows")


# -- single graph ---------------------------------------------------------------

def classic_objective(F, A) -> float:
    """``1/2 tr(F^T (I - A) F)``, the smoothness whose gradient is ``(I - A) F``."""
    F, A = as_matrix(F, "F"), as_matrix(A, "A")
    return 0.5 * float(np.sum(F * F) - np.sum(F * (A @ F)))


def classic_gradient(F, A) -> np.ndarray:
    F, A = as_matrix(F, "F"), as_matrix(A, "A")
    return F - A @ F


def classic_step(F, A, alpha: float) -> np.ndarray:
    """One descent step ``(1 - alpha) F + alpha A F``.

    ``alpha = 0`` leaves the features untouched (a plain feature transform);
    ``alpha = 1`` is pure neighbourhood aggregation ``A F``.
    """
    F, A = as_matrix(F, "F"), as_matrix(A, "A")
    if A.shape[0] != A.shape[1] or A.shape[1] != F.shape[0]:
        raise ShapeError(f"classic_step: A {A.shape} incompatible with F {F.shape}")
    return (1.0 - alpha) * F + alpha * (A @ F)


# -- multiplex objective ----------------------------------------------------------

def objective_value(state: EmbeddingState, structure: MultiplexStructure) -> float:
    _check(state, structure)
    Z, Z0, S, P = state.Z, state.Z_init, structure.S, structure.P
    intra = sum(0.5 * (np.sum(z * z) - np.sum(z * (s @ z))) for z, s in zip(Z, S))
    inter = 0.0
    for e in range(state.M):
        for n in range(state.M):
            if e != n and P[e, n] != 0.0:
                inter += 0.25 * P[e, n] * np.sum((Z[e] - Z[n]) ** 2)
    reg = sum(0.5 * np.sum((z - z0) ** 2) for z, z0 in zip(Z, Z0))
    return float(intra + inter + reg)


def mixed_neighbours(state: EmbeddingState, structure: MultiplexStructure, m: int) -> np.ndarray:
    """``sum_e P[e, m] Z[e]`` (the diagonal term included)."""
    P = structure.P
    return sum(P[e, m] * state.Z[e] for e in range(state.M))


def objective_gradient(state: EmbeddingState, structure: MultiplexStructure, m: int) -> np.ndarray:
    if not 0 <= m < state.M:
        raise IndexError(f"modality index {m} out of range for M={state.M}")
    _check(state, structure)
    z = state.Z[m]
    return 3.0 * z - structure.S[m] @ z - mixed_neighbours(state, structure, m) - state.Z_init[m]


def first_order_step(state: EmbeddingState, structure: MultiplexStructure, alpha: float) -> EmbeddingState:
    """Simultaneous gradient step on every modality from the current state.

    ``alpha = 0`` returns the same iterates (counter still advances).
    """
    if alpha < 0.0:
        raise ParameterError(f"step size must be non-negative, got {alpha}")
    _check(state, structure)
    if alpha == 0.0:
        new = tuple(z.copy() for z in state.Z)
    else:
        new = tuple(
            (1.0 - 3.0 * alpha) * z + alpha * (s @ z)
            + alpha * mixed_neighbours(state, structure, m) + alpha * state.Z_init[m]
            for m, (z, s) in enumerate(zip(state.Z, structure.S))
        )
    return EmbeddingState(new, state.Z_init, state.k + 1)


def hessian_block(structure: MultiplexStructure, m: int) -> np.ndarray:
    """``3I - S[m] - P[m, m] * ones(N, N)``."""
    s = structure.S[m]
    n = s.shape[0]
    return 3.0 * np.eye(n) - s - structure.P[m, m] * np.ones((n, n))


def max_stable_step(structure: MultiplexStructure, tol: float = 1e-12) -> float:
    """Largest step with guaranteed monotone first-order descent: ``min_m 2 / ||hessian_block(m)||_2``."""
    bounds = []
    for m in range(structure.M):
        norm = spectral_norm(hessian_block(structure, m), tol=tol)
        bounds.append(np.inf if norm == 0.0 else 2.0 / norm)
    return float(min(bounds))


def newton_step_exact(state: EmbeddingState, structure: MultiplexStructure, m: int) -> np.ndarray:
    H = hessian_block(structure, m)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularityError(f"Hessian block {m} is singular or ill-conditioned (cond={cond:.3g})")
    g = objective_gradient(state, structure, m)
    return state.Z[m] - np.linalg.solve(H, g)


def neumann_approx_inverse(S_m) -> np.ndarray:
    """First-order truncated series ``(I + S/3) / 3`` for ``(3I - S)^-1``."""
    S_m = as_matrix(S_m, "S")
    if S_m.shape[0] != S_m.shape[1]:
        raise ShapeError(f"neumann_approx_inverse needs a square matrix, got {S_m.shape}")
    return (np.eye(S_m.shape[0]) + S_m / 3.0) / 3.0


def _second_order_update(z, s, mixed, anchor):
    sz = s @ z
    rhs = mixed + anchor
    return (s @ sz) / 9.0 + (3.0 * rhs + s @ rhs) / 9.0


def second_order_step(state: EmbeddingState, structure: MultiplexStructure,
                      diagnose: bool = True) -> EmbeddingState:
    """Preconditioned step with the truncated-series inverse Hessian.

    Each modality becomes ``S^2 Z / 9 + (3I + S)(sum_e P[e, m] Z[e] + Z_init) / 9``,
    all computed from the incoming state.
    """
    _check(state, structure)
    new = tuple(
        _second_order_update(z, s, mixed_neighbours(state, structure, m), state.Z_init[m])
        for m, (z, s) in enumerate(zip(state.Z, structure.S))
    )
    out = EmbeddingState(new, state.Z_init, state.k + 1)
    if diagnose:
        rho = max(spectral_norm(s) for s in structure.S) / 3.0
        diag = StepDiagnostics(objective_value(state, structure), objective_value(out, structure),
                               None, None, rho, "second_order", out.k)
        out = replace(out, diagnostics=diag)
    return out


def first_order_step_diagnosed(state, structure, alpha) -> EmbeddingState:
    """:func:`first_order_step` with a :class:`StepDiagnostics` record attached."""
    out = first_order_step(state, structure, alpha)
    rho = max(spectral_norm(s) for s in structure.S) / 3.0
    diag = StepDiagnostics(objective_value(state, structure), objective_value(out, structure),
                           float(alpha), max_stable_step(structure), rho, "first_order", out.k)
    return replace(out, diagnostics=diag)


def rescale_for_series(S, limit: float = 0.9) -> tuple:
    """Shrink ``S`` so that ``||S / 3||_2 <= limit``; returns ``(S, rescaled)``."""
    S = as_matrix(S, "S")
    norm = spectral_norm(S)
    if norm / 3.0 <= limit:
        return S, False
    return S * (limit * 3.0 / norm), True
