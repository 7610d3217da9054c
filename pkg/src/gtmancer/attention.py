"""Learned similarity structure: intra-omics S, inter-omics P, and the
symmetric doubly-stochastic projection of P."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .errors import ConvergenceError, DegenerateError, ParameterError, ShapeError

SPECTRAL_LIMIT = 2.7


@dataclass(frozen=True)
class ProjectionReport:
    iterations_used: int
    max_row_sum_violation: float
    max_asymmetry: float
    converged: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _project_rows(x, name):
    norms = np.linalg.norm(x.value, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateError(f"{name}: projected row {int(zero[0])} has zero norm")
    return dc.row_normalize(x)


def intra_attention_raw(Z_m: Node, W_K: Node, W_Q: Node, strict: bool = True) -> Node:
    """``1 + cos(z_i W_K, z_j W_Q)`` for every sample pair; entries in [0, 2].

    A zero projected row raises when ``strict``; otherwise its cosine with
    everything is taken as 0 (used in train mode, where dropout can blank a row).
    """
    if strict:
        keys = _project_rows(dc.matmul(Z_m, W_K), "key projection")
        queries = _project_rows(dc.matmul(Z_m, W_Q), "query projection")
    else:
        keys = _unit_rows(dc.matmul(Z_m, W_K))
        queries = _unit_rows(dc.matmul(Z_m, W_Q))
    cos = dc.matmul(keys, dc.transpose(queries))
    return cos + np.ones(cos.shape)


def spectral_safety(S: Node, limit: float = SPECTRAL_LIMIT) -> tuple:
    """Scale ``S`` by ``min(1, limit / ||S||_2)``; returns ``(node, factor)``."""
    norm = dc.spectral_norm_node(S)
    sigma = norm.item()
    if sigma <= limit:
        return S, 1.0
    return dc.div_scalar(dc.scale(S, limit), norm), limit / sigma


def intra_attention(Z_m: Node, W_K: Node, W_Q: Node, limit: float = SPECTRAL_LIMIT,
                    strict: bool = True) -> tuple:
    """Symmetrized, spectrally safe intra-omics similarity.

    Returns ``(S, factor)``. ``S`` is exactly symmetric and satisfies
    ``||S||_2 <= limit`` so that ``rho(S / 3) <= limit / 3``.
    """
    raw = intra_attention_raw(Z_m, W_K, W_Q, strict)
    sym = dc.scale(raw + dc.transpose(raw), 0.5)
    S, factor = spectral_safety(sym, limit)
    return S, factor


def _unit_rows(x: Node) -> Node:
    """Row-normalize; all-zero rows stay zero (their cosine with anything is 0)."""
    norms = np.linalg.norm(x.value, axis=1)
    if np.all(norms > 0):
        return dc.row_normalize(x)
    keep = np.where(norms > 0, 1.0, 0.0)[:, None]
    safe = x + (1.0 - keep) * np.ones(x.shape)
    return dc.mul(dc.row_normalize(safe), dc.const(np.broadcast_to(keep, x.shape).copy()))


def inter_attention_raw(Z: Sequence[Node], W_K: Node, W_Q: Node) -> Node:
    """``P[e, m] = 1 + exp(-cos_F(Z[e] W_K, Z[m] W_Q))``.

    ``cos_F`` is the Frobenius inner product of the two projected N x d
    matrices divided by their Frobenius norms, so every entry lies in
    ``[1 + 1/e, 1 + e]`` (2 when either projection vanishes).
    """
    if not Z:
        raise ShapeError("inter_attention_raw: no modalities")
    shape = Z[0].shape
    if any(z.shape != shape for z in Z):
        raise ShapeError("inter_attention_raw: modalities have different shapes")
    keys = _unit_rows(dc.flatten_rows([dc.matmul(z, W_K) for z in Z]))
    queries = _unit_rows(dc.flatten_rows([dc.matmul(z, W_Q) for z in Z]))
    out = dc.exp(dc.neg(dc.matmul(keys, dc.transpose(queries))))
    return out + np.ones(out.shape)


def _violations(P):
    ones = np.ones(P.shape[0])
    row = np.max(np.abs(P @ ones - 1.0))
    col = np.max(np.abs(P.T @ ones - 1.0))
    return float(max(row, col)), float(np.max(np.abs(P - P.T)))


def dykstra_project(P_raw, tol: float = 1e-8, max_iter: int = 10_000) -> tuple:
    """Euclidean projection onto symmetric matrices with unit row and column sums.

    Cycles through symmetrization, row-sum correction and column-sum
    correction, carrying one Dykstra increment per set. Returns
    ``(P, ProjectionReport)``; no sign constraint is imposed.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    X = dc.as_matrix(P_raw, "P_raw").copy()
    M = X.shape[0]
    if X.shape != (M, M):
        raise ShapeError(f"dykstra_project needs a square matrix, got {X.shape}")
    ones = np.ones((M, 1))

    def sym(Y):
        return 0.5 * (Y + Y.T)

    def rows(Y):
        return Y + (ones - Y @ ones) @ ones.T / M

    def cols(Y):
        return Y + ones @ (ones - Y.T @ ones).T / M

    increments = [np.zeros_like(X) for _ in range(3)]
    row_v = asym = np.inf
    for it in range(1, max_iter + 1):
        for idx, proj in enumerate((sym, rows, cols)):
            Y = X + increments[idx]
            X_new = proj(Y)
            increments[idx] = Y - X_new
            X = X_new
        row_v, asym = _violations(X)
        if row_v <= tol and asym <= tol:
            return X, ProjectionReport(it, row_v, asym, True)
    report = ProjectionReport(max_iter, row_v, asym, False)
    raise ConvergenceError(f"Dykstra projection did not converge in {max_iter} cycles", last=(X, report))


def tangent_projection(G: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto ``{X : X = X^T, X 1 = 0}``.

    This is the linear part of :func:`dykstra_project`, hence also its
    Jacobian (the map is self-adjoint, so it serves as the VJP too).
    """
    M = G.shape[0]
    Y = 0.5 * (G + G.T)
    r = Y.sum(axis=1)
    a = (r - r.sum() / (2.0 * M)) / M
    return Y - a[:, None] - a[None, :]


def project_inter_attention(P_raw: Node, tol: float = 1e-8, max_iter: int = 10_000) -> tuple:
    """Differentiable wrapper: forward by Dykstra, backward by the exact tangent projection."""
    P, report = dykstra_project(P_raw.value, tol=tol, max_iter=max_iter)
    node = dc.custom(P, (P_raw,), lambda g: (tangent_projection(g),), op="dykstra")
    return node, report
