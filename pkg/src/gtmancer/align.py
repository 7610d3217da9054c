"""Encoding into the shared latent space and the contrastive alignment loss."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .errors import DegenerateError, ShapeError


def encode(features, W: Node, b: Node) -> Node:
    """Affine map ``V W + b`` with ``b`` broadcast over rows."""
    V = features if isinstance(features, Node) else dc.const(features)
    if V.shape[1] != W.shape[0]:
        raise ShapeError(f"view width {V.shape[1]} does not match encoder input {W.shape[0]}")
    if b.shape != (1, W.shape[1]):
        raise ShapeError(f"bias shape {b.shape}, expected (1, {W.shape[1]})")
    return dc.matmul(V, W) + b


def similarity_logits(Z_m: Node, Z_mean: Node, tau: float) -> Node:
    """Frobenius-normalized cross-similarity scaled by ``exp(tau)``."""
    if Z_m.shape != Z_mean.shape:
        raise ShapeError(f"similarity_logits: {Z_m.shape} vs {Z_mean.shape}")
    n_m = dc.frobenius_norm(Z_m)
    n_bar = dc.frobenius_norm(Z_mean)
    if n_m.item() == 0.0 or n_bar.item() == 0.0:
        raise DegenerateError("similarity_logits: embedding with zero Frobenius norm")
    left = dc.div_scalar(Z_m, n_m)
    right = dc.div_scalar(Z_mean, n_bar)
    return dc.scale(dc.matmul(left, dc.transpose(right)), math.exp(tau))


def build_target_matrix(labels, train_indices) -> np.ndarray:
    """Row-normalized same-class indicator over labeled samples.

    ``T[i, j] = 1/k_i`` when both ``i`` and ``j`` are labeled and share a class,
    where ``k_i`` counts the labeled members of ``i``'s class. Rows of
    unlabeled samples are zero.
    """
    labels = np.asarray(labels)
    n = len(labels)
    T = np.zeros((n, n))
    train = np.asarray(sorted(set(int(i) for i in train_indices)), dtype=np.int64)
    for cls in np.unique(labels[train]) if len(train) else ():
        members = train[labels[train] == cls]
        T[np.ix_(members, members)] = 1.0 / len(members)
    return T


def contrastive_loss(gammas: Sequence[Node], T) -> Node:
    """Symmetric cross-entropy of row-softmaxed logits against ``T``.

    Both ``log_softmax(G)`` and ``log_softmax(G^T)`` are scored against the
    same target, averaged over modalities and divided by N.
    """
    T = T if isinstance(T, Node) else dc.const(T)
    if not gammas:
        raise ShapeError("contrastive_loss: no modalities")
    terms = []
    for G in gammas:
        if G.shape != T.shape:
            raise ShapeError(f"contrastive_loss: logits {G.shape} vs target {T.shape}")
        both = dc.row_log_softmax(G) + dc.row_log_softmax(dc.transpose(G))
        terms.append(dc.sum_all(dc.mul(T, both)))
    n = T.shape[0]
    return dc.scale(dc.add_n(terms), -1.0 / (len(gammas) * n))


def alignment_loss(Z: Sequence[Node], T, tau: float) -> Node:
    """Contrastive loss of every modality against the cross-modality mean."""
    Z_mean = dc.mean_n(list(Z))
    return contrastive_loss([similarity_logits(z, Z_mean, tau) for z in Z], T)
