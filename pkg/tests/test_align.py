import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gtmancer import diffcore as dc
from gtmancer.align import (
    alignment_loss, build_target_matrix, contrastive_loss, encode, similarity_logits,
)
from gtmancer.errors import DegenerateError, ShapeError


def loop_matmul(A, B):
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            for k in range(A.shape[1]):
                out[i, j] += A[i, k] * B[k, j]
    return out


def loop_logits(Zm, Zbar, tau):
    nm = math.sqrt(sum(x * x for x in Zm.ravel()))
    nb = math.sqrt(sum(x * x for x in Zbar.ravel()))
    N, d = Zm.shape
    G = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            G[i, j] = sum(Zm[i, k] * Zbar[j, k] for k in range(d)) / (nm * nb) * math.exp(tau)
    return G


def loop_log_softmax_row(row):
    top = max(row)
    lse = top + math.log(sum(math.exp(x - top) for x in row))
    return [x - lse for x in row]


def loop_contrastive(gammas, T):
    N = T.shape[0]
    total = 0.0
    for G in gammas:
        ls = [loop_log_softmax_row(list(G[i])) for i in range(N)]
        lst = [loop_log_softmax_row(list(G[:, i])) for i in range(N)]
        for i in range(N):
            for j in range(N):
                total += T[i, j] * (ls[i][j] + lst[i][j])
    return -total / (len(gammas) * N)


# -- encode ---------------------------------------------------------------------

def test_encode_identity(rng):
    V = rng.standard_normal((4, 3))
    out = encode(V, dc.const(np.eye(3)), dc.const(np.zeros((1, 3))))
    np.testing.assert_array_equal(out.value, V)


def test_encode_zero_weight():
    out = encode(np.ones((3, 2)), dc.const(np.zeros((2, 2))), dc.const(np.array([[1.0, -1.0]])))
    np.testing.assert_array_equal(out.value, np.tile([1.0, -1.0], (3, 1)))


def test_encode_matches_triple_loop(rng):
    V, W, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal((1, 3))
    out = encode(V, dc.const(W), dc.const(b)).value
    np.testing.assert_allclose(out, loop_matmul(V, W) + b, rtol=0, atol=1e-12)


def test_encode_width_mismatch():
    with pytest.raises(ShapeError):
        encode(np.ones((3, 2)), dc.const(np.ones((3, 2))), dc.const(np.zeros((1, 2))))


# -- similarity logits ------------------------------------------------------------

def test_logits_identity_case():
    G = similarity_logits(dc.const(np.eye(2)), dc.const(np.eye(2)), 0.0).value
    np.testing.assert_allclose(G, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)


def test_logits_temperature_scaling(rng):
    Zm, Zb = dc.const(rng.standard_normal((4, 3))), dc.const(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(similarity_logits(Zm, Zb, 1.0).value,
                               math.e * similarity_logits(Zm, Zb, 0.0).value, rtol=1e-14, atol=0)


def test_logits_match_scalar_loop(rng):
    Zm, Zb = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(similarity_logits(dc.const(Zm), dc.const(Zb), 0.7).value,
                               loop_logits(Zm, Zb, 0.7), rtol=0, atol=1e-12)


def test_logits_zero_norm():
    with pytest.raises(DegenerateError):
        similarity_logits(dc.const(np.zeros((2, 2))), dc.const(np.ones((2, 2))), 1.0)


@given(st.integers(0, 2**31), st.floats(0.0, 10.0))
def test_logits_bounded(seed, tau):
    r = np.random.default_rng(seed)
    G = similarity_logits(dc.const(r.standard_normal((4, 3))), dc.const(r.standard_normal((4, 3))), tau).value
    assert np.max(np.abs(G)) <= math.exp(tau) * (1 + 1e-12)


# -- target matrix -----------------------------------------------------------------

def test_target_single_class():
    T = build_target_matrix([2, 2, 2, 2], range(4))
    np.testing.assert_allclose(T, np.full((4, 4), 0.25))


def test_target_two_labels():
    np.testing.assert_array_equal(build_target_matrix([0, 1], [0, 1]), np.eye(2))


def test_target_hand_computed():
    T = build_target_matrix([0, 0, 1], [0, 1, 2])
    np.testing.assert_allclose(T[0], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(T[2], [0.0, 0.0, 1.0])


@given(st.lists(st.integers(0, 3), min_size=2, max_size=12), st.integers(0, 2**31))
def test_target_rows_are_distributions(labels, seed):
    r = np.random.default_rng(seed)
    train = [i for i in range(len(labels)) if r.random() < 0.5]
    T = build_target_matrix(labels, train)
    sums = T.sum(axis=1)
    for i, s in enumerate(sums):
        assert s == pytest.approx(1.0) if i in train else s == 0.0
    assert np.all(T[:, [i for i in range(len(labels)) if i not in train]] == 0.0)


# -- contrastive loss --------------------------------------------------------------

def test_contrastive_single_sample():
    assert contrastive_loss([dc.const([[3.0]])], np.array([[1.0]])).item() == 0.0


def test_contrastive_no_labels(rng):
    G = dc.const(rng.standard_normal((4, 4)))
    assert contrastive_loss([G], np.zeros((4, 4))).item() == 0.0


def test_contrastive_matches_scalar_loop(rng):
    gammas = [rng.standard_normal((4, 4)) * 3 for _ in range(2)]
    T = build_target_matrix([0, 1, 0, 1], [0, 1, 3])
    got = contrastive_loss([dc.const(g) for g in gammas], T).item()
    assert abs(got - loop_contrastive(gammas, T)) < 1e-10


def test_contrastive_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        contrastive_loss([dc.const(np.ones((3, 3)))], np.eye(2))


def test_contrastive_stable_at_large_logits(rng):
    G = dc.const(rng.standard_normal((5, 5)) * math.exp(10))
    loss = contrastive_loss([G], build_target_matrix([0, 1, 0, 1, 2], range(5))).item()
    assert np.isfinite(loss)


@given(st.integers(0, 2**31))
def test_contrastive_nonnegative(seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, 6)
    T = build_target_matrix(labels, np.flatnonzero(r.random(6) < 0.6))
    gammas = [dc.const(r.standard_normal((6, 6)) * 5) for _ in range(2)]
    assert contrastive_loss(gammas, T).item() >= 0.0


def test_symmetric_logits_give_equal_terms(rng):
    A = rng.standard_normal((5, 5))
    G = dc.const(A + A.T)
    T = dc.const(build_target_matrix([0, 1, 1, 0, 2], range(5)))
    first = dc.sum_all(dc.mul(T, dc.row_log_softmax(G))).item()
    second = dc.sum_all(dc.mul(T, dc.row_log_softmax(dc.transpose(G)))).item()
    assert abs(first - second) < 1e-10


def test_encoder_gradients_pass_grad_check():
    r = np.random.default_rng(2)
    V = [r.standard_normal((6, 5)), r.standard_normal((6, 3))]
    T = build_target_matrix([0, 1, 2, 0, 1, 2], [0, 1, 2, 3])
    params = {"W0": r.standard_normal((5, 4)), "b0": r.standard_normal((1, 4)),
              "W1": r.standard_normal((3, 4)), "b1": r.standard_normal((1, 4))}

    def f(p):
        Z = [encode(V[0], p["W0"], p["b0"]), encode(V[1], p["W1"], p["b1"])]
        return alignment_loss(Z, T, 2.0)

    assert dc.grad_check(f, params).max_rel_error < 1e-5
