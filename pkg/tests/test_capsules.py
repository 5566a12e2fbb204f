import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsem import tensor as T
from capsem.capsules import (CapsuleBank, DenseCapsParams, dense_capsules, dynamic_routing, predict,
                             primary_capsules, squash)
from capsem.layers import ConfigError, ConvParams
from capsem.tensor import ShapeError, Tensor, grad_check


def squash_oracle(s):
    n2 = sum(v * v for v in s)
    if n2 == 0:
        return [0.0] * len(s)
    k = n2 / (1 + n2) / math.sqrt(n2)
    return [k * v for v in s]


def predict_oracle(u, W):
    n_in, n_out = W.shape[:2]
    return np.array([[W[i, j] @ u[i] for j in range(n_out)] for i in range(n_in)])


def routing_oracle(u_hat, iters):
    """Scalar-loop dynamic routing; returns outputs and couplings per iteration."""
    n_in, n_out, dim = u_hat.shape
    b = [[0.0] * n_out for _ in range(n_in)]
    history = []
    v = None
    for r in range(iters):
        c = []
        for i in range(n_in):
            m = max(b[i])
            e = [math.exp(x - m) for x in b[i]]
            z = sum(e)
            c.append([x / z for x in e])
        history.append(c)
        v = []
        for j in range(n_out):
            s = [sum(c[i][j] * u_hat[i, j, d] for i in range(n_in)) for d in range(dim)]
            v.append(squash_oracle(s))
        if r < iters - 1:
            for i in range(n_in):
                for j in range(n_out):
                    b[i][j] += sum(u_hat[i, j, d] * v[j][d] for d in range(dim))
    return np.array(v), np.array(history)


def test_squash_examples():
    assert np.array_equal(squash(Tensor([0.0, 0.0])).data, [0.0, 0.0])
    np.testing.assert_allclose(squash(Tensor([1.0, 0.0])).data, [0.5, 0.0], rtol=1e-15)
    out = squash(Tensor([1000.0, 0.0])).data
    assert 0.999998 < out[0] < 1.0 and out[1] == 0.0


def test_squash_gradient(rng):
    for _ in range(100):
        x = rng.normal(size=6)
        assert grad_check(lambda t: T.norm2(squash(t)), x) <= 1e-5
    z = Tensor(np.zeros(3), requires_grad=True)
    T.backward(squash(z).sum())
    assert np.isfinite(z.grad).all()


@given(arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)))
def test_squash_norm_below_one_and_parallel(s):
    v = squash(Tensor(s)).data
    assert np.linalg.norm(v) < 1
    n = np.linalg.norm(s)
    if n > 1e-150:
        assert abs(v @ s / (np.linalg.norm(v) * n) - 1) <= 1e-12


def test_squash_properties_over_many_vectors(rng):
    s = rng.normal(size=(10_000, 8)) * rng.lognormal(0, 2, size=(10_000, 1))
    v = squash(Tensor(s)).data
    nv, ns = np.linalg.norm(v, axis=1), np.linalg.norm(s, axis=1)
    assert (nv < 1).all()
    order = np.argsort(ns)
    assert (np.diff(nv[order]) >= 0).all()
    cos = (v * s).sum(axis=1) / (nv * ns)
    assert np.abs(cos - 1).max() <= 1e-12
    np.testing.assert_allclose(nv, ns ** 2 / (1 + ns ** 2), rtol=1e-12)


def test_predict_examples(rng):
    u = rng.normal(size=(3, 4))
    W = np.broadcast_to(np.eye(4), (3, 2, 4, 4)).copy()
    out = predict(CapsuleBank(Tensor(u)), DenseCapsParams(Tensor(W))).data
    for j in range(2):
        np.testing.assert_array_equal(out[:, j], u)
    assert not predict(Tensor(u), DenseCapsParams(Tensor(np.zeros((3, 2, 5, 4))))).data.any()


def test_predict_matches_per_pair_oracle(rng):
    u, W = rng.normal(size=(3, 4)), rng.normal(size=(3, 2, 5, 4))
    np.testing.assert_allclose(predict(Tensor(u), DenseCapsParams(Tensor(W))).data, predict_oracle(u, W),
                               rtol=0, atol=1e-12)
    ub = rng.normal(size=(2, 3, 4))
    batched = predict(Tensor(ub), DenseCapsParams(Tensor(W))).data
    for k in range(2):
        np.testing.assert_allclose(batched[k], predict_oracle(ub[k], W), rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        predict(Tensor(rng.normal(size=(3, 5))), DenseCapsParams(Tensor(W)))


def test_routing_single_pair_is_squash(rng):
    u_hat = rng.normal(size=(1, 1, 5))
    bank = dynamic_routing(Tensor(u_hat), 3)
    np.testing.assert_allclose(bank.poses.data[0], squash_oracle(list(u_hat[0, 0])), rtol=1e-14)
    assert all(np.array_equal(c, [[1.0]]) for c in bank.routing.history)


def test_routing_identical_rows_keep_couplings_uniform(rng):
    row = rng.normal(size=(1, 3, 4))
    u_hat = np.concatenate([row, row])
    bank = dynamic_routing(Tensor(u_hat), 3)
    for c in bank.routing.history:
        np.testing.assert_array_equal(c[0], c[1])


def test_routing_matches_scalar_oracle(rng):
    u_hat = rng.normal(size=(4, 3, 5))
    bank = dynamic_routing(Tensor(u_hat), 3)
    v, hist = routing_oracle(u_hat, 3)
    np.testing.assert_allclose(bank.poses.data, v, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.array(bank.routing.history), hist, rtol=0, atol=1e-12)


def test_routing_couplings_sum_to_one(rng):
    u_hat = rng.normal(size=(30, 4, 6)) * 3
    bank = dynamic_routing(Tensor(u_hat), 5)
    assert len(bank.routing.history) == 5
    for c in bank.routing.history:
        assert np.abs(c.sum(axis=-1) - 1).max() <= 1e-12 and (c >= 0).all()


def test_single_iteration_is_uniform_aggregation(rng):
    u_hat = rng.normal(size=(6, 4, 3))
    bank = dynamic_routing(Tensor(u_hat), 1)
    expect = np.array([squash_oracle(list(u_hat[:, j].sum(axis=0) / 4)) for j in range(4)])
    np.testing.assert_allclose(bank.poses.data, expect, rtol=0, atol=1e-12)


def test_routing_is_permutation_invariant_over_inputs(rng):
    u_hat = rng.normal(size=(7, 3, 4))
    perm = rng.permutation(7)
    a = dynamic_routing(Tensor(u_hat), 3).poses.data
    b = dynamic_routing(Tensor(u_hat[perm]), 3).poses.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_routing_needs_an_iteration(rng):
    with pytest.raises(ConfigError):
        dynamic_routing(Tensor(rng.normal(size=(2, 2, 2))), 0)
    with pytest.raises(ConfigError):
        DenseCapsParams(Tensor(np.zeros((2, 2, 2, 2))), routing_iters=0)


def test_primary_capsule_shapes():
    p = ConvParams(Tensor(np.zeros((8, 2, 3, 3))), Tensor(np.zeros(8)))
    bank = primary_capsules(Tensor(np.ones((2, 3, 3))), p, 8)
    assert (bank.count, bank.dim) == (1, 8)
    assert not bank.poses.data.any()
    with pytest.raises(ConfigError):
        primary_capsules(Tensor(np.ones((2, 3, 3))), p, 3)


def test_primary_capsule_grouping(rng):
    p = ConvParams.init(2, 8, 3, 1, 0, rng)
    x = Tensor(rng.normal(size=(2, 5, 5)))
    from capsem.layers import conv2d
    raw = conv2d(x, p).data  # [8, 3, 3]
    bank = primary_capsules(x, p, 4)
    assert (bank.count, bank.dim) == (18, 4)
    # capsule (type t, row r, col c) holds channels 4t..4t+3 at that position
    for t in range(2):
        for r in range(3):
            for c in range(3):
                idx = t * 9 + r * 3 + c
                np.testing.assert_allclose(bank.poses.data[idx], squash_oracle(list(raw[4 * t:4 * t + 4, r, c])),
                                           rtol=1e-13)


def test_dense_capsules_compose_oracles(rng):
    u, W = rng.normal(size=(5, 4)), rng.normal(size=(5, 3, 6, 4)) * 0.5
    bank = dense_capsules(CapsuleBank(Tensor(u)), DenseCapsParams(Tensor(W), 3))
    v, _ = routing_oracle(predict_oracle(u, W), 3)
    np.testing.assert_allclose(bank.poses.data, v, rtol=0, atol=1e-12)
    assert (bank.count, bank.dim) == (3, 6)


def test_dense_capsules_identity_single_pair(rng):
    u = rng.normal(size=(1, 4))
    bank = dense_capsules(CapsuleBank(Tensor(u)), DenseCapsParams(Tensor(np.eye(4)[None, None]), 3))
    np.testing.assert_allclose(bank.poses.data[0], squash_oracle(list(u[0])), rtol=1e-14)


@pytest.mark.parametrize("detach", [False, True])
def test_dense_capsule_gradients(rng, detach):
    u, W = rng.normal(size=(6, 4)), rng.normal(size=(6, 3, 5, 4)) * 0.5
    g = Tensor(rng.normal(size=(3, 5)))

    def loss_w(w):
        return (dense_capsules(CapsuleBank(Tensor(u)), DenseCapsParams(w, 3, detach)).poses * g).sum()

    def loss_u(x):
        return (dense_capsules(CapsuleBank(x), DenseCapsParams(Tensor(W), 3, detach)).poses * g).sum()

    if detach:
        # detached agreement leaves the forward value unchanged
        a = dense_capsules(CapsuleBank(Tensor(u)), DenseCapsParams(Tensor(W), 3, True)).poses.data
        b = dense_capsules(CapsuleBank(Tensor(u)), DenseCapsParams(Tensor(W), 3, False)).poses.data
        np.testing.assert_array_equal(a, b)
    else:
        assert grad_check(loss_w, W) <= 1e-4
        assert grad_check(loss_u, u) <= 1e-4
