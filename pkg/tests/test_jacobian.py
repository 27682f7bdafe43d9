import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RUNS, rel_err
from uapjr.errors import DegenerateInputError
from uapjr.jacobian import (cosine_similarity, dominant_singular_direction, frobenius_sq_estimate,
                            frobenius_sq_exact, jacobian_exact, jacobians, pairwise_similarity,
                            prop1_bound_check, stacked_bound, stacked_bound_check, stacked_jacobian)
from uapjr.linalg import RngStream, svd
from uapjr.net import Dense, Network, load_checkpoint


def test_jacobian_matches_autograd_functional(tiny_net):
    x = torch.from_numpy(RngStream(0).normal((1, 8, 8)))
    ref = torch.autograd.functional.jacobian(lambda z: tiny_net(z.unsqueeze(0))[0], x)
    j = jacobian_exact(tiny_net, x)
    assert j.matrix.shape == (10, 64)
    np.testing.assert_allclose(j.matrix, ref.reshape(10, -1).numpy(), rtol=1e-12, atol=1e-12)


def test_jacobian_linearisation(lenet64):
    rng = RngStream(1)
    x = torch.from_numpy(rng.uniform(size=(1, 1, 28, 28)))
    d = torch.from_numpy(rng.child("d").normal((1, 1, 28, 28)))
    j = jacobians(lenet64, x)[0]
    h = 1e-6
    with torch.no_grad():
        diff = (lenet64(x + h * d) - lenet64(x)).numpy()[0]
    assert rel_err(diff, h * j @ d.numpy().reshape(-1)) <= 1e-6


def test_linear_model_jacobian_is_the_weight():
    w = torch.from_numpy(RngStream(2).normal((10, 16)))
    net = Network([Dense(10)], (1, 4, 4), 10, [{"weight": w, "bias": torch.zeros(10)}], dtype=torch.float64)
    js = jacobians(net, torch.zeros(3, 1, 4, 4))
    for j in js:
        np.testing.assert_array_equal(j, w.numpy())


def test_projection_estimator_is_unbiased(lenet64):
    x = torch.from_numpy(RngStream(3).uniform(size=(1, 1, 28, 28)))
    exact = frobenius_sq_exact(jacobian_exact(lenet64, x))
    est = frobenius_sq_estimate(lenet64, x, n_proj=10_000, rng=RngStream(4))
    assert abs(est - exact) <= 0.02 * exact


def test_projection_estimator_with_orthonormal_basis_is_exact(tiny_net):
    x = torch.from_numpy(RngStream(5).normal((1, 8, 8)))
    exact = frobenius_sq_exact(jacobian_exact(tiny_net, x))
    q, _ = np.linalg.qr(RngStream(6).normal((10, 10)))
    est = frobenius_sq_estimate(tiny_net, x, n_proj=10, rng=None, vectors=q.T)
    assert est == pytest.approx(exact, rel=1e-12)
    with pytest.raises(ValueError):
        frobenius_sq_estimate(tiny_net, x, n_proj=0, rng=RngStream(0))


def test_stacked_jacobian_additivity(tiny_net):
    xs = torch.from_numpy(RngStream(7).normal((5, 1, 8, 8)))
    jbar = stacked_jacobian(tiny_net, xs)
    assert jbar.matrix.shape == (50, 64)
    total = sum(frobenius_sq_exact(jbar.block(i)) for i in range(5))
    assert frobenius_sq_exact(jbar.matrix) == pytest.approx(total, rel=1e-12)
    for i in range(5):
        np.testing.assert_array_equal(jbar.block(i), jacobians(tiny_net, xs[i:i + 1])[0])


def test_dominant_direction_matches_svd(tiny_net):
    jbar = stacked_jacobian(tiny_net, torch.from_numpy(RngStream(8).normal((4, 1, 8, 8))))
    v, value = dominant_singular_direction(jbar, p=2, rng=RngStream(0))
    _, s, vs = svd(jbar.matrix)
    assert value == pytest.approx(s[0], rel=1e-6)
    assert abs(abs(v @ vs[:, 0]) - 1) < 1e-6
    vinf, vinf_value = dominant_singular_direction(jbar, p=np.inf, rng=RngStream(0))
    assert set(np.unique(vinf)) <= {-1.0, 1.0}
    # an l-inf corner is at least as good as the 2-norm direction rescaled onto the ball
    assert vinf_value >= np.linalg.norm(jbar.matrix @ (v / np.abs(v).max())) - 1e-9
    with pytest.raises(DegenerateInputError):
        dominant_singular_direction(np.zeros((4, 3)))


# Cauchy-Schwarz on Frobenius inner products of Jacobian-shaped matrices

def test_prop1_random_pairs():
    rng = RngStream(9)
    for i in range(1000):
        a, b = rng.child(i, "a").normal((10, 20)), rng.child(i, "b").normal((10, 20))
        c = prop1_bound_check(a, b)
        assert c.lhs <= c.rhs + 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_prop1_equality_scaled_copy(s, seed):
    a = RngStream(seed).normal((10, 12))
    assert prop1_bound_check(a, s * a).ratio == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-2, 1e2), st.integers(0, 2**32 - 1))
def test_prop1_equality_shared_singular_vectors(c, seed):
    rng = RngStream(seed)
    u, _ = np.linalg.qr(rng.normal((10, 10)))
    v, _ = np.linalg.qr(rng.child("v").normal((12, 10)))
    spec = np.sort(rng.child("s").uniform(0.1, 5, 10))[::-1]
    a = u @ np.diag(spec) @ v.T
    b = u @ np.diag(c * spec) @ v.T
    assert prop1_bound_check(a, b).ratio == pytest.approx(1.0, abs=1e-8)
    # same singular vectors, non-proportional spectrum: strictly below 1
    b2 = u @ np.diag(spec[::-1]) @ v.T
    assert prop1_bound_check(a, b2).ratio < 1 - 1e-6


def test_cosine_similarity_degenerate_and_bounds():
    z = np.zeros((10, 4))
    assert cosine_similarity(z, np.ones((10, 4))) == (0.0, True)
    a = RngStream(10).normal((10, 4))
    assert cosine_similarity(a, -a).value == pytest.approx(-1.0)
    assert cosine_similarity(a, a) == (pytest.approx(1.0), False)


# stacked Frobenius bound

def _trained_or_random():
    ckpt = RUNS / "mnist" / "standard-s0" / "checkpoint.npz"
    if ckpt.exists():
        return load_checkpoint(ckpt)[0].to(torch.float64)
    return None


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_stacked_bound_holds(n, lenet64):
    nets = [lenet64] + [m for m in [_trained_or_random()] if m is not None]
    for net in nets:
        xs = torch.from_numpy(RngStream(n).uniform(size=(n, 1, 28, 28)))
        lhs, rhs = stacked_bound_check(net, xs)
        assert lhs <= rhs * (1 + 1e-10)
        if n == 1:
            assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_stacked_bound_equality_for_duplicated_inputs(n, lenet64):
    x = torch.from_numpy(RngStream(20).uniform(size=(1, 1, 28, 28)))
    lhs, rhs = stacked_bound_check(lenet64, x.repeat(n, 1, 1, 1))
    # ||J_bar||_F = sqrt(n) ||J||_F while the bound is n ||J||_F
    single = np.sqrt(frobenius_sq_exact(jacobian_exact(lenet64, x)))
    assert lhs == pytest.approx(np.sqrt(n) * single, rel=1e-10)
    assert rhs == pytest.approx(n * single, rel=1e-10)


def test_stacked_bound_equality_for_identical_jacobians():
    j = RngStream(21).normal((10, 30))
    lhs, rhs = stacked_bound(np.stack([j, j, j]))
    assert lhs ** 2 == pytest.approx(3 * np.sum(j * j), rel=1e-12)
    assert rhs ** 2 == pytest.approx(9 * np.sum(j * j), rel=1e-12)


# pairwise similarity histogram

def _brute(js, mode):
    vals = []
    for i in range(len(js)):
        for k in range(len(js)):
            if (mode == "ordered" and i != k) or (mode == "unique" and i < k) or mode == "all":
                vals.append(cosine_similarity(js[i], js[k]).value)
    return np.array(vals)


@pytest.mark.parametrize("mode", ["ordered", "unique", "all"])
def test_pairwise_similarity_matches_brute_force(mode):
    rng = RngStream(22)
    base = rng.normal((10, 8))
    js = np.stack([base + 0.8 * rng.child(i).normal((10, 8)) for i in range(7)] + [np.zeros((10, 8))])
    hist = pairwise_similarity(None, jacobian_stack=js, mode=mode, tile=3)
    ref = _brute(js[:7], mode)
    assert hist.count == len(ref) == {"ordered": 42, "unique": 21, "all": 49}[mode]
    assert hist.degenerate_count == 1
    assert hist.median == pytest.approx(np.median(ref), abs=1e-12)
    assert hist.mean == pytest.approx(ref.mean(), abs=1e-12)
    assert hist.counts.sum() == hist.count
    np.testing.assert_allclose(np.diff(hist.bin_edges), 0.02, atol=1e-12)
    np.testing.assert_array_equal(hist.counts, np.histogram(ref, bins=hist.bin_edges)[0])


def test_pairwise_similarity_of_a_network(tiny_net):
    xs = torch.from_numpy(RngStream(23).normal((6, 1, 8, 8)))
    hist = pairwise_similarity(tiny_net, xs)
    ref = _brute(jacobians(tiny_net, xs), "ordered")
    assert hist.median == pytest.approx(np.median(ref), abs=1e-12)
    with pytest.raises(ValueError):
        pairwise_similarity(tiny_net, xs, mode="bogus")
