import numpy as np
import pytest
from conftest import random_kernel
from hypothesis import given, settings
from hypothesis import strategies as st
from test_reconstructors import random_cnn

from advdeblur import cnn
from advdeblur.grad import Targeted, Untargeted, backward, loss_and_grad, vjp
from advdeblur.reconstructors import Reconstructor, UnrolledConfig, WienerConfig, forward, reconstruct

KINDS = ["wiener", "unrolled", "cnn"]


def make_recon(kind, rng, channels=1):
    if kind == "wiener":
        return Reconstructor(WienerConfig(), random_kernel(rng, 3))
    if kind == "unrolled":
        return Reconstructor(UnrolledConfig(steps=10), random_kernel(rng, 3))
    return Reconstructor(random_cnn(rng, channels, hidden=6))


def make_loss(mode, r, y, rng):
    if mode == "untargeted":
        return Untargeted(reconstruct(r, y))
    return Targeted(rng.uniform(size=y.shape))


def activation_pattern(r, z):
    """Leaky-ReLU branch taken by every hidden unit, or None for smooth kinds."""
    if r.kind != "cnn":
        return None
    _, cache = cnn.forward(r.config, z[None])
    return [s > 0.5 for s in cache[1]]


def same_piece(r, points):
    pats = [activation_pattern(r, z) for z in points]
    if pats[0] is None:
        return True
    return all(all(np.array_equal(a, b) for a, b in zip(pats[0], p)) for p in pats[1:])


def fd_check(f, grad, x, rng, r=None, offset=0.0, coords=20, h=1e-4):
    """Central differences of ``f`` along random coordinates.

    For the piecewise-linear CNN a coordinate is only used when ``x`` and
    both probe points lie on one linear piece; otherwise another is drawn.
    """
    checked = 0
    for _ in range(50 * coords):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        e = np.zeros_like(x)
        e[idx] = h
        if r is not None and not same_piece(r, [offset + x, offset + x + e, offset + x - e]):
            continue
        fd = (f(x + e) - f(x - e)) / (2 * h)
        scale = max(abs(fd), abs(grad[idx]), 1e-6)
        assert abs(grad[idx] - fd) <= 1e-4 * scale, (idx, grad[idx], fd)
        checked += 1
        if checked == coords:
            return
    pytest.fail(f"only {checked} of {coords} coordinates were away from activation kinks")


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
def test_loss_gradient_finite_differences(kind, mode, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    loss = make_loss(mode, r, y, rng)
    delta = rng.uniform(-0.03, 0.03, size=y.shape)
    _, g = loss_and_grad(r, y, delta, loss)
    fd_check(lambda d: loss_and_grad(r, y, d, loss)[0], g, delta, rng, r=r, offset=y)


@pytest.mark.parametrize("kind", KINDS)
def test_vjp_finite_differences(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    u = rng.normal(size=y.shape)
    g = vjp(r, y, u)
    fd_check(lambda z: float(np.vdot(reconstruct(r, z), u)), g, y, rng, r=r)


@pytest.mark.parametrize("kind", KINDS)
def test_vjp_three_channels(kind, rng):
    r = make_recon(kind, rng, channels=3)
    y = rng.uniform(size=(6, 6, 3))
    u = rng.normal(size=y.shape)
    fd_check(lambda z: float(np.vdot(reconstruct(r, z), u)), vjp(r, y, u), y, rng, r=r, coords=10)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_cotangent(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    np.testing.assert_array_equal(vjp(r, y, np.zeros_like(y)), 0.0)


def test_wiener_vjp_independent_of_y(rng):
    r = make_recon("wiener", rng)
    u = rng.normal(size=(8, 8, 1))
    a = vjp(r, rng.uniform(size=u.shape), u)
    b = vjp(r, rng.uniform(size=u.shape), u)
    np.testing.assert_array_equal(a, b)


def test_wiener_vjp_is_dense_transpose(rng):
    r = make_recon("wiener", rng)
    n = 36
    basis = np.eye(n).reshape(n, 6, 6, 1)
    J = np.stack([reconstruct(r, e).ravel() for e in basis], axis=1)
    u = rng.normal(size=(6, 6, 1))
    np.testing.assert_allclose(vjp(r, np.zeros_like(u), u).ravel(), J.T @ u.ravel(), atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_shape_mismatch(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    with pytest.raises(ValueError):
        vjp(r, y, np.zeros((8, 7, 1)))
    with pytest.raises(ValueError):
        loss_and_grad(r, y, np.zeros_like(y), Targeted(np.zeros((4, 4, 1))))


@pytest.mark.parametrize("kind", ["unrolled", "cnn"])
def test_missing_cache(kind, rng):
    with pytest.raises(ValueError, match="cache"):
        backward(make_recon(kind, rng), None, np.zeros((8, 8, 1)))


@pytest.mark.parametrize("kind", KINDS)
def test_untargeted_zero_at_origin(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    value, g = loss_and_grad(r, y, np.zeros_like(y), Untargeted(reconstruct(r, y)))
    assert value == 0.0
    np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_targeted_at_own_output(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    value, g = loss_and_grad(r, y, np.zeros_like(y), Targeted(reconstruct(r, y)))
    assert value == 0.0
    np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_is_vjp_of_residual(kind, rng):
    r = make_recon(kind, rng)
    y = rng.uniform(size=(8, 8, 1))
    t = rng.uniform(size=y.shape)
    _, g = loss_and_grad(r, y, np.zeros_like(y), Targeted(t))
    expected = vjp(r, y, reconstruct(r, y) - t)
    assert np.linalg.norm(g) == np.linalg.norm(expected)


def test_unrolled_cache_reuse_matches_fresh_forward(rng):
    r = make_recon("unrolled", rng)
    y = rng.uniform(size=(8, 8, 1))
    u = rng.normal(size=y.shape)
    _, cache = forward(r, y)
    np.testing.assert_array_equal(backward(r, cache, u), vjp(r, y, u))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_wiener_targeted_convex(seed):
    rng = np.random.default_rng(seed)
    r = make_recon("wiener", rng)
    y = rng.uniform(size=(6, 6, 1))
    loss = Targeted(rng.uniform(size=y.shape))
    d1, d2 = rng.uniform(-0.1, 0.1, size=(2, 6, 6, 1))
    mid = loss_and_grad(r, y, 0.5 * d1 + 0.5 * d2, loss)[0]
    assert mid <= 0.5 * loss_and_grad(r, y, d1, loss)[0] + 0.5 * loss_and_grad(r, y, d2, loss)[0] + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(KINDS))
def test_untargeted_non_positive(seed, kind):
    rng = np.random.default_rng(seed)
    r = make_recon(kind, rng)
    y = rng.uniform(size=(6, 6, 1))
    value, _ = loss_and_grad(r, y, rng.uniform(-0.05, 0.05, size=y.shape), Untargeted(reconstruct(r, y)))
    assert value <= 0.0


def test_unknown_loss_kind(rng):
    r = make_recon("wiener", rng)
    with pytest.raises(TypeError):
        loss_and_grad(r, np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), object())
