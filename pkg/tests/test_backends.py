"""The numba and numpy kernel twins must implement the same math."""

import numpy as np
import pytest

from nowcast import backend


@pytest.fixture
def restore_backend():
    old = backend.backend_name()
    yield
    backend.set_backend(old)


def brute_gather(xp, w, s):
    B, C, Hp, Wp = xp.shape
    O, _, kh, kw = w.shape
    ho, wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    y = np.zeros((B, O, ho, wo))
    for b in range(B):
        for o in range(O):
            for m in range(ho):
                for n in range(wo):
                    y[b, o, m, n] = np.sum(w[o] * xp[b, :, m * s:m * s + kh, n * s:n * s + kw])
    return y


@pytest.mark.parametrize("stride,kernel", [(1, 1), (1, 3), (1, 5), (2, 3), (2, 4)])
def test_gather_matches_bruteforce(restore_backend, stride, kernel):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 3, 11, 9))
    w = rng.standard_normal((4, 3, kernel, kernel))
    ref = brute_gather(xp, w, stride)
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        got = backend.conv_gather(xp, w, stride)
        np.testing.assert_allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("stride,kernel", [(1, 3), (2, 3), (2, 4)])
def test_scatter_is_gather_adjoint(restore_backend, stride, kernel):
    rng = np.random.default_rng(1)
    xp = rng.standard_normal((2, 3, 12, 10))
    w = rng.standard_normal((4, 3, kernel, kernel))
    y = brute_gather(xp, w, stride)
    dy = rng.standard_normal(y.shape)
    lhs = np.sum(y * dy)
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        z = backend.conv_scatter(dy, w, stride, 12, 10)
        assert abs(lhs - np.sum(xp * z)) < 1e-9


@pytest.mark.parametrize("stride", [1, 2])
def test_wgrad_is_derivative(restore_backend, stride):
    rng = np.random.default_rng(2)
    k = 3
    xp = rng.standard_normal((2, 3, 12, 10))
    w = rng.standard_normal((4, 3, k, k))
    dy = rng.standard_normal(brute_gather(xp, w, stride).shape)
    direction = rng.standard_normal(w.shape)
    eps = 1e-6
    fp = np.sum(brute_gather(xp, w + eps * direction, stride) * dy)
    fm = np.sum(brute_gather(xp, w - eps * direction, stride) * dy)
    fd = (fp - fm) / (2 * eps)
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        dw = backend.conv_wgrad(dy, xp, stride, k, k)
        assert abs(np.sum(dw * direction) - fd) < 1e-6 * max(1.0, abs(fd))


def test_backends_agree_on_random_inputs(restore_backend):
    rng = np.random.default_rng(3)
    xp = rng.standard_normal((2, 4, 10, 10))
    w = rng.standard_normal((5, 4, 3, 3))
    dy = rng.standard_normal((2, 5, 4, 4))
    outs = {}
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        outs[name] = (backend.conv_gather(xp, w, 2),
                      backend.conv_scatter(dy, w, 2, 10, 10),
                      backend.conv_wgrad(dy, xp, 2, 3, 3))
    for a, b in zip(outs["numpy"], outs["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_warp_identity_and_integer_shift(restore_backend):
    rng = np.random.default_rng(4)
    field = rng.random((8, 8))
    yy, xx = np.mgrid[0:8, 0:8].astype(float)
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        assert np.array_equal(backend.warp_bilinear(field, xx, yy), field)
        shifted = backend.warp_bilinear(field, xx - 2, yy + 1)
        ref = np.zeros_like(field)
        ref[:7, 2:] = field[1:, :6]
        np.testing.assert_allclose(shifted, ref, atol=0)


def test_warp_fractional_matches_manual(restore_backend):
    field = np.zeros((5, 5))
    field[2, 2] = 1.0
    yy, xx = np.mgrid[0:5, 0:5].astype(float)
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        out = backend.warp_bilinear(field, xx - 0.5, yy)
        # unit mass splits between columns 2 and 3 of row 2
        assert out[2, 2] == pytest.approx(0.5)
        assert out[2, 3] == pytest.approx(0.5)
        assert np.sum(out) == pytest.approx(1.0)


def test_env_flag_selects_backend(monkeypatch):
    monkeypatch.setenv("NOWCAST_BACKEND", "numpy")
    name, mod = backend._initial_choice()
    assert name == "numpy"
    monkeypatch.setenv("NOWCAST_BACKEND", "numba")
    name, mod = backend._initial_choice()
    assert name == "numba"
    monkeypatch.setenv("NOWCAST_BACKEND", "bogus")
    with pytest.raises(ValueError):
        backend._initial_choice()
