import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oriole import imgmath
from oriole.errors import DimensionError, InputError

from reference import central_diff, dssim_loops, rel_err

CFG = imgmath.DEFAULT_DSSIM

images16 = arrays(np.float64, (16, 16), elements=st.floats(0, 1, allow_nan=False))


def test_apply_zero_delta_is_identity():
    x = np.random.default_rng(0).random((32, 32))
    np.testing.assert_array_equal(imgmath.apply_perturbation(x, np.zeros_like(x)), x)


def test_apply_clamps_at_one():
    out = imgmath.apply_perturbation(np.full((8, 8), 0.9), np.full((8, 8), 0.5))
    np.testing.assert_array_equal(out, np.ones((8, 8)))


def test_apply_checkerboard():
    checker = np.indices((8, 8)).sum(axis=0) % 2
    delta = np.where(checker, 0.1, -0.1)
    out = imgmath.apply_perturbation(np.full((8, 8), 0.5), delta)
    np.testing.assert_allclose(out, np.where(checker, 0.6, 0.4), atol=1e-15)


def test_apply_shape_mismatch():
    with pytest.raises(DimensionError):
        imgmath.apply_perturbation(np.zeros((4, 4)), np.zeros((4, 5)))


@given(images16, arrays(np.float64, (16, 16), elements=st.floats(-2, 2, allow_nan=False)))
def test_apply_output_in_range(x, d):
    out = imgmath.apply_perturbation(x, d)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_dssim_identical_is_zero():
    x = np.random.default_rng(1).random((32, 32))
    assert imgmath.dssim(x, x) == 0.0


def test_dssim_black_white():
    cfg = imgmath.DssimConfig(window=8, stride=4, c1=1e-4, c2=9e-4)
    got = imgmath.dssim(np.zeros((16, 16)), np.ones((16, 16)), cfg)
    expected = (1 - 1e-4 / (1 + 1e-4)) / 2
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(0.49995, abs=1e-8)


def test_dssim_matches_loop_reference():
    gen = np.random.default_rng(2)
    for _ in range(20):
        a, b = gen.random((16, 16)), gen.random((16, 16))
        assert abs(imgmath.dssim(a, b) - dssim_loops(a, b)) <= 1e-10


def test_dssim_batched_matches_single():
    gen = np.random.default_rng(3)
    a, b = gen.random((5, 32, 32)), gen.random((5, 32, 32))
    batched = imgmath.dssim(a, b)
    assert batched.shape == (5,)
    for i in range(5):
        assert batched[i] == imgmath.dssim(a[i], b[i])


def test_dssim_errors():
    with pytest.raises(DimensionError):
        imgmath.dssim(np.zeros((16, 16)), np.zeros((16, 15)))
    with pytest.raises(DimensionError):
        imgmath.dssim(np.zeros((6, 6)), np.zeros((6, 6)))
    with pytest.raises(InputError):
        imgmath.DssimConfig(window=1)
    with pytest.raises(InputError):
        imgmath.DssimConfig(c1=0.0)


@settings(max_examples=50, deadline=None)
@given(images16, images16)
def test_dssim_symmetric_and_bounded(a, b):
    d = imgmath.dssim(a, b)
    assert d == pytest.approx(imgmath.dssim(b, a), abs=1e-15)
    assert 0.0 <= d <= 1.0
    assert imgmath.dssim(a, a) == pytest.approx(0.0, abs=1e-15)


def _dssim_fd_check(a, b, pixels):
    grad = imgmath.dssim_gradient(a, b)
    f = lambda bb: imgmath.dssim(a, bb)  # noqa: E731
    for p in pixels:
        fd = central_diff(f, b, p, h=1e-5)
        assert rel_err(grad[p], fd, floor=1e-9) <= 1e-4, (p, grad[p], fd)


def test_dssim_gradient_random_pair():
    gen = np.random.default_rng(4)
    a, b = gen.random((32, 32)), gen.random((32, 32))
    pixels = [tuple(p) for p in gen.integers(0, 32, size=(10, 2))]
    _dssim_fd_check(a, b, pixels)


def test_dssim_gradient_at_equality():
    a = np.random.default_rng(5).random((16, 16))
    grad = imgmath.dssim_gradient(a, a)
    # DSSIM is minimal at b = a, so the analytic gradient vanishes there
    assert np.abs(grad).max() < 1e-12
    f = lambda bb: imgmath.dssim(a, bb)  # noqa: E731
    for p in [(0, 0), (7, 9), (15, 15)]:
        assert abs(central_diff(f, a, p, h=1e-5)) < 1e-8


def test_dssim_gradient_constant_images_uniform_interior():
    a = np.full((32, 32), 0.3)
    b = np.full((32, 32), 0.6)
    grad = imgmath.dssim_gradient(a, b)
    # interior pixels (covered by exactly four windows) all see the same value
    interior = grad[4:28, 4:28]
    np.testing.assert_allclose(interior, interior[0, 0], rtol=1e-12)
    assert interior[0, 0] != 0.0
