"""Finite-difference gradient checks for every differentiable op.

Float64 central differences, random small shapes, 20 instances per op.
Warp and brightness-error instances are sampled away from their known
non-differentiable points (integer sample coordinates, zero difference).
"""

import numpy as np
import pytest

from fdcheck import fd_gradients

TOL = 1e-4
N_INSTANCES = 20


def _rng(i):
    return np.random.default_rng(1000 + i)


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_conv2d_grad(i):
    rng = _rng(i)
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    s = int(rng.choice([1, 2]))
    p = k // 2
    h = int(rng.integers(k, k + 5))
    x = rng.standard_normal((1, c, h, h))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    worst = fd_gradients("conv2d", [x, w, b], {"stride": s, "padding": p}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_deconv2d_grad(i):
    rng = _rng(100 + i)
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([2, 4]))
    s = 2
    p = int(rng.choice([0, 1]))
    h = int(rng.integers(3, 7))
    x = rng.standard_normal((1, c, h, h))
    w = rng.standard_normal((c, o, k, k))
    worst = fd_gradients("deconv2d", [x, w], {"stride": s, "padding": p}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_leaky_relu_grad(i):
    rng = _rng(200 + i)
    x = rng.standard_normal((1, 2, 6, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink at zero
    worst = fd_gradients("leaky_relu", [x], {"slope": 0.1}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_sigmoid_grad(i):
    rng = _rng(300 + i)
    x = rng.standard_normal((1, 1, 5, 5)) * 3
    worst = fd_gradients("sigmoid", [x], {}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_correlate_grad(i):
    rng = _rng(400 + i)
    k = int(rng.integers(0, 2))
    d = int(rng.integers(1, 3))
    c = int(rng.integers(1, 3))
    h = int(rng.integers(4, 7))
    f1 = rng.standard_normal((1, c, h, h))
    f2 = rng.standard_normal((1, c, h, h))
    worst = fd_gradients("correlate", [f1, f2], {"k": k, "d": d}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_warp_grad(i):
    rng = _rng(500 + i)
    h = int(rng.integers(5, 8))
    img = rng.standard_normal((1, 2, h, h))
    # fractional offsets well inside cells and inside the frame
    flow = rng.uniform(-1.3, 1.3, size=(1, 2, h, h))
    frac = flow - np.floor(flow)
    flow = np.where((frac < 0.2) | (frac > 0.8), flow + 0.37, flow)
    worst = fd_gradients("warp", [img, flow], {}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_brightness_error_grad(i):
    rng = _rng(600 + i)
    ref = rng.standard_normal((1, 3, 5, 5))
    warped = ref + rng.uniform(0.5, 1.5, size=ref.shape) * np.sign(
        rng.standard_normal(ref.shape)
    )
    worst = fd_gradients("brightness_error", [ref, warped], {}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_upsample_bilinear_grad(i):
    rng = _rng(700 + i)
    f = int(rng.choice([2, 4]))
    h = int(rng.integers(2, 5))
    x = rng.standard_normal((1, 2, h, h))
    worst = fd_gradients("upsample_bilinear", [x], {"factor": f}, rng)
    assert worst < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_concat_grad(i):
    rng = _rng(800 + i)
    xs = [rng.standard_normal((1, int(rng.integers(1, 3)), 4, 4)) for _ in range(3)]
    worst = fd_gradients("concat", xs, {}, rng)
    assert worst < TOL
