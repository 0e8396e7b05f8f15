"""Bicubic and area resampling against an independent scalar-loop oracle."""

import math

import numpy as np
import pytest

from ncsr.resample import area_downsample, bicubic_resize, cubic_kernel
from ncsr.rng import Rng
from ncsr.tensor import ShapeError, Tensor


def kernel_ref(t: float, a: float = -0.5) -> float:
    t = abs(t)
    if t <= 1.0:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2.0:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def resize_axis_ref(values: list[float], n_out: int, a: float = -0.5) -> list[float]:
    """Scalar-loop reference: stretched clamped kernel, normalized weights."""
    n_in = len(values)
    scale = n_out / n_in
    k_scale = min(scale, 1.0)
    support = 2.0 / k_scale
    out = []
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = math.floor(center - support) + 1
        hi = math.floor(center + support)
        weights, taps = [], []
        for j in range(lo, hi + 1):
            weights.append(kernel_ref((center - j) * k_scale, a))
            taps.append(min(max(j, 0), n_in - 1))
        wsum = sum(weights)
        out.append(sum(w * values[t] for w, t in zip(weights, taps)) / wsum)
    return out


def resize_ref(img: np.ndarray, scale: float) -> np.ndarray:
    """Apply the scalar reference separably to a (H, W) array."""
    h, w = img.shape
    oh, ow = round(h * scale), round(w * scale)
    tmp = np.array([resize_axis_ref(list(img[:, j]), oh) for j in range(w)]).T
    return np.array([resize_axis_ref(list(tmp[i, :]), ow) for i in range(oh)])


def test_kernel_matches_reference():
    ts = np.linspace(-2.5, 2.5, 101)
    ref = np.array([kernel_ref(t) for t in ts])
    assert np.allclose(cubic_kernel(ts), ref, atol=1e-15)


def test_constant_preserved_exactly():
    img = Tensor(np.full((1, 1, 4, 4), 0.7))
    out = bicubic_resize(img, 0.5)
    assert out.shape == (1, 1, 2, 2)
    assert np.abs(out.data - 0.7).max() < 1e-12
    for scale in (2.0, 0.25, 4.0):
        out = bicubic_resize(Tensor(np.full((1, 3, 8, 8), 0.31)), scale)
        assert np.abs(out.data - 0.31).max() < 1e-12


def test_linear_ramp_downscale_oracle():
    ramp = np.arange(8.0)
    img = Tensor(np.broadcast_to(ramp, (1, 1, 8, 8)).copy())
    out = bicubic_resize(img, 0.5).data[0, 0]
    # frozen values from the scalar reference (exact dyadic rationals)
    expected_row = [65 / 128, 637 / 256, 1155 / 256, 831 / 128]
    assert np.allclose(out[0], expected_row, atol=1e-9)
    ref = resize_ref(np.broadcast_to(ramp, (8, 8)), 0.5)
    assert np.abs(out - ref).max() < 1e-12
    # endpoints mirror the ramp symmetrically: out[0] - in[0] == in[-1] - out[-1]
    assert abs((out[0, 0] - ramp[0]) - (ramp[-1] - out[0, -1])) < 1e-6


def test_matches_scalar_reference_on_random_images():
    rng = Rng(4)
    for scale in (0.5, 2.0, 0.25):
        img = rng.uniform((1, 2, 8, 8))
        out = bicubic_resize(Tensor(img), scale).data
        for c in range(2):
            ref = resize_ref(img[0, c], scale)
            assert np.abs(out[0, c] - ref).max() < 1e-12


def test_upscale_downscale_roundtrip_error_bounded():
    rng = Rng(5)
    worst = 0.0
    for _ in range(10):
        img = rng.uniform((1, 1, 4, 4))
        up = bicubic_resize(Tensor(img), 2.0)
        back = bicubic_resize(up, 0.5)
        worst = max(worst, float(np.abs(back.data - img).mean()))
    assert worst < 0.15


def test_non_integral_output_rejected():
    with pytest.raises(ShapeError):
        bicubic_resize(Tensor(np.zeros((1, 1, 5, 5))), 0.5)


def test_area_downsample_statistics_and_errors():
    assert np.allclose(
        area_downsample(Tensor(np.ones((1, 1, 4, 4))), 2).data, 1.0)
    rng = Rng(6)
    sigma = 0.2
    v = Tensor(rng.gaussian((1, 1, 64, 64), sigma))
    w = area_downsample(v, 4)
    expected_var = sigma**2 / 16.0
    assert abs(w.data.var() / expected_var - 1.0) < 0.25
    with pytest.raises(ShapeError):
        area_downsample(Tensor(np.zeros((1, 1, 5, 5))), 2)
