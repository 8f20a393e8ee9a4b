"""Image arithmetic and the windowed DSSIM distance.

Images are float64 numpy arrays of shape (H, W) with values in [0, 1].
Every function here also accepts a leading batch axis, (N, H, W), which
the cloak optimizer relies on.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError

DEFAULT_SIZE = 32


@dataclass(frozen=True)
class DssimConfig:
    window: int = 8
    stride: int = 4
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.window < 2 or self.stride < 1:
            raise InputError(f"bad window/stride: {self.window}/{self.stride}")
        if not (self.c1 > 0 and self.c2 > 0):
            raise InputError("SSIM stabilizers must be positive")


DEFAULT_DSSIM = DssimConfig()


def as_image(x, size=None):
    """Validate and return `x` as a float64 image array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {arr.shape}")
    if size is not None and arr.shape != (size, size):
        raise DimensionError(f"expected {size}x{size}, got {arr.shape}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise InputError("pixel values must lie in [0, 1]")
    return arr


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise DimensionError(f"expected image(s), got shape {a.shape}")
    return a, b


def apply_perturbation(x, delta):
    """x ⊕ delta: add and clamp to [0, 1]."""
    x, delta = _check_pair(x, delta)
    return np.clip(x + delta, 0.0, 1.0)


def _windows(img, cfg):
    h, w = img.shape[-2:]
    if h < cfg.window or w < cfg.window:
        raise DimensionError(
            f"image {h}x{w} smaller than SSIM window {cfg.window}"
        )
    v = sliding_window_view(img, (cfg.window, cfg.window), axis=(-2, -1))
    return v[..., :: cfg.stride, :: cfg.stride, :, :]


def _window_stats(a, b, cfg):
    wa = _windows(a, cfg)
    wb = _windows(b, cfg)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    return mu_a, mu_b, var_a, var_b, cov, da, db


def ssim_map(a, b, cfg=DEFAULT_DSSIM):
    """Per-window SSIM, shape (..., n_rows, n_cols)."""
    a, b = _check_pair(a, b)
    mu_a, mu_b, var_a, var_b, cov, _, _ = _window_stats(a, b, cfg)
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_a**2 + mu_b**2 + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def dssim(a, b, cfg=DEFAULT_DSSIM):
    """(1 - mean windowed SSIM) / 2. Batched inputs give one value per image."""
    s = ssim_map(a, b, cfg)
    out = (1.0 - s.mean(axis=(-2, -1))) / 2.0
    return float(out) if out.ndim == 0 else out


def dssim_gradient(a, b, cfg=DEFAULT_DSSIM):
    """Analytic d dssim(a, b) / d b, same shape as b."""
    a, b = _check_pair(a, b)
    mu_a, mu_b, var_a, var_b, cov, da, db = _window_stats(a, b, cfg)
    a1 = 2 * mu_a * mu_b + cfg.c1
    a2 = 2 * cov + cfg.c2
    b1 = mu_a**2 + mu_b**2 + cfg.c1
    b2 = var_a + var_b + cfg.c2
    s = a1 * a2 / (b1 * b2)
    n = cfg.window * cfg.window

    # dS/db_p = S * (dA1/A1 + dA2/A2 - dB1/B1 - dB2/B2), with
    # dA1 = 2 mu_a / n, dA2 = 2 (a_p - mu_a) / n, dB1 = 2 mu_b / n, dB2 = 2 (b_p - mu_b) / n
    const = s * (2 * mu_a / a1 - 2 * mu_b / b1) / n
    ka = s * 2 / (n * a2)
    kb = s * 2 / (n * b2)
    local = (
        const[..., None, None]
        + ka[..., None, None] * da
        - kb[..., None, None] * db
    )

    rows, cols = s.shape[-2:]
    scale = -0.5 / (rows * cols)
    grad = np.zeros_like(b)
    k = cfg.window
    for i in range(rows):
        r0 = i * cfg.stride
        for j in range(cols):
            c0 = j * cfg.stride
            grad[..., r0 : r0 + k, c0 : c0 + k] += local[..., i, j, :, :]
    return grad * scale
