"""No-reference fusion quality indices over sliding windows.

The patch index q0 is the product of three ratios between two patches x, y:

    correlation        cov_xy / (sigma_x * sigma_y)
    luminance match    2*mu_x*mu_y / (mu_x^2 + mu_y^2)
    contrast match     2*sigma_x*sigma_y / (sigma_x^2 + sigma_y^2)

qw averages q0 over all k x k windows of (source a, fused) and (source b,
fused), weighting each window by the saliency split
lambda = sigma_a / (sigma_a + sigma_b).  qe is qw evaluated on max-normalized
Sobel gradient magnitudes of all three images.

Epsilon policy: every denominator above gains +eps, and variances get a +eps
floor before the square root, so constant windows contribute a well-defined,
smooth value (the loss must stay differentiable everywhere).  Plain (numpy)
and differentiable (tensor-graph) evaluators share the same formula helpers;
the plain path accelerates window statistics with summed-area tables, the
differentiable path composes them from average pooling.

Pixel images are expected in [0, 1]; q0 itself accepts patches at any scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor


@dataclass
class WindowConfig:
    """Sliding-window layout for qw/qe plus the ratio-stabilizing epsilon."""

    size: int = 8
    stride: int = 1
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"window size must be >= 2; got {self.size}")
        if self.stride < 1:
            raise ValueError(f"window stride must be >= 1; got {self.stride}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0; got {self.epsilon}")


@dataclass
class EdgeConfig:
    """Edge-response choice for qe; only max-normalized Sobel magnitude."""

    operator: str = "sobel-magnitude"
    normalization: str = "max"

    def __post_init__(self):
        if self.operator != "sobel-magnitude":
            raise ValueError(f"unsupported edge operator: {self.operator!r}")
        if self.normalization != "max":
            raise ValueError(f"unsupported edge normalization: {self.normalization!r}")


@dataclass
class PatchStats:
    """First and second moments of one window pair."""

    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float

    @classmethod
    def from_patches(cls, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"patch shapes differ: {x.shape} vs {y.shape}")
        # a constant window has exactly zero variance, ulp noise aside
        mx = float(x.flat[0]) if np.ptp(x) == 0 else float(x.mean())
        my = float(y.flat[0]) if np.ptp(y) == 0 else float(y.mean())
        dx = x - mx
        dy = y - my
        return cls(mx, my, float((dx * dx).mean()), float((dy * dy).mean()),
                   float((dx * dy).mean()))


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


# ---------------------------------------------------------------------------
# shared formula helpers
#
# These work on plain numpy arrays and on graph tensors alike (both support
# +, -, *, / with scalars), which keeps the two evaluation paths identical
# down to the arithmetic.


def _q0_from_moments(mu_x, mu_y, var_x, var_y, cov_xy, eps, sqrt):
    sx = sqrt(var_x + eps)
    sy = sqrt(var_y + eps)
    corr = cov_xy / (sx * sy + eps)
    lum = (2.0 * mu_x * mu_y) / (mu_x * mu_x + mu_y * mu_y + eps)
    con = (2.0 * sx * sy) / (sx * sx + sy * sy + eps)
    return corr * lum * con


def _qw_from_moments(stats_af, stats_bf, var_a, var_b, eps, sqrt, mean):
    q_af = _q0_from_moments(*stats_af, eps, sqrt)
    q_bf = _q0_from_moments(*stats_bf, eps, sqrt)
    sa = sqrt(var_a + eps)
    sb = sqrt(var_b + eps)
    lam = (sa + eps * 0.5) / (sa + sb + eps)
    return mean(lam * q_af + (1.0 - lam) * q_bf)


# ---------------------------------------------------------------------------
# plain evaluators (numpy images, (H, W) single channel or (3, H, W) color)


def _as_gray(img, what):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        img = luminance(img)
    if img.ndim != 2:
        raise ShapeError(f"{what} must be (H, W) or (3, H, W); got {img.shape}")
    return img


def _integral(x):
    out = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=out[1:, 1:])
    return out


def _window_sums(integral_img, k, stride, n_rows, n_cols):
    r = np.arange(n_rows) * stride
    c = np.arange(n_cols) * stride
    return (
        integral_img[np.ix_(r + k, c + k)]
        - integral_img[np.ix_(r + k, c)]
        - integral_img[np.ix_(r, c + k)]
        + integral_img[np.ix_(r, c)]
    )


def _window_moments(x, y, k, stride):
    """Per-window (mu_x, mu_y, var_x, var_y, cov_xy) via summed-area tables."""
    H, W = x.shape
    n_rows = (H - k) // stride + 1
    n_cols = (W - k) // stride + 1
    n = float(k * k)
    mu_x = _window_sums(_integral(x), k, stride, n_rows, n_cols) / n
    mu_y = _window_sums(_integral(y), k, stride, n_rows, n_cols) / n
    e_xx = _window_sums(_integral(x * x), k, stride, n_rows, n_cols) / n
    e_yy = _window_sums(_integral(y * y), k, stride, n_rows, n_cols) / n
    e_xy = _window_sums(_integral(x * y), k, stride, n_rows, n_cols) / n
    return mu_x, mu_y, e_xx - mu_x * mu_x, e_yy - mu_y * mu_y, e_xy - mu_x * mu_y


def q0(x, y, epsilon=1e-8):
    """Quality index of patch y against patch x, the whole patch as one window."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"q0 patch shapes differ: {x.shape} vs {y.shape}")
    mx, my = x.mean(), y.mean()
    vx = (x * x).mean() - mx * mx
    vy = (y * y).mean() - my * my
    cxy = (x * y).mean() - mx * my
    return float(_q0_from_moments(mx, my, vx, vy, cxy, epsilon, np.sqrt))


def _check_window_fits(img, cfg, what):
    if img.shape[0] < cfg.size or img.shape[1] < cfg.size:
        raise ShapeError(
            f"{what} of size {img.shape} is smaller than the {cfg.size}x{cfg.size} window"
        )


def qw(a, b, f, cfg=None):
    """Saliency-weighted window quality of fused ``f`` against sources a, b."""
    cfg = cfg or WindowConfig()
    a = _as_gray(a, "source a")
    b = _as_gray(b, "source b")
    f = _as_gray(f, "fused image")
    if a.shape != b.shape or a.shape != f.shape:
        raise ShapeError(f"qw images differ in size: {a.shape}, {b.shape}, {f.shape}")
    _check_window_fits(a, cfg, "image")
    k, s, eps = cfg.size, cfg.stride, cfg.epsilon
    mu_a, mu_f, var_a, var_f, cov_af = _window_moments(a, f, k, s)
    mu_b, _, var_b, _, cov_bf = _window_moments(b, f, k, s)
    stats_af = (mu_a, mu_f, var_a, var_f, cov_af)
    stats_bf = (mu_b, mu_f, var_b, var_f, cov_bf)
    return float(_qw_from_moments(stats_af, stats_bf, var_a, var_b, eps, np.sqrt, np.mean))


def qe(a, b, f, cfg=None, ecfg=None):
    """qw evaluated on the edge-response maps of all three images."""
    cfg = cfg or WindowConfig()
    ecfg = ecfg or EdgeConfig()
    a = _as_gray(a, "source a")
    b = _as_gray(b, "source b")
    f = _as_gray(f, "fused image")
    return qw(sobel_edge_map(a), sobel_edge_map(b), sobel_edge_map(f), cfg)


def mse(x, f):
    """Mean squared difference over all pixels/channels of same-shape images."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if x.shape != f.shape:
        raise ShapeError(f"mse shapes differ: {x.shape} vs {f.shape}")
    d = x - f
    return float((d * d).mean())


LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


def luminance(img):
    """0.299 R + 0.587 G + 0.114 B of a (3, H, W) image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"luminance expects (3, H, W); got {img.shape}")
    return LUMA_R * img[0] + LUMA_G * img[1] + LUMA_B * img[2]


def sobel_edge_map(img):
    """Max-normalized Sobel gradient magnitude with replicate borders.

    A constant image maps to all zeros (the normalization is skipped when the
    maximum response is zero).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"sobel_edge_map expects (H, W); got {img.shape}")
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"sobel_edge_map needs at least 3x3; got {img.shape}")
    H, W = img.shape
    padded = np.pad(img, 1, mode="edge")
    # separable form: column/row differences of (1, 2, 1)-weighted sums,
    # which cancels exactly on constant images
    rows = padded[0:H, :] + 2.0 * padded[1 : H + 1, :] + padded[2 : H + 2, :]
    gx = rows[:, 2:] - rows[:, :-2]
    cols = padded[:, 0:W] + 2.0 * padded[:, 1 : W + 1] + padded[:, 2 : W + 2]
    gy = cols[2:, :] - cols[:-2, :]
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


# ---------------------------------------------------------------------------
# differentiable evaluators ((B, 1, H, W) graph tensors)

EDGE_MAG_EPS = 1e-12  # inside the magnitude sqrt; keeps flat regions smooth


def _check_gray_tensor(t, what):
    if t.data.shape[1] != 1:
        raise ShapeError(f"{what} must be single-channel; got {t.shape}")


def luminance_expr(t):
    """Differentiable luminance of a (B, 3, H, W) tensor."""
    if t.data.shape[1] != 3:
        raise ShapeError(f"luminance_expr expects 3 channels; got {t.shape}")
    r = tz.slice_channels(t, 0, 1)
    g = tz.slice_channels(t, 1, 2)
    b = tz.slice_channels(t, 2, 3)
    return r * LUMA_R + g * LUMA_G + b * LUMA_B


def sobel_edge_expr(t):
    """Differentiable Sobel magnitude map, normalized by its maximum.

    Mirrors ``sobel_edge_map`` up to a tiny smoothing term inside the square
    root; near-constant inputs therefore normalize to ~1 instead of 0, which
    only matters for fully degenerate images.
    """
    _check_gray_tensor(t, "sobel_edge_expr input")
    dtype = t.data.dtype
    kx = Tensor(SOBEL_X.reshape(1, 1, 3, 3), dtype=dtype)
    ky = Tensor(SOBEL_Y.reshape(1, 1, 3, 3), dtype=dtype)
    padded = tz.pad_replicate(t, 1)
    gx = tz.conv2d(padded, kx)
    gy = tz.conv2d(padded, ky)
    mag = tz.sqrt_map(gx * gx + gy * gy + EDGE_MAG_EPS)
    return mag / tz.reduce_max(mag)


def _window_moments_expr(x, y, k, stride):
    mu_x = tz.avgpool2d(x, k, stride)
    mu_y = tz.avgpool2d(y, k, stride)
    e_xx = tz.avgpool2d(x * x, k, stride)
    e_yy = tz.avgpool2d(y * y, k, stride)
    e_xy = tz.avgpool2d(x * y, k, stride)
    return mu_x, mu_y, e_xx - mu_x * mu_x, e_yy - mu_y * mu_y, e_xy - mu_x * mu_y


def qw_expr(a, b, f, cfg=None):
    """Differentiable qw over (B, 1, H, W) tensors (mean over batch windows)."""
    cfg = cfg or WindowConfig()
    for t, what in ((a, "source a"), (b, "source b"), (f, "fused")):
        _check_gray_tensor(t, what)
    if a.data.shape != b.data.shape or a.data.shape != f.data.shape:
        raise ShapeError(f"qw_expr shapes differ: {a.shape}, {b.shape}, {f.shape}")
    if a.data.shape[2] < cfg.size or a.data.shape[3] < cfg.size:
        raise ShapeError(
            f"qw_expr image {a.shape} smaller than the {cfg.size}x{cfg.size} window"
        )
    k, s, eps = cfg.size, cfg.stride, cfg.epsilon
    mu_a, mu_f, var_a, var_f, cov_af = _window_moments_expr(a, f, k, s)
    mu_b, _, var_b, _, cov_bf = _window_moments_expr(b, f, k, s)
    stats_af = (mu_a, mu_f, var_a, var_f, cov_af)
    stats_bf = (mu_b, mu_f, var_b, var_f, cov_bf)
    return _qw_from_moments(stats_af, stats_bf, var_a, var_b, eps, tz.sqrt_map, tz.reduce_mean)


def qe_expr(a, b, f, cfg=None, ecfg=None):
    """Differentiable qe: qw_expr over differentiable edge maps."""
    ecfg = ecfg or EdgeConfig()
    return qw_expr(sobel_edge_expr(a), sobel_edge_expr(b), sobel_edge_expr(f), cfg)


def mse_expr(x, f):
    """Differentiable mean squared difference of two same-shape tensors."""
    if x.data.shape != f.data.shape:
        raise ShapeError(f"mse_expr shapes differ: {x.shape} vs {f.shape}")
    d = x - f
    return tz.reduce_mean(d * d)
