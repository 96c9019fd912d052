"""Image quality and explanation metrics.

PSNR, windowed SSIM, a perceptual distance over a fixed-seed internal conv
net, Dice overlap, a Frechet distance between feature distributions, and the
faithfulness score tying prototype influence to spatial correlation.

The perceptual distance is self-consistent only: the feature network is a
deterministic randomly initialized stack, so values are NOT comparable to
published numbers from pretrained-backbone implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor

Array = np.ndarray

DEFAULT_LPIPS_SEED = 7


@dataclass
class MetricConfig:
    peak: float = 1.0           # maximum pixel intensity L
    k1: float = 0.01
    k2: float = 0.03
    window: int = 7             # uniform square SSIM window, stride 1
    psnr_cap: float = 100.0     # finite stand-in for the zero-error case
    lpips_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    lpips_seed: int = DEFAULT_LPIPS_SEED

    def __post_init__(self) -> None:
        if self.peak <= 0:
            raise ValueError("peak intensity must be positive")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("stability constants must be positive")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if any(w < 0 for w in self.lpips_weights):
            raise ValueError("layer weights must be non-negative")

    @property
    def c1(self) -> float:
        return (self.k1 * self.peak) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.peak) ** 2


def _pair(x, y) -> tuple[Array, Array]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, config: MetricConfig | None = None) -> float:
    config = config or MetricConfig()
    err = mse(x, y)
    if err == 0.0:
        return config.psnr_cap
    return float(10.0 * np.log10(config.peak ** 2 / err))


def ssim(x, y, config: MetricConfig | None = None) -> float:
    """Mean of the per-window structural similarity over all stride-1 windows."""
    config = config or MetricConfig()
    x, y = _pair(x, y)
    w = config.window
    if x.ndim != 2 or min(x.shape) < w:
        raise ValueError(f"images must be 2-D with extents >= window {w}")
    wx = sliding_window_view(x, (w, w))
    wy = sliding_window_view(y, (w, w))
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    var_x = (wx ** 2).mean(axis=(-2, -1)) - mu_x ** 2
    var_y = (wy ** 2).mean(axis=(-2, -1)) - mu_y ** 2
    cov = (wx * wy).mean(axis=(-2, -1)) - mu_x * mu_y
    c1, c2 = config.c1, config.c2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
            ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(score.mean())


class PerceptualNet:
    """Fixed-seed three-layer conv stack used as the perceptual feature basis.

    Frozen at construction; the same seed always yields the same network, so
    distances are reproducible across runs and machines.
    """

    def __init__(self, seed: int = DEFAULT_LPIPS_SEED):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.kernels = [
            T.he_conv(rng, 8, 1, 3).data,
            T.he_conv(rng, 16, 8, 3).data,
            T.he_conv(rng, 16, 16, 3).data,
        ]
        self.strides = [1, 2, 2]

    def features(self, image: Array) -> list[Array]:
        """Three tap activations for a 2-D image, each (C, H, W)."""
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("perceptual features expect a 2-D image")
        taps = []
        with T.no_grad():
            h = Tensor(x[None, None])
            for kernel, stride in zip(self.kernels, self.strides):
                h = T.relu(T.conv2d(h, Tensor(kernel), stride=stride, padding=1))
                taps.append(h.data[0])
        return taps


def _unit_channels(feat: Array) -> Array:
    norm = np.sqrt(np.sum(feat ** 2, axis=0, keepdims=True))
    return feat / (norm + 1e-10)


def lpips(x, y, net: PerceptualNet, config: MetricConfig | None = None) -> float:
    """Weighted sum over layers of the mean squared unit-feature difference."""
    config = config or MetricConfig()
    x, y = _pair(x, y)
    fx, fy = net.features(x), net.features(y)
    if len(config.lpips_weights) != len(fx):
        raise ValueError("one weight per tap layer required")
    total = 0.0
    for w, a, b in zip(config.lpips_weights, fx, fy):
        d = _unit_channels(a) - _unit_channels(b)
        total += w * float(np.mean(np.sum(d ** 2, axis=0)))
    return total


def spatial_corr(p: Array, f_x: Array) -> float:
    """Pearson correlation between a prototype and its best-matching patch.

    The patch is the feature cell with the highest similarity (smallest
    squared distance, ties to the smallest row-major index). Negative and
    degenerate (constant-vector) correlations are clamped to 0.
    """
    p = np.asarray(p, dtype=np.float64)
    f_x = np.asarray(f_x, dtype=np.float64)
    if f_x.ndim != 3 or p.ndim != 1 or f_x.shape[2] != p.shape[0]:
        raise ValueError("expected feature map (H, W, D) and prototype (D,)")
    d2 = np.sum((f_x - p) ** 2, axis=2)
    h, w = np.unravel_index(np.argmin(d2), d2.shape)
    patch = f_x[h, w]
    a = p - p.mean()
    b = patch - patch.mean()
    na, nb = np.sqrt(np.sum(a ** 2)), np.sqrt(np.sum(b ** 2))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    rho = float(np.dot(a, b) / (na * nb))
    return float(np.clip(rho, 0.0, 1.0))


def faithfulness(nis: Array, corrs: Array) -> float:
    """Influence-weighted mean correlation: (1/m) * sum_j NIS_j * corr_j."""
    nis = np.asarray(nis, dtype=np.float64)
    corrs = np.asarray(corrs, dtype=np.float64)
    if nis.shape != corrs.shape or nis.ndim != 1 or nis.size < 1:
        raise ValueError("nis and corrs must be equal-length vectors, m >= 1")
    if not (np.all(np.isfinite(nis)) and np.all(np.isfinite(corrs))):
        raise ValueError("non-finite inputs")
    if abs(float(nis.sum()) - 1.0) > 1e-6:
        raise ValueError("nis must sum to 1")
    m = nis.size
    return float(np.dot(nis, corrs)) / m


def dice(a, b) -> float:
    a, b = _pair(a, b)
    if not (np.all((a == 0) | (a == 1)) and np.all((b == 0) | (b == 1))):
        raise ValueError("dice requires binary masks")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(a * b) / total)


def _psd_eigvals(mat: Array, what: str) -> tuple[Array, Array]:
    try:
        vals, vecs = np.linalg.eigh(mat)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed for {what}") from exc
    if np.any(vals < -1e-8):
        raise ArithmeticError(f"{what} has negative eigenvalue {vals.min():.3e}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(feats_a: Array, feats_b: Array) -> float:
    """Distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2(Sa Sb)^{1/2}), with the cross term
    computed through the symmetric product Sa^{1/2} Sb Sa^{1/2}.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sig_a = np.atleast_2d(np.cov(a, rowvar=False))
    sig_b = np.atleast_2d(np.cov(b, rowvar=False))

    vals, vecs = _psd_eigvals(sig_a, "first covariance")
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner = root_a @ sig_b @ root_a
    vals, _ = _psd_eigvals((inner + inner.T) / 2.0, "covariance product")
    cross = np.sum(np.sqrt(vals))

    dist = float(np.sum((mu_a - mu_b) ** 2)
                 + np.trace(sig_a) + np.trace(sig_b) - 2.0 * cross)
    return max(dist, 0.0)


def format_sig(value: float, digits: int = 6) -> str:
    return f"{value:.{digits}g}"


def write_metrics_csv(path, rows: list[dict]) -> None:
    """metrics.csv: header image_id,psnr,ssim,lpips,dice; 6 significant digits."""
    lines = ["image_id,psnr,ssim,lpips,dice"]
    for row in rows:
        lines.append(",".join([str(row["image_id"])] + [
            format_sig(float(row[k])) for k in ("psnr", "ssim", "lpips", "dice")]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
