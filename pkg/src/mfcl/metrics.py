"""Image quality metrics: PSNR, SSIM, MAE and a proxy feature distance."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.ndimage import correlate1d

PSNR_INF = math.inf
FEAT_DIST_NOTE = "proxy feature distance, non-comparable to published FID"

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for data range 1; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, then crop to windows lying fully inside the image
    out = correlate1d(correlate1d(x, g, axis=-2, mode="constant"), g, axis=-1, mode="constant")
    r = len(g) // 2
    return out[..., r:out.shape[-2] - r, r:out.shape[-1] - r]


def _as_chw(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ValueError(f"expected HxW or CxHxW image, got shape {x.shape}")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, averaged over channels and valid positions."""
    a, b = _pair(a, b)
    a, b = _as_chw(a), _as_chw(b)
    if min(a.shape[-2:]) < SSIM_WIN:
        raise ValueError(f"image side {min(a.shape[-2:])} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def frechet_distance(x: np.ndarray, y: np.ndarray, reg: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two (n, d) feature sets."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("feature sets must be (n, d) arrays with matching d")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("feature distance needs at least 2 samples per set")
    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.atleast_2d(np.cov(x, rowvar=False))
    s2 = np.atleast_2d(np.cov(y, rowvar=False))
    eye = np.eye(s1.shape[0])
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) < reg:
        warnings.warn(f"degenerate covariance, adding {reg:g} * I", RuntimeWarning, stacklevel=2)
        s1 = s1 + reg * eye
        s2 = s2 + reg * eye
    covmean = linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1 + s2 - 2 * covmean), 0.0))


def pooled_features(images: np.ndarray, fx) -> np.ndarray:
    """Global-average-pooled last-stage activations, shape (n, C)."""
    from .autodiff import Tensor, no_grad

    images = np.asarray(images, dtype=fx.stages[0].weight.dtype)
    with no_grad():
        feats = fx(Tensor(images))
    return feats[-1].data.mean(axis=(2, 3)).astype(np.float64)


def feat_dist(a_set, b_set, fx) -> float:
    return frechet_distance(pooled_features(a_set, fx), pooled_features(b_set, fx))


@dataclass
class ImageScore:
    path: str
    psnr: float
    ssim: float
    mae: float


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mae: float
    n_images: int
    feat_dist: float | None = None
    rows: list = field(default_factory=list)
    note: str = FEAT_DIST_NOTE

    @classmethod
    def from_scores(cls, rows: list[ImageScore], feat_dist: float | None = None) -> "MetricReport":
        if not rows:
            raise ValueError("metric report needs at least one image")
        # sorting makes the float summation independent of evaluation order
        p = sorted(r.psnr for r in rows)
        return cls(
            psnr=float(np.mean(p)),
            ssim=float(np.mean(sorted(r.ssim for r in rows))),
            mae=float(np.mean(sorted(r.mae for r in rows))),
            n_images=len(rows),
            feat_dist=feat_dist,
            rows=list(rows),
        )


def score_image(path: str, pred: np.ndarray, target: np.ndarray) -> ImageScore:
    """Scores for one HxWx3 prediction against its HxWx3 target."""
    chw = (2, 0, 1)
    return ImageScore(path, psnr(pred, target), ssim(pred.transpose(chw), target.transpose(chw)), mae(pred, target))
