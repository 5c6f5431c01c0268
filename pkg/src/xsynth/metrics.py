"""Image-quality metrics (MSE, MAE, PSNR, SSIM) and Frechet distance on feature sets."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from xsynth.rng import keyed_rng

PSNR_INFINITE = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float) -> float:
    """10 log10(range^2 / mse); identical inputs give ``PSNR_INFINITE``."""
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(data_range**2 / err)


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' Gaussian filtering over every axis of ``x``."""
    for ax in range(x.ndim):
        win = sliding_window_view(x, g.size, axis=ax)
        x = win @ g
    return x


def ssim(a, b, data_range: float, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean SSIM with Gaussian-weighted local statistics.

    Works for 2-D images and 3-D volumes alike (the window is the separable
    product of 1-D Gaussians over every axis); only fully covered positions
    contribute.
    """
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise ValueError(f"ssim expects a 2-D or 3-D array, got {a.ndim}-D")
    if min(a.shape) < window:
        raise ValueError(f"input {a.shape} smaller than the {window}-sample window")
    g = gaussian_window_1d(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance {self.cov.shape} does not match mean dimension {d}")


def fit_gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased, symmetrized covariance of row vectors."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got {f.shape[0]}")
    mu = f.mean(axis=0)
    c = f - mu
    cov = c.T @ c / (f.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2)).

    The cross term uses tr((S_p S_q)^(1/2)) = tr((S_p^(1/2) S_q S_p^(1/2))^(1/2)),
    which only needs symmetric eigendecompositions.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {p.mean.size} vs {q.mean.size}")
    root_p = _psd_sqrt(p.cov)
    inner = root_p @ q.cov @ root_p
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sum(np.sqrt(np.clip(eig, 0.0, None)))
    d = p.mean - q.mean
    val = float(d @ d + np.trace(p.cov) + np.trace(q.cov) - 2.0 * cross)
    return max(val, 0.0)


class ExtractorKind(str, enum.Enum):
    DOWN8 = "down8"
    RANDPROJ = "randproj"
    FILE = "file"


@dataclass(frozen=True)
class FeatureExtractor:
    kind: ExtractorKind = ExtractorKind.DOWN8
    dim: int = 256
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExtractorKind(self.kind))
        if self.kind is ExtractorKind.RANDPROJ and self.dim <= 0:
            raise ValueError(f"projection dimension must be positive, got {self.dim}")
        if self.kind is ExtractorKind.FILE and not self.path:
            raise ValueError("file extractor needs a path")

    @classmethod
    def parse(cls, desc: str) -> "FeatureExtractor":
        """``down8``, ``randproj:dim=256,seed=0`` or ``file:<path>``."""
        name, _, rest = desc.partition(":")
        name = name.strip()
        if name == "down8":
            return cls(ExtractorKind.DOWN8)
        if name == "file":
            return cls(ExtractorKind.FILE, path=rest)
        if name == "randproj":
            kw = {}
            for part in filter(None, rest.split(",")):
                k, _, v = part.partition("=")
                if k.strip() not in ("dim", "seed"):
                    raise ValueError(f"unknown randproj key {k!r}")
                kw[k.strip()] = int(v)
            return cls(ExtractorKind.RANDPROJ, **kw)
        raise ValueError(f"unknown feature extractor {desc!r}")

    def describe(self) -> str:
        if self.kind is ExtractorKind.RANDPROJ:
            return f"randproj:dim={self.dim},seed={self.seed}"
        if self.kind is ExtractorKind.FILE:
            return f"file:{self.path}"
        return "down8"


def _block_mean(img, n=8):
    h, w = img.shape
    if h < n or w < n:
        raise ValueError(f"image {img.shape} smaller than the {n}x{n} pooling grid")
    ys = np.linspace(0, h, n + 1).round().astype(int)
    xs = np.linspace(0, w, n + 1).round().astype(int)
    rows = np.add.reduceat(img, ys[:-1], axis=0) / np.diff(ys)[:, None]
    return np.add.reduceat(rows, xs[:-1], axis=1) / np.diff(xs)[None, :]


def projection_matrix(seed: int, n_in: int, dim: int) -> np.ndarray:
    """Gaussian (n_in, dim) projection scaled so squared norms are preserved on average."""
    return keyed_rng(seed, n_in, dim).standard_normal((n_in, dim)) / math.sqrt(dim)


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    """Feature rows for a stack of 2-D images."""
    if extractor.kind is ExtractorKind.FILE:
        from xsynth.io.features import read_features

        feats = read_features(extractor.path)
        if images is not None and len(images) != feats.shape[0]:
            raise ValueError(f"feature file holds {feats.shape[0]} vectors for {len(images)} images")
        return feats.astype(np.float64)
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 3:
        raise ValueError(f"expected a (N, H, W) image stack, got shape {imgs.shape}")
    if extractor.kind is ExtractorKind.DOWN8:
        return np.stack([_block_mean(im).reshape(-1) for im in imgs])
    flat = imgs.reshape(imgs.shape[0], -1)
    return flat @ projection_matrix(extractor.seed, flat.shape[1], extractor.dim)


def feature_frechet_distance(images_a, images_b, extractor: FeatureExtractor) -> float:
    fa = fit_gaussian_stats(extract_features(images_a, extractor))
    fb = fit_gaussian_stats(extract_features(images_b, extractor))
    return frechet_distance(fa, fb)


@dataclass
class MetricReport:
    mse: float
    mae: float
    psnr: float
    ssim: float
    fd: Optional[float] = None
    eval_range: tuple = (0.0, 1.0)
    n_items: int = 1
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ValueError("mse and mae must be non-negative")

    def to_dict(self) -> dict:
        """Fixed key order; an infinite PSNR is written as the string ``"inf"``."""
        out = {
            "mse": self.mse,
            "mae": self.mae,
            "psnr": "inf" if self.psnr == PSNR_INFINITE else self.psnr,
            "ssim": self.ssim,
            "fd": self.fd,
            "eval_range": [float(self.eval_range[0]), float(self.eval_range[1])],
            "n_items": self.n_items,
        }
        out.update(self.extras)
        return out


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Average of per-item reports (an infinite PSNR stays infinite)."""
    if not reports:
        raise ValueError("no reports to average")
    fds = [r.fd for r in reports if r.fd is not None]
    return MetricReport(
        float(np.mean([r.mse for r in reports])),
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.psnr for r in reports])),
        float(np.mean([r.ssim for r in reports])),
        float(np.mean(fds)) if fds else None,
        reports[0].eval_range,
        sum(r.n_items for r in reports),
    )
