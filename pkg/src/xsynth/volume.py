"""Volumes, intensity windowing, slice filtering, cubic-spline resampling and slice-wise translation.

Volumes are stored (X, Y, Z) with transverse slices along the last axis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from xsynth import metrics
from xsynth.sampler import SamplerConfig, sample
from xsynth.schedule import NoiseSchedule

CTA_WINDOW = (-50.0, 350.0)
SPLINE_POLE = math.sqrt(3.0) - 2.0


class IntensityKind(str, enum.Enum):
    RAW = "raw"
    WINDOWED = "windowed"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class IntensityMeta:
    """How voxel values relate to physical intensities.

    ``low``/``high`` name the window; for normalized data they are the
    window that maps onto [-1, 1].
    """

    kind: IntensityKind = IntensityKind.RAW
    low: Optional[float] = None
    high: Optional[float] = None

    @classmethod
    def raw(cls):
        return cls(IntensityKind.RAW)

    @classmethod
    def windowed(cls, low=CTA_WINDOW[0], high=CTA_WINDOW[1]):
        return cls(IntensityKind.WINDOWED, float(low), float(high))

    @classmethod
    def normalized(cls, low=CTA_WINDOW[0], high=CTA_WINDOW[1]):
        return cls(IntensityKind.NORMALIZED, float(low), float(high))


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: IntensityMeta = field(default_factory=IntensityMeta.raw)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume data contains non-finite values")

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    def slice(self, k: int) -> np.ndarray:
        return self.data[:, :, k]


def window_and_scale(v: Volume, low: float = CTA_WINDOW[0], high: float = CTA_WINDOW[1]) -> Volume:
    """Clip to [low, high] and map affinely onto [-1, 1]."""
    if not low < high:
        raise ValueError(f"window needs low < high, got ({low}, {high})")
    d = np.clip(v.data.astype(np.float64), low, high)
    out = (2.0 * (d - low) / (high - low) - 1.0).astype(np.float32)
    return replace(v, data=out, meta=IntensityMeta.normalized(low, high), provenance=dict(v.provenance))


def minmax_scale(v: Volume) -> Volume:
    """Map the volume's own [min, max] onto [-1, 1] (source-modality normalization)."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        hi = lo + 1.0
    return window_and_scale(v, lo, hi)


def unscale(v: Volume) -> Volume:
    """Inverse of :func:`window_and_scale`: [-1, 1] back to the recorded window."""
    if v.meta.kind is not IntensityKind.NORMALIZED:
        raise ValueError(f"unscale expects normalized data, got {v.meta.kind.value}")
    low, high = v.meta.low, v.meta.high
    d = (np.clip(v.data.astype(np.float64), -1.0, 1.0) + 1.0) / 2.0 * (high - low) + low
    return replace(v, data=d.astype(np.float32), meta=IntensityMeta.windowed(low, high),
                   provenance=dict(v.provenance))


# ------------------------------------------------------------------ filtering

@dataclass(frozen=True)
class SlicePairFilter:
    min_foreground_pixels: int = 200
    min_overlap: float = 0.25

    def __post_init__(self):
        if self.min_foreground_pixels < 0 or not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError("filter thresholds must be non-negative, overlap within [0, 1]")


def foreground(img) -> np.ndarray:
    img = np.asarray(img)
    return img > img.min()


def keep_pair(src, tgt, f: SlicePairFilter = SlicePairFilter()) -> bool:
    a, b = foreground(src), foreground(tgt)
    if a.sum() < f.min_foreground_pixels or b.sum() < f.min_foreground_pixels:
        return False
    union = np.logical_or(a, b).sum()
    return bool(union and np.logical_and(a, b).sum() / union >= f.min_overlap)


def filter_slices(source: Volume, target: Volume, f: SlicePairFilter = SlicePairFilter()) -> np.ndarray:
    """Boolean keep-mask over transverse slices."""
    if source.data.shape != target.data.shape:
        raise ValueError(f"grid mismatch: {source.data.shape} vs {target.data.shape}")
    return np.array([keep_pair(source.slice(k), target.slice(k), f) for k in range(source.n_slices)])


# ------------------------------------------------------------------ resampling

def _prefilter_axis0(c):
    n = c.shape[0]
    z = SPLINE_POLE
    c = c * 6.0  # (1 - z)(1 - 1/z)
    if n == 1:
        return c
    # causal init for mirror extension, summed exactly over one period
    k = np.arange(n)
    zk = z**k
    zr = z ** (2 * n - 2 - k[1:n - 1])
    c[0] = (np.tensordot(zk, c, axes=(0, 0)) + np.tensordot(zr, c[1:n - 1], axes=(0, 0))) / (1.0 - z ** (2 * n - 2))
    for i in range(1, n):
        c[i] = c[i] + z * c[i - 1]
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2])
    for i in range(n - 2, -1, -1):
        c[i] = z * (c[i + 1] - c[i])
    return c


def spline_prefilter(x, axes=None) -> np.ndarray:
    """Cubic B-spline interpolation coefficients (mirror boundary) along ``axes`` (default all)."""
    c = np.array(x, dtype=np.float64)
    axes = range(c.ndim) if axes is None else axes
    for ax in axes:
        if c.shape[ax] < 2:
            raise ValueError(f"need at least 2 samples along axis {ax}, got {c.shape[ax]}")
        c = np.moveaxis(_prefilter_axis0(np.moveaxis(c, ax, 0)), 0, ax)
    return c


def _bspline3(x):
    ax = np.abs(x)
    out = np.where(ax < 1, 2.0 / 3.0 - ax**2 + 0.5 * ax**3, 0.0)
    return np.where((ax >= 1) & (ax < 2), (2.0 - ax) ** 3 / 6.0, out)


def _mirror(i, n):
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n - 2
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


@lru_cache(maxsize=32)
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix evaluating a cubic spline from its coefficients.

    Output sample j sits at input coordinate (j + 0.5) n_in / n_out - 0.5
    (pixel centres aligned), so ``n_out == n_in`` evaluates at the nodes.
    """
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(pos).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = _bspline3(pos - idx)
        np.add.at(m, (np.arange(n_out), _mirror(idx, n_in)), w)
    m.setflags(write=False)
    return m


def resample_slice(img, out_h: int, out_w: int) -> np.ndarray:
    """Prefiltered cubic-spline resampling of a 2-D slice (or a (..., H, W) stack)."""
    a = np.asarray(img, dtype=np.float64)
    if a.shape[-2] < 2 or a.shape[-1] < 2 or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resample {a.shape[-2:]} to ({out_h}, {out_w})")
    c = spline_prefilter(a, axes=(a.ndim - 2, a.ndim - 1))
    mh = interpolation_matrix(a.shape[-2], out_h)
    mw = interpolation_matrix(a.shape[-1], out_w)
    return mh @ c @ mw.T


# ------------------------------------------------------------------ translation

class SliceTranslationError(RuntimeError):
    def __init__(self, slice_index: int, cause: Exception):
        self.slice_index = slice_index
        super().__init__(f"slice {slice_index}: {cause}")


def translate_volume(model, source: Volume, sampler_cfg: SamplerConfig, schedule: NoiseSchedule,
                     work_size: int = 256, batch_size: int = 16,
                     slice_indices=None) -> Volume:
    """Slice-wise translation of a normalized source volume into the target window.

    Each slice is resampled to ``work_size`` squared, sampled with the slice as
    condition, resampled back and mapped from [-1, 1] onto the window.  Noise
    streams are keyed by slice index, so batching and order do not matter.
    """
    if source.meta.kind is not IntensityKind.NORMALIZED:
        raise ValueError("translate_volume expects a normalized source volume")
    nx, ny, nz = source.data.shape
    ks = list(range(nz)) if slice_indices is None else [int(k) for k in slice_indices]
    same = (nx, ny) == (work_size, work_size)
    out = np.zeros((nx, ny, len(ks)), np.float32)
    for start in range(0, len(ks), batch_size):
        chunk = ks[start:start + batch_size]
        cond = np.stack([source.slice(k) if same else resample_slice(source.slice(k), work_size, work_size)
                         for k in chunk])
        cond = np.clip(cond, -1.0, 1.0).astype(np.float32)[:, None]
        try:
            gen = sample(model, cond, sampler_cfg, schedule, item_keys=chunk)
        except Exception as e:  # attach the first slice of the failing batch
            raise SliceTranslationError(chunk[0], e) from e
        for j, k in enumerate(chunk):
            g = gen[j, 0].astype(np.float64)
            out[:, :, start + j] = g if same else resample_slice(g, nx, ny)
    low, high = CTA_WINDOW
    window_meta = IntensityMeta.normalized(low, high)
    result = unscale(Volume(out, source.spacing, window_meta))
    result.provenance = {
        "work_size": work_size,
        "sampler": sampler_cfg.kind.value,
        "steps": sampler_cfg.steps,
        "seed": sampler_cfg.seed,
        "odd_padding": bool(work_size % 2),
    }
    return result


def evaluate_volumes(pred: Volume, target: Volume, extractor: Optional[metrics.FeatureExtractor] = None,
                     eval_range=CTA_WINDOW) -> metrics.MetricReport:
    """Metrics on window-clipped data; FD from transverse-slice features.

    SSIM uses the 3-D Gaussian window with the window width as data range.
    Slice features are computed on the window mapped to [0, 1].
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(f"grid mismatch: {pred.data.shape} vs {target.data.shape}")
    low, high = eval_range
    p = np.clip(pred.data.astype(np.float64), low, high)
    t = np.clip(target.data.astype(np.float64), low, high)
    rng = high - low
    fd = None
    if extractor is not None:
        fd = slice_fd(p, t, extractor, eval_range)
    return metrics.MetricReport(
        mse=metrics.mse(p, t),
        mae=metrics.mae(p, t),
        psnr=metrics.psnr(p, t, rng),
        ssim=metrics.ssim(p, t, rng),
        fd=fd,
        eval_range=(float(low), float(high)),
        n_items=1,
        extras={"data_range": float(rng)},
    )


def slice_fd(pred_data, target_data, extractor, eval_range=CTA_WINDOW) -> float:
    low, high = eval_range
    to_unit = lambda d: np.moveaxis((np.clip(d, low, high) - low) / (high - low), -1, 0)  # noqa: E731
    return metrics.feature_frechet_distance(to_unit(pred_data), to_unit(target_data), extractor)
