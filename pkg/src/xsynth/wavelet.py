"""One-level 2-D CDF 9/7 wavelet transform via lifting.

Boundaries use whole-sample symmetric extension (x[-k] = x[k],
x[n-1+k] = x[n-1-k]), which keeps the transform perfectly invertible on
even-length signals.

Band naming: the first letter is the filter applied along the vertical axis
(rows of pixels, axis -2), the second along the horizontal axis (axis -1).
So ``HL`` holds vertical-highpass / horizontal-lowpass coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ALPHA = -1.586134342
BETA = -0.05298011854
GAMMA = 0.8829110762
DELTA = 0.4435068522
ZETA = 1.149604398


@dataclass
class Subbands:
    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray

    def stack(self, axis=-3) -> np.ndarray:
        return np.stack([self.LL, self.LH, self.HL, self.HH], axis=axis)

    @classmethod
    def unstack(cls, arr, axis=-3) -> "Subbands":
        parts = np.moveaxis(np.asarray(arr), axis, 0)
        if parts.shape[0] != 4:
            raise ValueError(f"expected 4 bands along axis {axis}, got {parts.shape[0]}")
        return cls(*parts)


def _next(a):
    # a[i+1] with the last element repeated (symmetric extension seen from odd samples)
    return np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)


def _prev(a):
    # a[i-1] with the first element repeated
    return np.concatenate([a[..., :1], a[..., :-1]], axis=-1)


def dwt1(x, axis=-1):
    """Analysis along one axis; returns (low, high) each half length."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    n = x.shape[-1]
    if n % 2 or n < 2:
        raise ValueError(f"length along transform axis must be even and >= 2, got {n}")
    s = x[..., 0::2].astype(np.result_type(x.dtype, np.float32), copy=True)
    d = x[..., 1::2].astype(s.dtype, copy=True)
    d += ALPHA * (s + _next(s))
    s += BETA * (_prev(d) + d)
    d += GAMMA * (s + _next(s))
    s += DELTA * (_prev(d) + d)
    s *= ZETA
    d /= ZETA
    return np.moveaxis(s, -1, axis), np.moveaxis(d, -1, axis)


def idwt1(s, d, axis=-1):
    """Synthesis along one axis; exact inverse of :func:`dwt1`."""
    s = np.moveaxis(np.asarray(s), axis, -1)
    d = np.moveaxis(np.asarray(d), axis, -1)
    if s.shape != d.shape:
        raise ValueError(f"band shapes differ: {s.shape} vs {d.shape}")
    dtype = np.result_type(s.dtype, d.dtype, np.float32)
    s = s.astype(dtype, copy=True) / ZETA
    d = d.astype(dtype, copy=True) * ZETA
    s -= DELTA * (_prev(d) + d)
    d -= GAMMA * (s + _next(s))
    s -= BETA * (_prev(d) + d)
    d -= ALPHA * (s + _next(s))
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1],), dtype=dtype)
    out[..., 0::2] = s
    out[..., 1::2] = d
    return np.moveaxis(out, -1, axis)


def dwt2(image) -> Subbands:
    """Rows then columns; ``image`` is (..., H, W) with even H, W."""
    image = np.asarray(image)
    if image.ndim < 2:
        raise ValueError("dwt2 needs at least 2 dimensions")
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"dwt2 requires even spatial dims, got ({h}, {w})")
    lo, hi = dwt1(image, axis=-1)
    ll, hl = dwt1(lo, axis=-2)
    lh, hh = dwt1(hi, axis=-2)
    return Subbands(ll, lh, hl, hh)


def idwt2(bands: Subbands) -> np.ndarray:
    shapes = {b.shape for b in (bands.LL, bands.LH, bands.HL, bands.HH)}
    if len(shapes) != 1:
        raise ValueError(f"band shapes must match, got {sorted(shapes)}")
    lo = idwt1(bands.LL, bands.HL, axis=-2)
    hi = idwt1(bands.LH, bands.HH, axis=-2)
    return idwt1(lo, hi, axis=-1)


@lru_cache(maxsize=64)
def synthesis_matrix(n: int) -> np.ndarray:
    """(n, n) matrix S with idwt1(s, d) == S @ concat(s, d) for length-n output."""
    eye = np.eye(n)
    return idwt1(eye[: n // 2], eye[n // 2:], axis=0)


def idwt2_traced(x):
    """Differentiable inverse transform of band-stacked (B, 4*C, H/2, W/2) -> (B, C, H, W).

    Channels are grouped as [LL, LH, HL, HH] blocks of C channels each.
    """
    from xsynth.nets import autodiff as ad

    b, c4, h2, w2 = ad.value(x).shape
    c = c4 // 4
    bands = ad.reshape(x, (b, 4, c, h2, w2))
    ll, lh, hl, hh = (bands[:, i] for i in range(4))
    # assemble [low | high] halves along each axis, then apply synthesis matrices
    lo = ad.concat([ll, hl], axis=-2)
    hi = ad.concat([lh, hh], axis=-2)
    sv = synthesis_matrix(2 * h2).astype(ad.value(x).dtype)
    sh = synthesis_matrix(2 * w2).astype(ad.value(x).dtype)
    lo = ad.apply_matrix(lo, sv, axis=-2)
    hi = ad.apply_matrix(hi, sv, axis=-2)
    return ad.apply_matrix(ad.concat([lo, hi], axis=-1), sh, axis=-1)


def dwt2_stacked(x) -> np.ndarray:
    """(B, C, H, W) -> (B, 4*C, H/2, W/2) with channel blocks [LL, LH, HL, HH]."""
    bands = dwt2(x)
    return np.concatenate([bands.LL, bands.LH, bands.HL, bands.HH], axis=1)
