"""Procedural paired phantoms: an MRA-like source and a CTA-like target slice.

Geometry per slice: an elliptical "head" filled with smooth Gaussian blobs
(soft tissue) and crossed by thin bright curves (vessels).  The source shows
tissue and vessels.  The target maps the source through a fixed monotone
curve, adds a bright ring just outside the head (skull) and Gaussian noise
inside the body.  Background is exactly -1 in both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from xsynth.rng import keyed_rng

TISSUE_FLOOR = 0.15
SKULL_LEVEL = 0.9


@dataclass(frozen=True)
class PhantomSpec:
    count: int = 100
    size: int = 64
    seed: int = 0
    blob_count: tuple = (3, 6)
    tube_count: tuple = (2, 4)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.size < 16 or self.size % 2:
            raise ValueError(f"size must be even and >= 16, got {self.size}")
        for name in ("blob_count", "tube_count"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "PhantomSpec":
        """``count=500,size=64,seed=0,noise=0.02`` (any subset, any order)."""
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            key = key.strip()
            if key in ("count", "size", "seed"):
                kw[key] = int(val)
            elif key in ("noise", "noise_sigma"):
                kw["noise_sigma"] = float(val)
            elif key in ("blobs", "tubes"):
                lo, _, hi = val.partition("-")
                kw["blob_count" if key == "blobs" else "tube_count"] = (int(lo), int(hi or lo))
            else:
                raise ValueError(f"unknown phantom key {key!r}")
        return cls(**kw)


@dataclass
class PhantomPairs:
    source: np.ndarray  # (count, size, size) float32 in [-1, 1]
    target: np.ndarray

    def __len__(self):
        return self.source.shape[0]


def target_curve(u):
    """Monotone intensity map applied to source values in [-1, 1]."""
    r = (np.asarray(u) + 1.0) / 2.0
    return -1.0 + 2.0 * (0.55 * r**2 + 0.45 * r**0.5) * 0.8


def _ellipse(yy, xx, cy, cx, ry, rx, rot):
    c, s = np.cos(rot), np.sin(rot)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return np.sqrt(u * u + v * v)


def _curve_distance(yy, xx, pts):
    d2 = np.full(yy.shape, np.inf)
    for py, px in pts:
        d2 = np.minimum(d2, (yy - py) ** 2 + (xx - px) ** 2)
    return np.sqrt(d2)


def _slice(rng, size, spec: PhantomSpec):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2 - 0.5
    cy, cx = c + rng.uniform(-0.05, 0.05, 2) * size
    ry, rx = rng.uniform(0.30, 0.40, 2) * size
    rot = rng.uniform(0, np.pi)
    rho = _ellipse(yy, xx, cy, cx, ry, rx, rot)
    head = rho <= 1.0

    tissue = np.zeros((size, size))
    for _ in range(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)):
        ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.7)
        by, bx = cy + rad * ry * np.sin(ang), cx + rad * rx * np.cos(ang)
        w = rng.uniform(0.08, 0.22) * size
        tissue += rng.uniform(0.2, 0.5) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * w * w))

    vessels = np.zeros((size, size))
    for _ in range(rng.integers(spec.tube_count[0], spec.tube_count[1] + 1)):
        p0, p1, p2 = (np.array([cy, cx]) + rng.uniform(-0.8, 0.8, 2) * [ry, rx] for _ in range(3))
        s = np.linspace(0, 1, 4 * size)[:, None]
        pts = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2
        width = rng.uniform(0.7, 1.4)
        vessels = np.maximum(vessels, np.exp(-_curve_distance(yy, xx, pts) ** 2 / (2 * width**2)))

    level = np.clip(TISSUE_FLOOR + tissue + 0.8 * vessels, 0.0, 1.0)
    src = np.where(head, -1.0 + 2.0 * level, -1.0)

    thickness = rng.uniform(0.05, 0.09)
    skull = (rho > 1.0) & (rho <= 1.0 + thickness)
    tgt = np.where(head, target_curve(src), -1.0)
    tgt = np.where(skull, SKULL_LEVEL, tgt)
    body = head | skull
    tgt = tgt + body * rng.normal(0.0, spec.noise_sigma, (size, size)) if spec.noise_sigma else tgt
    return np.clip(src, -1, 1), np.clip(tgt, -1, 1)


def gen_phantom_pairs(spec: PhantomSpec) -> PhantomPairs:
    """Deterministic in ``spec``; slice i only depends on (seed, i)."""
    src = np.empty((spec.count, spec.size, spec.size), np.float32)
    tgt = np.empty_like(src)
    for i in range(spec.count):
        s, t = _slice(keyed_rng(spec.seed, 0x5EED, i), spec.size, spec)
        src[i], tgt[i] = s, t
    return PhantomPairs(src, tgt)


def gen_phantom_volume(spec: PhantomSpec, depth: int, spacing=(1.0, 1.0, 2.0)):
    """A held-out (source, target) volume pair in HU-like units of the target window.

    Slices are independent phantoms stacked along the last axis; the source
    is returned in [-1, 1] and the target in the [-50, 350] window.
    """
    from xsynth.volume import IntensityMeta, Volume, unscale

    pairs = gen_phantom_pairs(PhantomSpec(depth, spec.size, spec.seed, spec.blob_count,
                                          spec.tube_count, spec.noise_sigma))
    src = Volume(np.moveaxis(pairs.source, 0, -1).copy(), tuple(spacing), IntensityMeta.normalized())
    tgt = unscale(Volume(np.moveaxis(pairs.target, 0, -1).copy(), tuple(spacing), IntensityMeta.normalized()))
    return src, tgt
