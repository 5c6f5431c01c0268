"""Paired slice datasets from directories of co-registered NIfTI volumes or from phantoms.

A data directory holds ``source/`` and ``target/`` subdirectories with
identically named ``.nii`` files.  Targets are windowed to [-50, 350] and
scaled to [-1, 1]; sources already inside [-1, 1] are used as is, otherwise
min-max scaled.  Slice pairs failing the overlap filter are dropped.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from xsynth.io.nifti import read_nifti, write_nifti
from xsynth.io.phantom import PhantomSpec, gen_phantom_pairs
from xsynth.volume import (
    IntensityMeta,
    SlicePairFilter,
    Volume,
    filter_slices,
    minmax_scale,
    unscale,
    window_and_scale,
)


def normalize_source(v: Volume, mode: str = "auto") -> Volume:
    """``auto``: keep data already in [-1, 1], otherwise min-max scale; ``minmax``; ``none``."""
    if mode == "none" or (mode == "auto" and v.data.min() >= -1.0 and v.data.max() <= 1.0):
        return Volume(v.data.astype(np.float32), v.spacing, IntensityMeta.normalized(), dict(v.provenance))
    if mode in ("auto", "minmax"):
        return minmax_scale(v)
    raise ValueError(f"unknown source scaling {mode!r}")


def load_pair_dir(path, f: SlicePairFilter = SlicePairFilter()):
    """Stack the kept transverse slices of every volume pair: two (N, H, W) float32 arrays."""
    root = Path(path)
    src_dir, tgt_dir = root / "source", root / "target"
    if not src_dir.is_dir() or not tgt_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain source/ and target/ subdirectories")
    names = sorted(p.name for p in src_dir.glob("*.nii"))
    if not names:
        raise FileNotFoundError(f"no .nii volumes in {src_dir}")
    srcs, tgts = [], []
    for name in names:
        if not (tgt_dir / name).exists():
            raise FileNotFoundError(f"missing target volume {tgt_dir / name}")
        s = normalize_source(read_nifti(src_dir / name))
        t = window_and_scale(read_nifti(tgt_dir / name))
        keep = filter_slices(s, t, f)
        srcs.append(np.moveaxis(s.data[:, :, keep], -1, 0))
        tgts.append(np.moveaxis(t.data[:, :, keep], -1, 0))
    shapes = {a.shape[1:] for a in srcs if a.size}
    if len(shapes) != 1:
        raise ValueError(f"all volumes need the same in-plane size, found {sorted(shapes)}")
    return np.concatenate(srcs).astype(np.float32), np.concatenate(tgts).astype(np.float32)


def load_training_data(desc: str, f: SlicePairFilter = SlicePairFilter()):
    """``phantom:<spec>`` or a data directory."""
    if desc.startswith("phantom:") or desc == "phantom":
        pairs = gen_phantom_pairs(PhantomSpec.parse(desc.partition(":")[2]))
        return pairs.source, pairs.target
    return load_pair_dir(desc, f)


def write_phantom_dir(spec: PhantomSpec, out, spacing=(1.0, 1.0, 1.0), name="phantom.nii"):
    """Write the phantom pairs as one source and one target volume (slices along the last axis)."""
    out = Path(out)
    (out / "source").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    pairs = gen_phantom_pairs(spec)
    src = Volume(np.moveaxis(pairs.source, 0, -1), spacing, IntensityMeta.normalized())
    tgt = unscale(Volume(np.moveaxis(pairs.target, 0, -1), spacing, IntensityMeta.normalized()))
    write_nifti(src, out / "source" / name)
    write_nifti(tgt, out / "target" / name)
    return out / "source" / name, out / "target" / name
