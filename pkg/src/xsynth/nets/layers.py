"""Shared layer vocabulary.

Layers are plain functions of a flat parameter dict (``"path/to/w" -> array``)
built on the ops in :mod:`xsynth.nets.autodiff`, so they run on numpy arrays
for inference and on traced values for training.  Image tensors inside the
networks are channels-last, (B, H, W, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from xsynth.nets import autodiff as ad
from xsynth.rng import keyed_rng

NORM_EPS = 1e-6
GROUP_NORM_EPS = 1e-5


@dataclass
class ParamSpec:
    shape: tuple
    init: str = "normal"  # normal | zeros | ones
    fan_in: int = 1


@dataclass
class ParamBuilder:
    """Records parameter shapes; tensors are only allocated by :meth:`materialize`."""

    specs: dict = field(default_factory=dict)

    def add(self, name, shape, init="normal", fan_in=None):
        if name in self.specs:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if fan_in is None:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        self.specs[name] = ParamSpec(shape, init, fan_in)

    def linear(self, name, n_in, n_out, zero=False, bias=True):
        self.add(f"{name}/w", (n_in, n_out), "zeros" if zero else "normal", n_in)
        if bias:
            self.add(f"{name}/b", (n_out,), "zeros")

    def conv(self, name, c_in, c_out, k=3, zero=False):
        self.add(f"{name}/w", (c_out, c_in, k, k), "zeros" if zero else "normal", c_in * k * k)
        self.add(f"{name}/b", (c_out,), "zeros")

    def shapes(self) -> dict:
        return {k: s.shape for k, s in self.specs.items()}

    def count(self) -> int:
        return int(sum(np.prod(s.shape, dtype=np.int64) for s in self.specs.values()))

    def materialize(self, seed: int, dtype=np.float32) -> dict:
        params = {}
        for idx, (name, spec) in enumerate(self.specs.items()):
            if spec.init == "zeros":
                params[name] = np.zeros(spec.shape, dtype=dtype)
            elif spec.init == "ones":
                params[name] = np.ones(spec.shape, dtype=dtype)
            else:
                rng = keyed_rng(seed, idx)
                params[name] = (truncated_normal(rng, spec.shape) / math.sqrt(spec.fan_in)).astype(dtype)
        return params


def truncated_normal(rng, shape, bound=2.0):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    # rescale so the truncated distribution keeps unit variance
    return x / 0.8796256610342398


def sub(params: dict, prefix: str) -> dict:
    """View of the parameters below ``prefix``."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + "/")}


# --------------------------------------------------------------------- layers

def linear(p, name, x):
    y = x @ p[f"{name}/w"]
    b = p.get(f"{name}/b")
    return y if b is None else y + b


def conv(p, name, x):
    """'same' convolution of a channels-last tensor."""
    return ad.conv2d_nhwc(x, p[f"{name}/w"], p[f"{name}/b"])


def rmsnorm(x, scale=None, axis=-1, eps=NORM_EPS):
    """x / sqrt(mean(x^2) + eps) * scale along ``axis``."""
    nd = ad.value(x).ndim
    if axis % nd == nd - 1:
        return ad.rms_norm(x, scale, eps)
    ms = ad.mean(ad.square(x), axis=axis, keepdims=True)
    y = x / ad.sqrt(ms + eps)
    if scale is None:
        return y
    shape = [1] * nd
    shape[axis % nd] = -1
    return y * ad.reshape(scale, tuple(shape))


def group_norm(x, groups, scale=None, bias=None, eps=GROUP_NORM_EPS):
    """Group normalization of a channels-last (B, H, W, C) tensor."""
    b, h, w, c = ad.value(x).shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    y = ad.group_normalize(x, groups, eps)
    if scale is not None:
        y = y * scale
    if bias is not None:
        y = y + bias
    return y


def swiglu(x, w_gate, w_val, w_out):
    """w_out applied to swish(x @ w_gate) * (x @ w_val)."""
    return (ad.silu(x @ w_gate) * (x @ w_val)) @ w_out


def sinusoidal_embedding(t, dim: int, max_freq: float = 1e4) -> np.ndarray:
    """Interleaved [sin(f_k t), cos(f_k t)] with f_k geometric from 1 to ``max_freq``.

    ``t`` may be a scalar or a 1-D array; returns shape (dim,) or (len(t), dim).
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = max_freq ** (np.arange(half) / (half - 1))
    ang = t[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def position_embedding_2d(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal token positions, shape (gh*gw, dim)."""
    if dim % 4:
        raise ValueError(f"2-D position embedding needs dim divisible by 4, got {dim}")
    yy, xx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    # positions are integers here, so use the usual decreasing frequencies
    half = dim // 2
    k = np.arange(half // 2)
    freqs = 1.0 / (1e4 ** (k / max(half // 2, 1)))

    def emb(pos):
        ang = pos.reshape(-1, 1) * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([emb(yy), emb(xx)], axis=1)


def attention(p, name, x, heads: int):
    """Multi-head self-attention over a (B, L, D) sequence."""
    b, n, d = ad.value(x).shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qkv = linear(p, f"{name}/qkv", x)  # B, L, 3D
    qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # B, h, L, dh
    o = ad.reshape(ad.transpose(ad.scaled_dot_attention(q, k, v), (0, 2, 1, 3)), (b, n, d))
    return linear(p, f"{name}/out", o)


def modulate(x, shift, scale):
    """Adaptive normalization modulation x * (1 + scale) + shift."""
    return x * (1.0 + scale) + shift


def adaln_modulate(p, name, x, t_embedding, chunks: int = 3):
    """Project the time embedding to (shift, scale, gate, ...) and modulate ``x``.

    Returns the modulated tensor followed by the remaining chunks (gate first).
    With the zero-initialised projection this is the identity.
    """
    mods = adaln_chunks(p, name, t_embedding, chunks)
    return (modulate(x, mods[0], mods[1]),) + tuple(mods[2:])


def adaln_chunks(p, name, t_embedding, chunks):
    proj = linear(p, name, ad.silu(t_embedding))  # B, chunks*D
    b, total = ad.value(proj).shape
    d = total // chunks
    proj = ad.reshape(proj, (b, 1, total))
    return [proj[:, :, i * d:(i + 1) * d] for i in range(chunks)]


def patchify(x, p: int):
    """(B, C, H, W) -> (B, (H/p)(W/p), C*p*p) in row-major patch order."""
    b, c, h, w = ad.value(x).shape
    if h % p or w % p:
        raise ValueError(f"image ({h}, {w}) not divisible by patch size {p}")
    y = ad.reshape(x, (b, c, h // p, p, w // p, p))
    y = ad.transpose(y, (0, 2, 4, 1, 3, 5))
    return ad.reshape(y, (b, (h // p) * (w // p), c * p * p))


def unpatchify(seq, p: int, h: int, w: int):
    """Inverse of :func:`patchify`."""
    b, n, cpp = ad.value(seq).shape
    c = cpp // (p * p)
    if n != (h // p) * (w // p) or c * p * p != cpp:
        raise ValueError(f"sequence shape {(b, n, cpp)} incompatible with ({h}, {w}) and patch {p}")
    y = ad.reshape(seq, (b, h // p, w // p, c, p, p))
    y = ad.transpose(y, (0, 3, 1, 4, 2, 5))
    return ad.reshape(y, (b, c, h, w))
