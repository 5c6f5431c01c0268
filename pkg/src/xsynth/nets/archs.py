"""Denoiser architectures: direct U-Net baseline, ADM, U-ViT and DiT.

Each architecture is a pair ``(declare(builder, cfg), forward(params, cfg, z, t, cond))``.
Declaring only records shapes, so full-scale parameter counts are available
without allocating the tensors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, asdict
from typing import Callable

import numpy as np

from xsynth import wavelet
from xsynth.nets import autodiff as ad
from xsynth.nets.layers import (
    ParamBuilder,
    attention,
    adaln_chunks,
    conv,
    group_norm,
    linear,
    modulate,
    patchify,
    position_embedding_2d,
    rmsnorm,
    sinusoidal_embedding,
    swiglu,
    unpatchify,
)


class Arch(str, enum.Enum):
    UNET = "unet"
    ADM = "adm"
    UVIT = "uvit"
    DIT = "dit"


class Preset(str, enum.Enum):
    PAPER = "paper"
    LITE = "lite"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ArchConfig:
    arch: Arch
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    res_blocks_per_stage: int = 1
    attention_heads: int = 4
    transformer_depth: int = 0
    hidden_size: int = 0
    patch_size: int = 1
    norm_groups: int = 0
    mlp_ratio: int = 4
    image_channels: int = 1
    preset: Preset = Preset.CUSTOM

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "preset", Preset(self.preset))
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        validate(self)

    @property
    def u_shaped(self) -> bool:
        return self.arch is not Arch.DIT

    @property
    def is_diffusion(self) -> bool:
        return self.arch is not Arch.UNET

    @property
    def size_multiple(self) -> int:
        """Spatial sizes must be a multiple of this; inputs are padded up to it."""
        if self.arch is Arch.DIT:
            return self.patch_size
        m = 2 ** (len(self.channel_multipliers) - 1)
        return 2 * m if self.arch is Arch.UVIT else m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        d["preset"] = self.preset.value
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ArchConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper(cls, arch) -> "ArchConfig":
        return cls(arch=arch, preset=Preset.PAPER, **_PAPER[Arch(arch)])

    @classmethod
    def lite(cls, arch) -> "ArchConfig":
        return cls(arch=arch, preset=Preset.LITE, **_LITE[Arch(arch)])


_PAPER = {
    Arch.UNET: dict(base_channels=128, res_blocks_per_stage=1, attention_heads=0, norm_groups=32),
    Arch.ADM: dict(base_channels=128, res_blocks_per_stage=2, attention_heads=4),
    Arch.UVIT: dict(base_channels=128, res_blocks_per_stage=2, attention_heads=4, transformer_depth=16, hidden_size=512),
    Arch.DIT: dict(base_channels=0, channel_multipliers=(), res_blocks_per_stage=0, attention_heads=16,
                   transformer_depth=24, hidden_size=1024, patch_size=16),
}

_LITE = {
    Arch.UNET: dict(base_channels=32, res_blocks_per_stage=1, attention_heads=0, norm_groups=8),
    Arch.ADM: dict(base_channels=32, res_blocks_per_stage=2, attention_heads=4),
    Arch.UVIT: dict(base_channels=32, res_blocks_per_stage=2, attention_heads=4, transformer_depth=4, hidden_size=128),
    Arch.DIT: dict(base_channels=0, channel_multipliers=(), res_blocks_per_stage=0, attention_heads=4,
                   transformer_depth=4, hidden_size=128, patch_size=4),
}


def validate(cfg: ArchConfig) -> None:
    def bad(msg):
        raise ValueError(f"invalid {cfg.arch.value} config: {msg}")

    if cfg.image_channels < 1:
        bad("image_channels must be >= 1")
    if cfg.arch is Arch.DIT:
        if cfg.channel_multipliers:
            bad("DiT takes no channel multipliers")
        if cfg.res_blocks_per_stage:
            bad("DiT has no residual stages")
        if cfg.patch_size < 1 or cfg.hidden_size < 4 or cfg.transformer_depth < 1:
            bad("DiT needs patch_size >= 1, hidden_size >= 4 and depth >= 1")
        if cfg.attention_heads < 1 or cfg.hidden_size % cfg.attention_heads:
            bad("hidden_size must be divisible by attention_heads")
        if cfg.hidden_size % 4:
            bad("hidden_size must be divisible by 4 for 2-D position embeddings")
        return
    if cfg.base_channels < 1 or not cfg.channel_multipliers or cfg.res_blocks_per_stage < 1:
        bad("U-shaped nets need base_channels, channel_multipliers and res_blocks_per_stage >= 1")
    if cfg.patch_size != 1:
        bad("patch_size only applies to DiT")
    widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
    if cfg.arch is Arch.UNET:
        if cfg.norm_groups < 1 or any(w % cfg.norm_groups for w in widths):
            bad("group norm groups must divide every stage width")
        if cfg.transformer_depth:
            bad("U-Net baseline has no transformer")
        return
    if cfg.norm_groups:
        bad("diffusion nets use RMSNorm, not group norm")
    if cfg.attention_heads < 1:
        bad("attention_heads must be >= 1")
    if cfg.arch is Arch.ADM:
        if cfg.transformer_depth:
            bad("ADM has no transformer")
        if any(w % cfg.attention_heads for w in widths[-2:]):
            bad("attention widths must be divisible by heads")
    if cfg.arch is Arch.UVIT:
        if cfg.transformer_depth < 1 or cfg.hidden_size < 4 or cfg.hidden_size % cfg.attention_heads:
            bad("U-ViT needs a transformer with hidden_size divisible by heads")
        if cfg.hidden_size % 4:
            bad("hidden_size must be divisible by 4 for 2-D position embeddings")


# ---------------------------------------------------------------- components

def _stage_widths(cfg):
    return [cfg.base_channels * m for m in cfg.channel_multipliers]


def _emb_dim(cfg):
    return cfg.hidden_size if cfg.arch is Arch.DIT else 4 * cfg.base_channels


def declare_time_mlp(b: ParamBuilder, dim: int):
    b.linear("temb/fc1", dim, dim)
    b.linear("temb/fc2", dim, dim)


def time_mlp(p, t, dim, dtype):
    e = sinusoidal_embedding(np.asarray(t, dtype=np.float64).reshape(-1), dim).astype(dtype)
    return linear(p, "temb/fc2", ad.silu(linear(p, "temb/fc1", e)))


def declare_resblock(b, name, c_in, c_out, emb_dim, groups):
    if groups:
        b.add(f"{name}/norm1/scale", (c_in,), "ones")
        b.add(f"{name}/norm1/bias", (c_in,), "zeros")
    else:
        b.add(f"{name}/norm1/scale", (c_in,), "ones")
    b.conv(f"{name}/conv1", c_in, c_out)
    if emb_dim:
        b.linear(f"{name}/emb", emb_dim, c_out)
    if groups:
        b.add(f"{name}/norm2/scale", (c_out,), "ones")
        b.add(f"{name}/norm2/bias", (c_out,), "zeros")
    else:
        b.add(f"{name}/norm2/scale", (c_out,), "ones")
    b.conv(f"{name}/conv2", c_out, c_out)
    if c_in != c_out:
        b.conv(f"{name}/skip", c_in, c_out, k=1)


def _norm(p, name, x, groups):
    if groups:
        return group_norm(x, groups, p[f"{name}/scale"], p[f"{name}/bias"])
    return rmsnorm(x, p[f"{name}/scale"])


def resblock(p, name, x, emb, groups):
    h = conv(p, f"{name}/conv1", ad.silu(_norm(p, f"{name}/norm1", x, groups)))
    if emb is not None:
        e = linear(p, f"{name}/emb", emb)
        b, c = ad.value(e).shape
        h = h + ad.reshape(e, (b, 1, 1, c))
    h = conv(p, f"{name}/conv2", ad.silu(_norm(p, f"{name}/norm2", h, groups)))
    skip = conv(p, f"{name}/skip", x) if f"{name}/skip/w" in p else x
    return skip + h


def declare_spatial_attention(b, name, c):
    b.add(f"{name}/norm/scale", (c,), "ones")
    b.linear(f"{name}/qkv", c, 3 * c)
    b.linear(f"{name}/out", c, c, zero=True)


def spatial_attention(p, name, x, heads):
    bsz, h, w, c = ad.value(x).shape
    seq = ad.reshape(rmsnorm(x, p[f"{name}/norm/scale"]), (bsz, h * w, c))
    return x + ad.reshape(attention(p, name, seq, heads), (bsz, h, w, c))


def declare_down(b, name, c_in, c_out):
    b.conv(name, 4 * c_in, c_out, k=1)


def down(p, name, x):
    return conv(p, name, ad.space_to_depth(x, 2))


def declare_up(b, name, c_in, c_out):
    b.conv(name, c_in, 4 * c_out, k=1)


def up(p, name, x):
    return ad.depth_to_space(conv(p, name, x), 2)


def declare_transformer_block(b, name, d, cond_dim, mlp_ratio):
    hidden = mlp_ratio * d
    b.linear(f"{name}/ada", cond_dim, 6 * d, zero=True)
    b.linear(f"{name}/attn/qkv", d, 3 * d)
    b.linear(f"{name}/attn/out", d, d)
    b.add(f"{name}/mlp/gate", (d, hidden), fan_in=d)
    b.add(f"{name}/mlp/val", (d, hidden), fan_in=d)
    b.add(f"{name}/mlp/out", (hidden, d), fan_in=hidden)


def transformer_block(p, name, x, cond, heads):
    """Pre-norm block with adaLN modulation and zero-initialised gates."""
    sh1, sc1, g1, sh2, sc2, g2 = adaln_chunks(p, f"{name}/ada", cond, 6)
    h = modulate(rmsnorm(x), sh1, sc1)
    x = x + g1 * attention(p, f"{name}/attn", h, heads)
    h = modulate(rmsnorm(x), sh2, sc2)
    x = x + g2 * swiglu(h, p[f"{name}/mlp/gate"], p[f"{name}/mlp/val"], p[f"{name}/mlp/out"])
    return x


# ---------------------------------------------------------------- U-shaped

def _declare_unet_body(b, cfg, c_in, c_out, emb_dim, groups, attn_stages, middle):
    widths = _stage_widths(cfg)
    n = cfg.res_blocks_per_stage
    b.conv("stem", c_in, widths[0])
    for i, w in enumerate(widths):
        for j in range(n):
            declare_resblock(b, f"enc{i}/res{j}", w, w, emb_dim, groups)
            if i in attn_stages:
                declare_spatial_attention(b, f"enc{i}/attn{j}", w)
        if i + 1 < len(widths):
            declare_down(b, f"enc{i}/down", w, widths[i + 1])
    middle(b)
    for i in reversed(range(len(widths))):
        w = widths[i]
        for j in range(n):
            declare_resblock(b, f"dec{i}/res{j}", w, w, emb_dim, groups)
            if i in attn_stages:
                declare_spatial_attention(b, f"dec{i}/attn{j}", w)
        if i > 0:
            declare_up(b, f"dec{i}/up", w, widths[i - 1])
    b.add("head/norm/scale", (widths[0],), "ones")
    if groups:
        b.add("head/norm/bias", (widths[0],), "zeros")
    b.conv("head/conv", widths[0], c_out, zero=True)


def _unet_body(p, cfg, x, emb, groups, attn_stages, middle):
    widths = _stage_widths(cfg)
    n = cfg.res_blocks_per_stage
    h = conv(p, "stem", x)
    skips = []
    for i in range(len(widths)):
        for j in range(n):
            h = resblock(p, f"enc{i}/res{j}", h, emb, groups)
            if i in attn_stages:
                h = spatial_attention(p, f"enc{i}/attn{j}", h, cfg.attention_heads)
        skips.append(h)
        if i + 1 < len(widths):
            h = down(p, f"enc{i}/down", h)
    h = middle(p, h)
    for i in reversed(range(len(widths))):
        h = h + skips[i]
        for j in range(n):
            h = resblock(p, f"dec{i}/res{j}", h, emb, groups)
            if i in attn_stages:
                h = spatial_attention(p, f"dec{i}/attn{j}", h, cfg.attention_heads)
        if i > 0:
            h = up(p, f"dec{i}/up", h)
    h = ad.silu(_norm(p, "head/norm", h, groups))
    return conv(p, "head/conv", h)


def _attn_stages(cfg):
    k = len(cfg.channel_multipliers)
    return set(range(max(k - 2, 0), k))


def declare_unet(b, cfg):
    _declare_unet_body(b, cfg, cfg.image_channels, cfg.image_channels, 0, cfg.norm_groups, set(), lambda b: None)


def _to_nhwc(x):
    return ad.transpose(x, (0, 2, 3, 1))


def _to_nchw(x):
    return ad.transpose(x, (0, 3, 1, 2))


def forward_unet(p, cfg, z, t, cond):
    # direct translation baseline: only the source image is used
    return _to_nchw(_unet_body(p, cfg, _to_nhwc(cond), None, cfg.norm_groups, set(), lambda p, h: h))


def declare_adm(b, cfg):
    e = _emb_dim(cfg)
    declare_time_mlp(b, e)
    w = _stage_widths(cfg)[-1]

    def middle(b):
        declare_spatial_attention(b, "mid/attn", w)

    _declare_unet_body(b, cfg, 2 * cfg.image_channels, cfg.image_channels, e, 0, _attn_stages(cfg), middle)


def forward_adm(p, cfg, z, t, cond):
    x = _to_nhwc(ad.concat([z, cond], axis=1))
    emb = ad.silu(time_mlp(p, t, _emb_dim(cfg), ad.value(z).dtype))

    def middle(p, h):
        return spatial_attention(p, "mid/attn", h, cfg.attention_heads)

    return _to_nchw(_unet_body(p, cfg, x, emb, 0, _attn_stages(cfg), middle))


def declare_uvit(b, cfg):
    e = _emb_dim(cfg)
    declare_time_mlp(b, e)
    w = _stage_widths(cfg)[-1]
    d = cfg.hidden_size

    def middle(b):
        b.linear("mid/proj_in", w, d)
        for k in range(cfg.transformer_depth):
            declare_transformer_block(b, f"mid/block{k}", d, e, cfg.mlp_ratio)
        b.linear("mid/proj_out", d, w)

    c = cfg.image_channels
    _declare_unet_body(b, cfg, 4 * 2 * c, 4 * c, e, 0, set(), middle)


def forward_uvit(p, cfg, z, t, cond):
    zc = np.concatenate([ad.value(z), ad.value(cond)], axis=1)
    x = np.ascontiguousarray(wavelet.dwt2_stacked(zc).astype(ad.value(z).dtype).transpose(0, 2, 3, 1))
    emb = time_mlp(p, t, _emb_dim(cfg), x.dtype)
    act = ad.silu(emb)

    def middle(p, h):
        bsz, hh, ww, c = ad.value(h).shape
        seq = ad.reshape(h, (bsz, hh * ww, c))
        seq = linear(p, "mid/proj_in", seq) + position_embedding_2d(hh, ww, cfg.hidden_size).astype(x.dtype)
        for k in range(cfg.transformer_depth):
            seq = transformer_block(p, f"mid/block{k}", seq, emb, cfg.attention_heads)
        seq = linear(p, "mid/proj_out", seq)
        return ad.reshape(seq, (bsz, hh, ww, c))

    out = _unet_body(p, cfg, x, act, 0, set(), middle)
    return wavelet.idwt2_traced(_to_nchw(out))


def declare_dit(b, cfg):
    d, pch, c = cfg.hidden_size, cfg.patch_size, cfg.image_channels
    declare_time_mlp(b, d)
    b.linear("patch_embed", 2 * c * pch * pch, d)
    for k in range(cfg.transformer_depth):
        declare_transformer_block(b, f"block{k}", d, d, cfg.mlp_ratio)
    b.linear("final/ada", d, 2 * d, zero=True)
    b.linear("final/out", d, c * pch * pch, zero=True)


def forward_dit(p, cfg, z, t, cond):
    pch = cfg.patch_size
    x = ad.concat([z, cond], axis=1)
    _, _, h, w = ad.value(x).shape
    dtype = ad.value(z).dtype
    emb = time_mlp(p, t, cfg.hidden_size, dtype)
    seq = linear(p, "patch_embed", patchify(x, pch))
    seq = seq + position_embedding_2d(h // pch, w // pch, cfg.hidden_size).astype(dtype)
    for k in range(cfg.transformer_depth):
        seq = transformer_block(p, f"block{k}", seq, emb, cfg.attention_heads)
    shift, scale = adaln_chunks(p, "final/ada", emb, 2)
    seq = linear(p, "final/out", modulate(rmsnorm(seq), shift, scale))
    return unpatchify(seq, pch, h, w)


ARCHS: dict[Arch, tuple[Callable, Callable]] = {
    Arch.UNET: (declare_unet, forward_unet),
    Arch.ADM: (declare_adm, forward_adm),
    Arch.UVIT: (declare_uvit, forward_uvit),
    Arch.DIT: (declare_dit, forward_dit),
}
