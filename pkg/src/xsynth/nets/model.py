from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from xsynth.nets import autodiff as ad
from xsynth.nets.archs import ARCHS, ArchConfig
from xsynth.nets.layers import ParamBuilder

@dataclass
class DenoiserModel:
    """Parameters plus a pure ``apply(z, t, condition, params=None)``.

    ``config`` is ``None`` for analytic oracle models that carry no parameters.
    """

    config: Optional[ArchConfig]
    params: dict
    forward: Callable = field(repr=False)

    def apply(self, z, t, condition, params=None):
        return self.forward(self.params if params is None else params, z, t, condition)

    __call__ = apply

def declare(cfg: ArchConfig) -> ParamBuilder:
    b = ParamBuilder()
    ARCHS[cfg.arch][0](b, cfg)
    return b

def param_shapes(cfg: ArchConfig) -> dict:
    return declare(cfg).shapes()

def param_count(model_or_params) -> int:
    """Total element count of a model, a parameter dict, or a shape dict."""
    if isinstance(model_or_params, DenoiserModel):
        model_or_params = model_or_params.params
    total = 0
    for v in model_or_params.values():
        shape = v if isinstance(v, tuple) else np.shape(v)
        total += int(np.prod(shape, dtype=np.int64))
    return total

def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if not (ph or pw):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, widths, mode="symmetric")

def make_forward(cfg: ArchConfig) -> Callable:
    net = ARCHS[cfg.arch][1]
    m = cfg.size_multiple

    def forward(params, z, t, condition):
        z = ad.value(z)
        cond = ad.value(condition)
        if z.shape != cond.shape:
            raise ValueError(f"noisy input {z.shape} and condition {cond.shape} differ in shape")
        if z.ndim != 4 or z.shape[1] != cfg.image_channels:
            raise ValueError(f"expected (B, {cfg.image_channels}, H, W) inputs, got {z.shape}")
        h, w = z.shape[-2:]
        bsz = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (bsz,))
        out = net(params, cfg, _pad_to_multiple(z, m), t, _pad_to_multiple(cond, m))
        if ad.value(out).shape[-2:] != (h, w):
            out = out[:, :, :h, :w]
        return out

    return forward

def build_model(cfg: ArchConfig, seed: int = 0, dtype=np.float32) -> DenoiserModel:
    params = declare(cfg).materialize(seed, dtype)
    return DenoiserModel(cfg, params, make_forward(cfg))

def with_params(model: DenoiserModel, params: dict) -> DenoiserModel:
    return DenoiserModel(model.config, params, model.forward)
