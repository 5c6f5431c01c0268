"""Ancestral (DDPM) and deterministic (DDIM) samplers on a uniform time grid."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from xsynth.diffusion import coefficients, posterior_params
from xsynth.nets import autodiff as ad
from xsynth.nets.model import DenoiserModel
from xsynth.rng import keyed_rng
from xsynth.schedule import NoiseSchedule, alpha_sigma, log_snr


class SamplerKind(str, enum.Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind = SamplerKind.DDPM
    steps: int = 32
    clip_range: Optional[tuple] = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.clip_range is not None:
            lo, hi = (float(c) for c in self.clip_range)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid clip range {self.clip_range}")
            object.__setattr__(self, "clip_range", (lo, hi))


class SamplingError(FloatingPointError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at sampling step {step}")


def make_time_grid(n: int) -> np.ndarray:
    """Descending knots t_i = 1 - i/n, i = 0..n, with exact endpoints."""
    if int(n) < 1:
        raise ValueError(f"need at least one step, got {n}")
    ts = 1.0 - np.arange(n + 1) / n
    ts[0], ts[-1] = 1.0, 0.0
    return ts


def _scalar_as(schedule, t):
    a, s = alpha_sigma(log_snr(schedule, float(t)))
    return float(a), float(s)


def ddim_step(z_t, x_hat, s: float, t: float, schedule: NoiseSchedule):
    """z_s = alpha_s x_hat + (sigma_s / sigma_t)(z_t - alpha_t x_hat)."""
    if not s < t:
        raise ValueError(f"ddim step needs s < t, got s={s}, t={t}")
    a_s, sg_s = _scalar_as(schedule, s)
    a_t, sg_t = _scalar_as(schedule, t)
    return a_s * x_hat + (sg_s / sg_t) * (z_t - a_t * x_hat)


def ddpm_step(z_t, x_hat, s: float, t: float, schedule: NoiseSchedule, noise):
    """One ancestral step; at s == 0 the posterior collapses onto ``x_hat``."""
    if not s < t:
        raise ValueError(f"ddpm step needs s < t, got s={s}, t={t}")
    if s == 0.0:
        return np.array(x_hat, copy=True)
    post = posterior_params(z_t, x_hat, s, t, schedule)
    return post.mean + np.sqrt(post.var) * noise


def _noise(seed, item_keys, step, shape, dtype):
    out = np.empty((len(item_keys),) + tuple(shape), dtype=dtype)
    for j, key in enumerate(item_keys):
        out[j] = keyed_rng(seed, key, step).standard_normal(shape)
    return out


def sample(model: DenoiserModel, condition, cfg: SamplerConfig, schedule: NoiseSchedule,
           item_keys: Optional[Sequence[int]] = None, on_step: Optional[Callable] = None):
    """Translate a batch of conditions (B, ...) into samples of the same shape.

    Each item draws its starting noise and per-step noise from streams keyed by
    (seed, item key, step), so results do not depend on batch composition.
    ``item_keys`` default to the batch positions.  ``on_step(i, t, s, x_hat, z)``
    is invoked after every step.
    """
    cond = np.asarray(condition)
    dtype = cond.dtype if cond.dtype.kind == "f" else np.float32
    cond = cond.astype(dtype, copy=False)
    keys = list(range(cond.shape[0])) if item_keys is None else [int(k) for k in item_keys]
    if len(keys) != cond.shape[0]:
        raise ValueError(f"{len(keys)} item keys for a batch of {cond.shape[0]}")
    item_shape = cond.shape[1:]
    if model.config is not None and not model.config.is_diffusion:
        # direct baseline: one pass, no noise
        out = ad.value(model.apply(np.zeros_like(cond), np.zeros(cond.shape[0]), cond)).astype(dtype)
        if not np.isfinite(out).all():
            raise SamplingError(0, "model output")
        return np.clip(out, *cfg.clip_range) if cfg.clip_range is not None else out
    ts = make_time_grid(cfg.steps)
    z = _noise(cfg.seed, keys, 0, item_shape, dtype)
    x_hat = z
    for i in range(cfg.steps):
        t, s = float(ts[i]), float(ts[i + 1])
        v_hat = ad.value(model.apply(z, np.full(cond.shape[0], t), cond))
        if not np.isfinite(v_hat).all():
            raise SamplingError(i, "model output")
        a_t, sg_t = _scalar_as(schedule, t)
        x_hat = (a_t * z - sg_t * v_hat).astype(dtype, copy=False)
        if cfg.clip_range is not None:
            x_hat = np.clip(x_hat, *cfg.clip_range)
        if s == 0.0:
            z = x_hat
        elif cfg.kind is SamplerKind.DDIM:
            z = ddim_step(z, x_hat, s, t, schedule).astype(dtype, copy=False)
        else:
            noise = _noise(cfg.seed, keys, i + 1, item_shape, dtype)
            z = ddpm_step(z, x_hat, s, t, schedule, noise).astype(dtype, copy=False)
        if not np.isfinite(z).all():
            raise SamplingError(i, "latent")
        if on_step is not None:
            on_step(i, t, s, x_hat, z)
    return x_hat


def gaussian_oracle_denoiser(mu0, var0, posterior_sample: bool = False,
                             schedule: Optional[NoiseSchedule] = None, seed: int = 0) -> DenoiserModel:
    """Exact denoiser for data distributed as N(mu0, diag(var0)).

    By default x_hat is the posterior mean
    (alpha var0 z + sigma^2 mu0) / (alpha^2 var0 + sigma^2).  With
    ``posterior_sample`` it is a draw from p(x | z_t) instead, which makes the
    ancestral sampler exact for any step count.  Output is the v that maps
    back to x_hat.  ``mu0``/``var0`` broadcast against the item shape.
    """
    from xsynth.schedule import NoiseSchedule as _NS

    sched = schedule if schedule is not None else _NS.cosine()
    mu0 = np.asarray(mu0, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    if (var0 < 0).any():
        raise ValueError("oracle variances must be non-negative")
    calls = [0]

    def forward(params, z, t, condition):
        z = np.asarray(z, dtype=np.float64)
        a, s = coefficients(sched, np.asarray(t, dtype=np.float64).reshape(-1), z)
        denom = a * a * var0 + s * s
        x_hat = (a * var0 * z + s * s * mu0) / denom
        if posterior_sample:
            var_post = var0 * s * s / denom
            calls[0] += 1
            draws = np.stack([keyed_rng(seed, calls[0], j).standard_normal(z.shape[1:])
                              for j in range(z.shape[0])])
            x_hat = x_hat + np.sqrt(var_post) * draws
        return (a * z - x_hat) / s

    return DenoiserModel(None, {}, forward)
