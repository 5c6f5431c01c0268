"""Gaussian diffusion algebra: marginals, transitions, posteriors, x/eps/v conversions, loss weights.

Functions accept a scalar ``t`` or a 1-D array of per-sample times; per-sample
coefficients broadcast over the trailing (image) dimensions.  Tensor inputs
may be numpy arrays or traced values from :mod:`xsynth.nets.autodiff`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from xsynth.nets import autodiff as ad
from xsynth.rng import keyed_rng
from xsynth.schedule import NoiseSchedule, alpha_sigma, log_snr


@dataclass
class DiffusionState:
    z: np.ndarray
    t: float


@dataclass
class PredictionTriple:
    x: np.ndarray
    eps: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class TransitionParams:
    alpha_ts: float
    sigma_ts_sq: float


@dataclass
class PosteriorParams:
    mean: np.ndarray
    var: float


class Target(str, enum.Enum):
    V = "v"
    EPS = "eps"
    X = "x"


@dataclass(frozen=True)
class LossWeightConfig:
    target: Target = Target.V
    gamma: float = 5.0
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target", Target(self.target))
        if not self.gamma > 0:
            raise ValueError(f"Min-SNR gamma must be positive, got {self.gamma}")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, t):
        self.t = t
        super().__init__(f"non-finite training loss at diffusion time(s) t={t}")


def _check_shapes(*xs):
    shapes = {tuple(ad.value(x).shape) for x in xs}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def coefficients(schedule: NoiseSchedule, t, like=None):
    """(alpha, sigma) at ``t``; per-sample arrays are shaped to broadcast against ``like``."""
    a, s = alpha_sigma(log_snr(schedule, t))
    if np.ndim(a) == 0:
        return a, s
    nd = ad.value(like).ndim if like is not None else 1
    dtype = ad.value(like).dtype if like is not None else np.float64
    shape = (-1,) + (1,) * (nd - 1)
    return a.reshape(shape).astype(dtype), s.reshape(shape).astype(dtype)


def forward_marginal(x, t, eps, schedule: NoiseSchedule) -> DiffusionState:
    """z_t = alpha_t x + sigma_t eps."""
    _check_shapes(x, eps)
    a, s = coefficients(schedule, t, x)
    return DiffusionState(a * x + s * eps, t)


def transition_params(s: float, t: float, schedule: NoiseSchedule) -> TransitionParams:
    if not s < t:
        raise ValueError(f"transition needs s < t, got s={s}, t={t}")
    a_s, sg_s = alpha_sigma(log_snr(schedule, s))
    a_t, sg_t = alpha_sigma(log_snr(schedule, t))
    a_ts = a_t / a_s
    var = sg_t**2 - a_ts**2 * sg_s**2
    return TransitionParams(a_ts, max(var, 0.0))


def posterior_params(z, x_hat, s: float, t: float, schedule: NoiseSchedule) -> PosteriorParams:
    """Mean and variance of q(z_s | z_t, x) with x replaced by ``x_hat``."""
    _check_shapes(z, x_hat)
    # degenerate ends: nothing to infer (s == t) or the clean sample itself (s == 0)
    if s == t:
        return PosteriorParams(np.array(z, copy=True), 0.0)
    if s == 0.0:
        return PosteriorParams(np.array(x_hat, copy=True), 0.0)
    tp = transition_params(s, t, schedule)
    a_s, sg_s = alpha_sigma(log_snr(schedule, s))
    _, sg_t = alpha_sigma(log_snr(schedule, t))
    if sg_t == 0.0:
        raise ValueError("posterior undefined when sigma_t == 0")
    c_z = tp.alpha_ts * sg_s**2 / sg_t**2
    c_x = a_s * tp.sigma_ts_sq / sg_t**2
    var = tp.sigma_ts_sq * sg_s**2 / sg_t**2
    return PosteriorParams(c_z * z + c_x * x_hat, var)


def to_v(x, eps, t, schedule):
    """v = alpha eps - sigma x."""
    _check_shapes(x, eps)
    a, s = coefficients(schedule, t, x)
    return a * eps - s * x


def x_from_v(z, v, t, schedule):
    _check_shapes(z, v)
    a, s = coefficients(schedule, t, z)
    return a * z - s * v


def v_from_x(z, x, t, schedule):
    """Inverse of :func:`x_from_v` (uses alpha^2 + sigma^2 = 1)."""
    _check_shapes(z, x)
    a, s = coefficients(schedule, t, z)
    return (a * z - x) / s


def x_from_eps(z, eps, t, schedule):
    _check_shapes(z, eps)
    a, s = coefficients(schedule, t, z)
    return (z - s * eps) / a


def eps_from_x(z, x, t, schedule):
    _check_shapes(z, x)
    a, s = coefficients(schedule, t, z)
    return (z - a * x) / s


def prediction_triple(x, eps, t, schedule) -> PredictionTriple:
    return PredictionTriple(x, eps, to_v(x, eps, t, schedule))


def loss_weight(cfg: LossWeightConfig, t, schedule: NoiseSchedule):
    """Per-sample weight w(t).

    With Min-SNR enabled the weights are min(SNR, gamma) divided by the
    implicit weighting of the chosen target: SNR + 1 for v, SNR for eps and
    1 for x.  Disabled weighting returns 1.
    """
    snr = np.exp(log_snr(schedule, t))
    if not cfg.enabled:
        return np.ones_like(snr) if np.ndim(snr) else 1.0
    clipped = np.minimum(snr, cfg.gamma)
    if cfg.target is Target.V:
        return clipped / (snr + 1.0)
    if cfg.target is Target.EPS:
        return clipped / snr
    return clipped


def sample_training_noise(seed: int, step: int, shape, dtype=np.float32):
    """Per-sample (t, eps) drawn from streams keyed by (seed, step, sample index)."""
    n = shape[0]
    ts = np.empty(n)
    eps = np.empty(shape, dtype=dtype)
    for i in range(n):
        rng = keyed_rng(seed, step, i)
        ts[i] = rng.uniform(0.0, 1.0)
        eps[i] = rng.standard_normal(shape[1:]).astype(dtype)
    return ts, eps


def training_loss(model, batch, rng_seed: int, schedule: NoiseSchedule, cfg: LossWeightConfig,
                  step: int = 0, params=None, t=None, eps=None):
    """Weighted v-prediction loss: batch mean of w(t) * pixel-mean (v_hat - v)^2.

    ``batch`` maps ``"source"`` and ``"target"`` to (B, C, H, W) arrays.  ``t``
    and ``eps`` override the seeded draws (used by tests).  Returns a traced
    scalar when ``params`` holds traced values, else a float.
    """
    x = np.asarray(batch["target"])
    cond = np.asarray(batch["source"])
    _check_shapes(x, cond)
    if t is None or eps is None:
        t_draw, eps_draw = sample_training_noise(rng_seed, step, x.shape, x.dtype)
        t = t_draw if t is None else t
        eps = eps_draw if eps is None else eps
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
    eps = np.asarray(eps, dtype=x.dtype)
    z = forward_marginal(x, t, eps, schedule).z
    v = to_v(x, eps, t, schedule)
    v_hat = model.apply(z, t, cond, params=params)
    per_pixel = ad.square(v_hat - v)
    axes = tuple(range(1, x.ndim))
    per_sample = ad.mean(per_pixel, axis=axes)
    w = np.asarray(loss_weight(cfg, t, schedule), dtype=x.dtype)
    loss = ad.mean(per_sample * w)
    _check_finite(loss, per_sample, t)
    return loss if ad.is_var(loss) else float(loss)


def direct_loss(model, batch, params=None):
    """Plain pixel MSE for the direct (non-diffusion) baseline."""
    x = np.asarray(batch["target"])
    cond = np.asarray(batch["source"])
    _check_shapes(x, cond)
    zeros_t = np.zeros(x.shape[0])
    pred = model.apply(np.zeros_like(cond), zeros_t, cond, params=params)
    loss = ad.mean(ad.square(pred - x))
    _check_finite(loss, ad.mean(ad.square(pred - x), axis=tuple(range(1, x.ndim))), zeros_t)
    return loss if ad.is_var(loss) else float(loss)


def _check_finite(loss, per_sample, t):
    if np.isfinite(ad.value(loss)).all():
        return
    bad = ~np.isfinite(ad.value(per_sample))
    raise NonFiniteLossError(np.asarray(t)[bad].tolist() if bad.any() else np.asarray(t).tolist())
