"""Continuous-time noise schedules expressed as log-SNR functions.

All schedules are variance preserving: alpha(t)**2 + sigma(t)**2 == 1, with
t = 0 clean data and t = 1 pure noise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

LAMBDA_MIN = -20.0
LAMBDA_MAX = 20.0


class ScheduleKind(str, enum.Enum):
    COSINE = "cosine"
    SHIFTED_COSINE = "shifted-cosine"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: ScheduleKind = ScheduleKind.COSINE
    shift_d: float = 256.0
    sig_start: float = 0.0
    sig_end: float = 3.0
    sig_tau: float = 0.9
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.lambda_min < self.lambda_max:
            raise ValueError(f"lambda clamp must satisfy min < max, got ({self.lambda_min}, {self.lambda_max})")
        if self.shift_d <= 0:
            raise ValueError("shifted-cosine reference resolution d must be positive")
        if self.sig_tau <= 0:
            raise ValueError("sigmoid tau must be positive")
        if self.sig_start == self.sig_end:
            raise ValueError("sigmoid start and end must differ")

    @classmethod
    def cosine(cls, **kw) -> "NoiseSchedule":
        return cls(ScheduleKind.COSINE, **kw)

    @classmethod
    def shifted_cosine(cls, d: float, **kw) -> "NoiseSchedule":
        return cls(ScheduleKind.SHIFTED_COSINE, shift_d=float(d), **kw)

    @classmethod
    def sigmoid(cls, start: float = 0.0, end: float = 3.0, tau: float = 0.9, **kw) -> "NoiseSchedule":
        return cls(ScheduleKind.SIGMOID, sig_start=start, sig_end=end, sig_tau=tau, **kw)

    # convenience wrappers
    def log_snr(self, t, clamp: bool = True):
        return log_snr(self, t, clamp=clamp)

    def alpha_sigma(self, t):
        return alpha_sigma(log_snr(self, t))

    def snr(self, t):
        return snr(self, t)

    def descriptor(self) -> str:
        return format_schedule(self)


def _check_t(t):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"diffusion time must be finite, got {t!r}")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"diffusion time must lie in [0, 1], got {t!r}")
    return arr


def _log_sigmoid(x):
    # log(sigmoid(x)) without overflow
    return -np.logaddexp(0.0, -x)


def _sigmoid_log_snr(sch: NoiseSchedule, t):
    # alpha^2(t) = (raw(t) - raw(1)) / (raw(0) - raw(1)),  raw(u) = sigmoid(-((e - s) u + s) / tau)
    # so lambda = log(raw(t) - raw(1)) - log(raw(0) - raw(t)), formed from differences of sigmoids.
    s, e, tau = sch.sig_start, sch.sig_end, sch.sig_tau
    x = lambda u: ((e - s) * u + s) / tau
    raw = lambda u: 1.0 / (1.0 + np.exp(x(u)))
    r0, r1, rt = raw(0.0), raw(1.0), raw(t)
    with np.errstate(divide="ignore"):
        num = np.log(np.abs(rt - r1))
        den = np.log(np.abs(r0 - rt))
    return num - den


def log_snr(schedule: NoiseSchedule, t, clamp: bool = True):
    """Log signal-to-noise ratio at diffusion time ``t`` (scalar or array).

    With ``clamp=False`` the raw value is returned, which is infinite at the
    cosine endpoints.
    """
    t = _check_t(t)
    kind = schedule.kind
    with np.errstate(divide="ignore"):
        if kind in (ScheduleKind.COSINE, ScheduleKind.SHIFTED_COSINE):
            lam = -2.0 * np.log(np.tan(np.pi * t / 2.0))
            # tan(pi/2) is finite in floating point; the true limit is -inf
            lam = np.where(t == 1.0, -np.inf, lam)
            if kind is ScheduleKind.SHIFTED_COSINE:
                lam = lam + 2.0 * math.log(schedule.shift_d / 256.0)
        else:
            lam = _sigmoid_log_snr(schedule, t)
    if clamp:
        lam = np.clip(lam, schedule.lambda_min, schedule.lambda_max)
    return float(lam) if lam.ndim == 0 else lam


def alpha_sigma(lam):
    """(alpha, sigma) with alpha^2 = sigmoid(lambda), sigma^2 = sigmoid(-lambda)."""
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise ValueError("log-SNR must be finite")
    a = np.exp(0.5 * _log_sigmoid(lam))
    s = np.exp(0.5 * _log_sigmoid(-lam))
    if lam.ndim == 0:
        return float(a), float(s)
    return a, s


def snr(schedule: NoiseSchedule, t):
    return np.exp(log_snr(schedule, t))


def parse_schedule(desc: str) -> NoiseSchedule:
    """Parse ``cosine``, ``shifted-cosine:d=64`` or ``sigmoid:s=0,e=3,tau=0.9``.

    Any descriptor also accepts ``lmin``/``lmax`` keys overriding the log-SNR clamp.
    """
    name, _, rest = desc.strip().partition(":")
    kv = {}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise ValueError(f"malformed schedule option {item!r} in {desc!r}")
            kv[key.strip()] = float(val)
    clamp = {}
    if "lmin" in kv:
        clamp["lambda_min"] = kv.pop("lmin")
    if "lmax" in kv:
        clamp["lambda_max"] = kv.pop("lmax")
    if name == "cosine":
        allowed = set()
        sch = lambda: NoiseSchedule.cosine(**clamp)
    elif name == "shifted-cosine":
        allowed = {"d"}
        if "d" not in kv:
            raise ValueError("shifted-cosine requires d=<int>")
        sch = lambda: NoiseSchedule.shifted_cosine(kv["d"], **clamp)
    elif name == "sigmoid":
        allowed = {"s", "e", "tau"}
        sch = lambda: NoiseSchedule.sigmoid(kv.get("s", 0.0), kv.get("e", 3.0), kv.get("tau", 0.9), **clamp)
    else:
        raise ValueError(f"unknown schedule {name!r}")
    extra = set(kv) - allowed
    if extra:
        raise ValueError(f"unknown options {sorted(extra)} for schedule {name!r}")
    return sch()


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def format_schedule(schedule: NoiseSchedule) -> str:
    if schedule.kind is ScheduleKind.COSINE:
        parts = []
        head = "cosine"
    elif schedule.kind is ScheduleKind.SHIFTED_COSINE:
        parts = [f"d={_fmt(schedule.shift_d)}"]
        head = "shifted-cosine"
    else:
        parts = [f"s={_fmt(schedule.sig_start)}", f"e={_fmt(schedule.sig_end)}", f"tau={_fmt(schedule.sig_tau)}"]
        head = "sigmoid"
    if schedule.lambda_min != LAMBDA_MIN:
        parts.append(f"lmin={_fmt(schedule.lambda_min)}")
    if schedule.lambda_max != LAMBDA_MAX:
        parts.append(f"lmax={_fmt(schedule.lambda_max)}")
    return head + (":" + ",".join(parts) if parts else "")
