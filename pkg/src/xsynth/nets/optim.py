"""Adam with bias correction over flat parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TreeMismatchError(ValueError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def _check_trees(params, grads, state):
    keys = set(params)
    for what, tree in (("grads", grads), ("first moments", state.m), ("second moments", state.v)):
        if set(tree) != keys:
            missing = sorted(keys - set(tree))[:3]
            extra = sorted(set(tree) - keys)[:3]
            raise TreeMismatchError(f"{what} do not match params (missing {missing}, extra {extra})")
        for k in keys:
            if np.shape(tree[k]) != np.shape(params[k]):
                raise TreeMismatchError(f"{what}[{k!r}] has shape {np.shape(tree[k])}, "
                                        f"param has {np.shape(params[k])}")


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-4,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Return (new_params, new_state); inputs are left untouched."""
    _check_trees(params, grads, state)
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, step)
