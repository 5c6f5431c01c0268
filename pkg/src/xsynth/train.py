"""Single-threaded, seeded training loop over paired 2-D slices."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from xsynth.diffusion import LossWeightConfig, direct_loss, training_loss
from xsynth.nets import autodiff as ad
from xsynth.nets.archs import ArchConfig
from xsynth.nets.model import DenoiserModel, build_model, with_params
from xsynth.nets.optim import AdamState, adam_step
from xsynth.rng import keyed_rng
from xsynth.schedule import format_schedule, parse_schedule

log = logging.getLogger(__name__)

CROP_STREAM = 0xC809  # tag separating crop draws from the diffusion noise streams


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    batch: int = 16
    crop: int = 32
    schedule: str = "cosine"
    gamma: float = 5.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.crop < 2 or self.lr <= 0:
            raise ValueError(f"invalid training configuration {self}")
        object.__setattr__(self, "schedule", format_schedule(parse_schedule(self.schedule)))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list
    optimizer: AdamState
    seconds: float = 0.0
    extras: dict = field(default_factory=dict)


def random_crops(source, target, crop: int, batch: int, seed: int, step: int):
    """Paired crops drawn from (N, H, W) stacks; slices smaller than ``crop`` are reflect-padded."""
    n, h, w = source.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    if ph or pw:
        widths = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        source = np.pad(source, widths, mode="reflect")
        target = np.pad(target, widths, mode="reflect")
        h, w = source.shape[1:]
    src = np.empty((batch, 1, crop, crop), np.float32)
    tgt = np.empty_like(src)
    for i in range(batch):
        rng = keyed_rng(seed, step, i, CROP_STREAM)
        k = rng.integers(n)
        y = rng.integers(h - crop + 1)
        x = rng.integers(w - crop + 1)
        src[i, 0] = source[k, y:y + crop, x:x + crop]
        tgt[i, 0] = target[k, y:y + crop, x:x + crop]
    return {"source": src, "target": tgt}


def make_loss(model: DenoiserModel, cfg: TrainConfig):
    """Loss closure ``(params, batch, step) -> scalar`` for the model's architecture."""
    if model.config is not None and not model.config.is_diffusion:
        return lambda params, batch, step: direct_loss(model, batch, params=params)
    schedule = parse_schedule(cfg.schedule)
    weights = LossWeightConfig(gamma=cfg.gamma)
    return lambda params, batch, step: training_loss(model, batch, cfg.seed, schedule, weights,
                                                     step=step, params=params)


def train(arch_cfg: ArchConfig, source, target, cfg: TrainConfig,
          model: Optional[DenoiserModel] = None, callback: Optional[Callable] = None) -> TrainResult:
    """Adam on random crops; ``source``/``target`` are (N, H, W) arrays in [-1, 1]."""
    source = np.asarray(source, np.float32)
    target = np.asarray(target, np.float32)
    if source.shape != target.shape or source.ndim != 3:
        raise ValueError(f"expected matching (N, H, W) stacks, got {source.shape} and {target.shape}")
    model = model if model is not None else build_model(arch_cfg, seed=cfg.seed)
    loss_fn = make_loss(model, cfg)
    params = model.params
    opt = AdamState.zeros_like(params)
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = random_crops(source, target, cfg.crop, cfg.batch, cfg.seed, step)
        loss, grads = ad.value_and_grad(lambda p: loss_fn(p, batch, step), params)
        params, opt = adam_step(params, grads, opt, lr=cfg.lr)
        losses.append(float(loss))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = float(np.mean(losses[-cfg.log_every:]))
            log.info("step %d loss %.5f (%.1fs)", step + 1, recent, time.perf_counter() - t0)
        if callback is not None:
            callback(step, float(loss))
    return TrainResult(with_params(model, params), losses, opt, time.perf_counter() - t0)
