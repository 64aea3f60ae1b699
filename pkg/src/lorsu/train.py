"""CLIP loss, Adam, warmup + cosine schedule and the per-session training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class TrainingError(RuntimeError):
    """Non-finite values appeared during optimisation."""


def clip_loss(image_emb: Tensor, text_emb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over the ``B x B`` scaled cosine-similarity matrix."""
    if image_emb.ndim != 2 or image_emb.shape != text_emb.shape:
        raise nc.DimensionError(f"clip_loss: embeddings {image_emb.shape} and {text_emb.shape} must match")
    B = image_emb.shape[0]
    if B == 0:
        raise ValueError("clip_loss needs at least one pair")
    logits = nc.scale(nc.matmul(image_emb, nc.transpose(text_emb)), temperature)
    targets = np.arange(B)
    rows = nc.cross_entropy(logits, targets)
    cols = nc.cross_entropy(nc.transpose(logits), targets)
    return nc.scale(nc.add(rows, cols), 0.5)


class Adam:
    """Adam with bias correction over a fixed list of named tensors."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self, lr: float):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {name} {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def adam_step(state: Adam, lr: float):
    state.step(lr)


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-5
    warmup_steps: int = 0
    total_steps: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")

    @classmethod
    def with_warmup_fraction(cls, peak_lr: float, total_steps: int, fraction: float = 0.1, min_lr: float = 0.0):
        return cls(peak_lr, int(fraction * total_steps), total_steps, min_lr)


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    progress = (step - s.warmup_steps) / span if span else 1.0
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-5
    min_lr: float = 0.0
    warmup_fraction: float = 0.1


def train_session(model, strategy, data, cfg: TrainConfig, seed: int, log_path=None) -> list[dict]:
    """Run one continual-learning session and return the per-epoch log.

    The strategy decides what is trainable; the loop itself is identical for
    every method.
    """
    if len(data) == 0:
        raise ValueError("session has no training data")
    rng = np.random.default_rng(seed)
    batch = min(cfg.batch_size, len(data))
    per_epoch = math.ceil(len(data) / batch)
    strategy.begin_session(model, data, batch, rng)
    trainable = strategy.trainable()
    log: list[dict] = []
    if cfg.epochs > 0 and trainable:
        text = model.encode_texts(data.prompts()).data
        opt = Adam(trainable)
        sched = ScheduleConfig.with_warmup_fraction(cfg.lr, cfg.epochs * per_epoch, cfg.warmup_fraction, cfg.min_lr)
        step = 0
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(data))
            losses = []
            for s in range(0, len(data), batch):
                idx = order[s : s + batch]
                img = model.encode_images(data.images[idx], strategy.weight_fn)
                loss = clip_loss(img, Tensor(text[data.labels[idx]]), model.temperature)
                extra = strategy.penalty(model)
                if extra is not None:
                    loss = nc.add(loss, extra)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                if loss.requires_grad:
                    nc.backward(loss)
                strategy.mask_gradients()
                lr = lr_at(sched, step)  # update i runs at the rate scheduled for step i
                opt.step(lr)
                step += 1
                losses.append(loss.item())
            log.append({
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "lr": lr,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            })
        opt.zero_grad()
    strategy.end_session(model, data, batch)
    if log_path is not None:
        with open(log_path, "a") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return log
