"""Adam with inverse-square-root warmup, the training loop and checkpoint averaging."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .model import TransformerModel

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite value."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[T.Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place.  ``None`` gradients count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def lr_schedule(step: int, d: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` for ``step >= 1``."""
    step = max(step, 1)
    return scale * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= factor
    return total


@dataclass
class TrainConfig:
    steps: int = 2000
    tokens_per_batch: int = 2048
    warmup_steps: int = 200
    lr_scale: float = 1.0
    alpha: float | None = None
    checkpoint_every: int = 200
    average_last: int = 3
    clip_norm: float = 1.0
    seed: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("steps", "tokens_per_batch", "warmup_steps", "checkpoint_every", "average_last"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class StepRecord:
    step: int
    lm: float
    ld: float
    le: float
    lr: float
    util: np.ndarray

    def to_line(self) -> str:
        fields = [str(self.step), f"{self.lm:.6f}", f"{self.ld:.6f}", f"{self.le:.6f}",
                  f"{self.lr:.8g}"] + [f"{u:.6f}" for u in self.util]
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "StepRecord":
        p = line.rstrip("\n").split("\t")
        return cls(int(p[0]), float(p[1]), float(p[2]), float(p[3]), float(p[4]),
                   np.array([float(x) for x in p[5:]]))


@dataclass
class TrainResult:
    log: list[StepRecord]
    checkpoints: list[str]
    averaged: str | None = None


def _check_finite(model: TransformerModel, loss: float) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    for name, p in model.named_parameters().items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
        if not np.isfinite(p.data).all():
            raise NumericError(f"non-finite value in {name}")


def utilization_histogram(breakdown, n_branches: int) -> np.ndarray:
    if not breakdown.utilization:
        return np.zeros(0)
    return np.mean([u for u in breakdown.utilization.values()], axis=0)


def train(model: TransformerModel, data: Iterable, cfg: TrainConfig) -> TrainResult:
    """Optimize ``model`` on ``data`` (an iterator of batches) for ``cfg.steps`` steps."""
    if cfg.alpha is not None:
        model.cfg = model.cfg.replace(alpha=cfg.alpha)
    params = model.parameters()
    state = AdamState()
    records: list[StepRecord] = []
    saved: list[str] = []
    out = Path(cfg.out_dir) if cfg.out_dir else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log", "w", encoding="utf-8")
    batches: Iterator = iter(data)
    try:
        for step in range(1, cfg.steps + 1):
            batch = next(batches)
            for p in params:
                p.grad = None
            br = model.total_loss(batch, training=True)
            T.backward(br.total)
            _check_finite(model, float(br.total.data))
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_schedule(step, model.cfg.d, cfg.warmup_steps, cfg.lr_scale)
            adam_step(params, grads, state, lr)
            rec = StepRecord(step, br.lm, br.diversity, br.entropy, lr,
                             utilization_histogram(br, model.cfg.n_branches))
            records.append(rec)
            if log_fh is not None:
                log_fh.write(rec.to_line() + "\n")
            if out is not None and step % cfg.checkpoint_every == 0:
                path = str(out / f"checkpoint_{step:06d}.bin")
                ckpt_io.save_model(model, path, {"step": step})
                saved.append(path)
            if step % 100 == 0:
                log.info("step %d lm %.4f ld %.4f le %.4f lr %.3g", step, br.lm, br.diversity,
                         br.entropy, lr)
    finally:
        if log_fh is not None:
            log_fh.close()
    result = TrainResult(records, saved)
    if out is not None and saved:
        avg = average_checkpoints(saved[-cfg.average_last:])
        result.averaged = str(out / "averaged.bin")
        ckpt_io.write(avg, result.averaged)
    return result


def read_log(path) -> list[StepRecord]:
    with open(path, encoding="utf-8") as fh:
        return [StepRecord.from_line(line) for line in fh if line.strip()]


def average_checkpoints(paths: Sequence[str | os.PathLike]) -> ckpt_io.Checkpoint:
    """Elementwise mean of checkpoints with identical manifests."""
    if not paths:
        raise ValueError("no checkpoints to average")
    ckpts = [ckpt_io.read(p) for p in paths]
    key = ckpts[0].manifest_key()
    for p, c in zip(paths, ckpts):
        if c.manifest_key() != key:
            raise ckpt_io.CheckpointError(f"{p}: manifest differs from {paths[0]}")
        if c.scales:
            raise ckpt_io.CheckpointError(f"{p}: cannot average quantized checkpoints")
    tensors = {}
    for name in ckpts[0].tensors:
        acc = np.zeros(ckpts[0].tensors[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[name]
        tensors[name] = (acc / len(ckpts)).astype(np.float32)
    return ckpt_io.Checkpoint(ckpts[0].config, tensors, ckpts[0].folded)
