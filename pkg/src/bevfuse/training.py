"""Optimizer, training loop and inference helpers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import Box3D, decode_params, detection_loss, make_denoising_queries, match_layers
from .model import Detector, ModelConfig, Sample
from .numerics import NumericError, Tensor, iter_grads, save_tensors, sigmoid

log = logging.getLogger(__name__)


class DivergenceError(NumericError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    warmup: int = 100
    min_lr_ratio: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    clip_norm: float = 10.0
    seed: int = 0
    dn: bool = True
    cbgs: bool = False
    modality_dropout: float = 0.0   # chance per step of dropping one modality
    log_every: int = 100


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min((step - cfg.warmup) / span, 1.0)
    lo = cfg.min_lr_ratio
    return cfg.lr * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd:
                p.data -= lr * self.wd * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Detector
    losses: list[float]
    components: list[tuple[float, ...]] = field(default_factory=list)

    def save_curve(self, path: str | Path) -> None:
        lines = ["# step loss cls box vel dn lr"]
        for i, (l, comp) in enumerate(zip(self.losses, self.components)):
            lines.append(f"{i} {l!r} " + " ".join(repr(float(c)) for c in comp))
        Path(path).write_text("\n".join(lines) + "\n")


def train_step(model: Detector, sample: Sample, cfg: TrainConfig, rng: np.random.Generator, mask=frozenset()):
    """One forward/backward pass; gradients are left in the parameters."""
    head_cfg = model.cfg.head
    dn = None
    if cfg.dn and sample.boxes and head_cfg.dn_groups > 0:
        dn = make_denoising_queries(sample.boxes, model.grid, head_cfg.dn_noise, head_cfg.dn_groups, rng)
    groups, cache = model.forward(sample, dn, mask)
    assign = match_layers(groups, sample.boxes, head_cfg.cost)
    loss, grads = detection_loss(groups, sample.boxes, assign, head_cfg, dn)
    if not math.isfinite(loss.total):
        raise DivergenceError(f"non-finite loss {loss}")
    model.zero_grad()
    model.backward(grads, cache)
    return loss


def train_toy(model_cfg: ModelConfig, cfg: TrainConfig, samples: list[Sample], weights=None,
              model: Detector | None = None, callback=None) -> TrainResult:
    """Adam over the composite detection loss, one scene per step.

    Scenes are drawn with ``weights`` (e.g. class-balanced) when given,
    otherwise in shuffled epochs.  Raises :class:`DivergenceError` on a
    non-finite loss or gradient.
    """
    model = model if model is not None else Detector(model_cfg, seed=cfg.seed)
    params = model.params()
    opt = Adam(params, cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    if weights is not None:
        p = np.asarray(weights, dtype=np.float64)
        p = p / p.sum()
    modalities = sorted(model.cfg.uses)
    result = TrainResult(model, [], [])
    for step in range(cfg.steps):
        if weights is not None:
            idx = int(rng.choice(len(samples), p=p))
        else:
            if not order:
                order = list(rng.permutation(len(samples)))
            idx = order.pop()
        mask = frozenset()
        if cfg.modality_dropout > 0 and len(modalities) > 1 and rng.uniform() < cfg.modality_dropout:
            mask = frozenset([modalities[int(rng.integers(len(modalities)))]])
        loss = train_step(model, samples[idx], cfg, rng, mask)
        gnorm = iter_grads(params)
        if not math.isfinite(gnorm):
            raise DivergenceError(f"non-finite gradient norm at step {step} (loss {loss})")
        if cfg.clip_norm and gnorm > cfg.clip_norm:
            scale = cfg.clip_norm / gnorm
            for t in params:
                t.grad *= scale
        lr = lr_at(step, cfg)
        opt.step(lr)
        result.losses.append(loss.total)
        result.components.append((loss.cls, loss.box, loss.vel, loss.dn, lr))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f (cls %.3f box %.3f vel %.3f dn %.3f) lr %.2e |g| %.2f",
                     step, loss.total, loss.cls, loss.box, loss.vel, loss.dn, lr, gnorm)
        if callback is not None:
            callback(step, loss)
    return result


def predict(model: Detector, sample: Sample, mask=frozenset(), min_score: float = 0.0) -> list[Box3D]:
    """Boxes from the last decoder layer, highest class score per query."""
    groups, _ = model.forward(sample, None, mask)
    logits = groups[0].cls[-1]
    params = groups[0].params[-1]
    prob = sigmoid(logits)
    keep = prob.max(axis=1) >= min_score
    return decode_params(params[keep], prob.argmax(axis=1)[keep], prob.max(axis=1)[keep])


def save_checkpoint(path: str | Path, model: Detector) -> None:
    save_tensors(path, model.named_params())
