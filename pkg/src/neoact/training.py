"""Weighted-BCE multi-label training with two learning-rate groups."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as ops
from .data import LABELS, group_split
from .metrics import f1_scores, macro_f1
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
MODES = ("baseline", "ft-lc", "ft-c-lora")


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_head: float = 1e-3
    lr_backbone: float = 1e-3
    w_plus: tuple[float, ...] | None = None
    seed: int = 0
    patience: int = 5
    mode: str = "baseline"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    val_fraction: float = 0.1
    max_steps: int | None = None
    clip_norm: float | None = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_head < 0 or self.lr_backbone < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.mode == "ft-c-lora" and self.lr_backbone > self.lr_head:
            raise ConfigError("ft-c-lora needs lr_backbone <= lr_head")
        if self.w_plus is not None:
            self.w_plus = tuple(float(w) for w in self.w_plus)
            if len(self.w_plus) != len(LABELS) or min(self.w_plus) < 1:
                raise ConfigError("w_plus needs 4 weights, each >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items() if k in known})


# -- loss ------------------------------------------------------------------

def wbce_loss(y_hat: Tensor, y, w_plus) -> Tensor:
    """Mean over batch and classes of ``-(w+ y log p + (1 - y) log(1 - p))``."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w_plus, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ops.DimensionError(f"predictions {y_hat.shape} vs labels {y.shape}")
    if w.shape != (y.shape[-1],):
        raise ops.DimensionError(f"w_plus shape {w.shape} does not match {y.shape[-1]} classes")
    p = ops.clip(y_hat, PROB_EPS, 1 - PROB_EPS)
    pos = ops.log(p) * (w * y)
    neg = ops.log(1.0 - p) * (1.0 - y)
    return -(pos + neg).mean()


def compute_pos_weights(labels, lo: float = 1.0, hi: float = 20.0) -> np.ndarray:
    """``#neg / #pos`` per class, clamped to ``[lo, hi]``."""
    y = np.asarray(labels).astype(bool)
    pos = y.sum(axis=0)
    for c, n in enumerate(pos):
        if n == 0:
            raise ConfigError(f"class {LABELS[c]!r} has no positive training examples")
    neg = len(y) - pos
    return np.clip(neg / pos, lo, hi).astype(np.float64)


# -- optimizer --------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay applies to ``*.w`` matrices only."""

    def __init__(self, groups: Sequence[tuple[dict[str, Tensor], float]], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.groups = [(dict(params), lr) for params, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g, _ in self.groups for p in g.values()}
        self.v = {id(p): np.zeros_like(p.data) for g, _ in self.groups for p in g.values()}

    def params(self):
        for g, lr in self.groups:
            for name, p in g.items():
                yield name, p, lr

    def zero_grad(self) -> None:
        for _, p, _ in self.params():
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p, _ in self.params() if p.grad is not None))
        if total > max_norm:
            scale = max_norm / (total + 1e-12)
            for _, p, _ in self.params():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return total

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p, lr in self.params():
            if p.grad is None or lr == 0:
                continue
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and name.endswith(".w"):
                update = update + self.wd * p.data
            p.data -= lr * update


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_macro_f1: float
    lr_head: float
    lr_backbone: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_macro_f1: float = float("nan")
    steps: int = 0
    w_plus: tuple[float, ...] = ()
    step_losses: list[float] = field(default_factory=list)


def _split_groups(model) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    groups = model.param_groups()
    head = {k: model.params[k] for k in groups["head"] if model.params[k].requires_grad}
    back = {k: model.params[k] for k in groups["backbone"] if model.params[k].requires_grad}
    return head, back


def _macro_f1(model, x, y, threshold, batch_size) -> float:
    probs = model.predict(x, batch_size=batch_size) if hasattr(model, "predict") else None
    return macro_f1(f1_scores(probs, y, threshold))


def train(model, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          groups: Sequence[str] | None = None, val: tuple[np.ndarray, np.ndarray] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train ``model`` on prepared ``inputs`` (see ``model.prepare``) and 0/1 ``labels``.

    A validation carve-out of ``cfg.val_fraction`` is taken by ``groups``
    (episode ids) unless ``val`` is given.  The returned model carries the
    parameters of the epoch with the best validation macro-F1.  ``on_epoch``
    sees each epoch record; an exception raised there stops training.
    """
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.float64)
    if len(inputs) == 0:
        raise ConfigError("empty training set")
    if getattr(model, "mode", cfg.mode) != cfg.mode and cfg.mode != "baseline":
        raise ConfigError(f"model mode {model.mode!r} does not match config mode {cfg.mode!r}")

    if val is None and cfg.val_fraction > 0 and groups is not None:
        vmask = group_split(list(groups), cfg.val_fraction, seed=cfg.seed)
        if vmask.any():
            val = (inputs[vmask], labels[vmask])
            inputs, labels = inputs[~vmask], labels[~vmask]
    w_plus = np.asarray(cfg.w_plus if cfg.w_plus is not None else compute_pos_weights(labels))

    head, back = _split_groups(model)
    opt = AdamW([(head, cfg.lr_head), (back, cfg.lr_backbone)], betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    result = TrainResult(model=model, w_plus=tuple(w_plus.tolist()))
    best_state = model.state()
    best_score = -np.inf
    stale = 0
    n = len(inputs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb = model.prepare(inputs[idx])
            loss = wbce_loss(model.forward(xb), labels[idx], w_plus)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi} (lr_head={cfg.lr_head}, "
                    f"lr_backbone={cfg.lr_backbone})")
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm:
                opt.clip_grad_norm(cfg.clip_norm)
            opt.step()
            losses.append(value)
            result.step_losses.append(value)
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
        if val is not None:
            score = _macro_f1(model, val[0], val[1], cfg.threshold, max(cfg.batch_size, 64))
        else:
            score = float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), score, cfg.lr_head, cfg.lr_backbone)
        result.history.append(rec)
        log.info("epoch %d loss %.4f val_macro_f1 %.4f", epoch, rec.loss, score)
        if on_epoch is not None:
            on_epoch(rec)
        if val is None or score > best_score:
            best_score = score if val is not None else best_score
            best_state = model.state()
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break
        if val is not None and stale >= cfg.patience:
            break
    model.load_state(best_state)
    result.best_val_macro_f1 = float(best_score) if val is not None else float("nan")
    for p in model.params.values():
        p.grad = None
    return result


def write_run_dir(out_dir, cfg: TrainConfig, result: TrainResult, metrics: dict | None = None) -> Path:
    """Config snapshot, per-epoch CSV, best checkpoint and a final metrics record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_macro_f1", "lr_head", "lr_backbone"])
        for r in result.history:
            w.writerow([r.epoch, repr(r.loss), repr(r.val_macro_f1), r.lr_head, r.lr_backbone])
    result.model.save(out / "best.ckpt")
    if hasattr(result.model, "save_adapters") and getattr(result.model, "adapters", None):
        result.model.save_adapters(out / "adapters.ckpt")
    record = {"best_epoch": result.best_epoch, "best_val_macro_f1": result.best_val_macro_f1,
              "steps": result.steps, "w_plus": list(result.w_plus)}
    record.update(metrics or {})
    (out / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out
