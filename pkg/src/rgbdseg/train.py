"""Toy training loop and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ops
from .data import Split
from .metrics import ConfusionMatrix
from .model import ModelConfig, SegModel, save_checkpoint
from .optim import DivergenceError, OptimState, adam_step, cosine_lr
from .tensor import NonFiniteError, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 6e-4
    weight_decay: float = 0.01
    eval_every: int = 500
    seed: int = 0
    flip: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("steps must be >= 0; batch_size and eval_every positive")


@dataclass
class TrainResult:
    model: SegModel
    rows: list[dict] = field(default_factory=list)
    final_loss: float | None = None
    final_miou: float | None = None
    final_ious: list = field(default_factory=list)

    def csv_text(self) -> str:
        return metrics_csv(self.rows, self.model.config.num_classes)


def csv_header(num_classes: int) -> list[str]:
    return ["step", "split", "loss", "miou"] + [f"iou_class{k}" for k in range(num_classes)]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(rows: list[dict], num_classes: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(num_classes))
    for r in rows:
        ious = r.get("ious") or [None] * num_classes
        writer.writerow([r["step"], r["split"], _fmt(r["loss"]), _fmt(r.get("miou"))] + [_fmt(v) for v in ious])
    return buf.getvalue()


def evaluate(model: SegModel, split: Split, batch_size: int = 16) -> tuple[float, ConfusionMatrix]:
    """Mean per-pixel cross-entropy and the confusion matrix over ``split``."""
    conf = ConfusionMatrix(model.config.num_classes)
    total = 0.0
    with no_grad(), threadpool_limits(1):
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            logits = model(split.rgb[sl], split.depth[sl])
            labels = split.labels[sl]
            total += ops.cross_entropy(logits, labels).item() * labels.size
            conf.update(logits.data.argmax(axis=-1), labels)
    return total / split.labels.size, conf


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(config: ModelConfig, data: dict[str, Split], tc: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Train from a seeded initialization; deterministic given ``tc.seed``.

    Writes ``metrics.csv`` and ``checkpoint/`` under ``out_dir`` when given.
    Raises :class:`DivergenceError` carrying the failing step on a NaN/Inf.
    """
    model = SegModel(config, seed=tc.seed)
    params = model.parameters()
    state = OptimState(lr=tc.lr, weight_decay=tc.weight_decay)
    train_split, val_split = data["train"], data.get("val")
    if len(train_split) < tc.batch_size:
        raise ValueError("training split is smaller than one batch")
    rng = np.random.default_rng([tc.seed, 1])
    batches = _batches(len(train_split), tc.batch_size, rng)
    result = TrainResult(model)
    running, count = 0.0, 0

    def log_val(step):
        if val_split is None:
            return
        loss, conf = evaluate(model, val_split)
        result.final_loss, result.final_miou, result.final_ious = loss, conf.miou(), conf.ious()
        result.rows.append({"step": step, "split": "val", "loss": loss, "miou": conf.miou(), "ious": conf.ious()})
        log.info("step %d val loss %.4f mIoU %.4f", step, loss, conf.miou() or 0.0)

    with threadpool_limits(1):
        for step in range(1, tc.steps + 1):
            idx = next(batches)
            rgb, depth, labels = train_split.rgb[idx], train_split.depth[idx], train_split.labels[idx]
            if tc.flip:
                flips = rng.random(len(idx)) < 0.5
                rgb = np.where(flips[:, None, None, None], rgb[:, :, ::-1], rgb)
                depth = np.where(flips[:, None, None, None], depth[:, :, ::-1], depth)
                labels = np.where(flips[:, None, None], labels[:, :, ::-1], labels)
            for p in params:
                p.grad = None
            try:
                loss = ops.cross_entropy(model(rgb, depth), labels)
                loss.backward()
                state.lr = cosine_lr(tc.lr, step - 1, tc.steps)
                adam_step(params, [p.grad for p in params], state)
            except (NonFiniteError, DivergenceError) as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}", step) from exc
            running += loss.item()
            count += 1
            if step % tc.eval_every == 0 or step == tc.steps:
                result.rows.append({"step": step, "split": "train", "loss": running / count})
                running, count = 0.0, 0
                log_val(step)
    if tc.steps == 0:
        log_val(0)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.csv_text())
        save_checkpoint(model, out / "checkpoint")
    return result
