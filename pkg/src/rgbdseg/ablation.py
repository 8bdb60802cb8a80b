"""Train every ablation configuration over several seeds and tabulate the results."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Split
from .model import TABLE1_ROWS, ModelConfig, row_config
from .optim import DivergenceError
from .train import TrainConfig, train

log = logging.getLogger(__name__)

ROW_ORDER = tuple(TABLE1_ROWS)

WARNING = ("NOTE: toy-scale synthetic runs. Absolute values are not comparable with "
           "full-scale benchmark numbers; only the ordering between rows is meaningful.")


@dataclass
class AblationRun:
    row: str
    seed: int
    status: str = "ok"
    failed_step: int | None = None
    final_loss: float | None = None
    miou: float | None = None
    ious: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_one(row: str, seed: int, data: dict[str, Split], base: ModelConfig, tc: TrainConfig,
            config: ModelConfig | None = None) -> AblationRun:
    """One training run; a divergence is recorded instead of raised."""
    cfg = config or row_config(row, base)
    start = time.perf_counter()
    try:
        res = train(cfg, data, replace(tc, seed=seed))
    except DivergenceError as exc:
        log.warning("%s seed %d diverged at step %s", row, seed, exc.step)
        return AblationRun(row, seed, "diverged", exc.step, seconds=time.perf_counter() - start)
    log.info("%s seed %d: mIoU %.4f", row, seed, res.final_miou or 0.0)
    return AblationRun(row, seed, "ok", None, res.final_loss, res.final_miou, list(res.final_ious),
                       time.perf_counter() - start)


def _star(args):
    return run_one(*args)


def run_ablation(data: dict[str, Split], base: ModelConfig, tc: TrainConfig, seeds=(0, 1, 2),
                 rows=ROW_ORDER, jobs: int = 1) -> list[AblationRun]:
    """Every ``row x seed`` combination, in row order then seed order."""
    tasks = [(row, int(seed), data, base, tc) for row in rows for seed in seeds]
    if jobs <= 1:
        return [_star(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_star, tasks))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def ablation_csv(runs: list[AblationRun], num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "seed", "status", "failed_step", "final_loss", "miou"]
               + [f"iou_class{k}" for k in range(num_classes)] + ["seconds"])
    for r in runs:
        ious = r.ious or [None] * num_classes
        w.writerow([r.row, r.seed, r.status, "" if r.failed_step is None else r.failed_step,
                    _fmt(r.final_loss), _fmt(r.miou)] + [_fmt(v) for v in ious] + [f"{r.seconds:.1f}"])
    return buf.getvalue()


def summarize(runs: list[AblationRun], row: str) -> dict:
    """Mean per-class IoU and mIoU over the successful runs of ``row``."""
    ok = [r for r in runs if r.row == row and r.ok]
    out = {"runs": len([r for r in runs if r.row == row]), "ok": len(ok), "miou": None, "miou_std": None, "ious": []}
    if not ok:
        return out
    mious = [r.miou for r in ok if r.miou is not None]
    if mious:
        out["miou"] = float(np.mean(mious))
        out["miou_std"] = float(np.std(mious))
    k = len(ok[0].ious)
    for c in range(k):
        vals = [r.ious[c] for r in ok if r.ious[c] is not None]
        out["ious"].append(float(np.mean(vals)) if vals else None)
    return out


def render_table(runs: list[AblationRun], num_classes: int, rows=None) -> str:
    """Fixed-width table, one line per configuration, IoU in percent."""
    rows = rows or [r for r in ROW_ORDER if any(x.row == r for x in runs)]

    def pct(x):
        return "  -  " if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:5.1f}"

    name_w = max([len("Configuration")] + [len(r) for r in rows])
    head = f"{'Configuration':<{name_w}} | " + " ".join(f"{'c' + str(k):>5}" for k in range(num_classes))
    head += " | mIoU   (std) | runs ok"
    lines = [WARNING, "", head, "-" * len(head)]
    for row in rows:
        s = summarize(runs, row)
        ious = s["ious"] or [None] * num_classes
        std = "   -  " if s["miou_std"] is None else f"({100 * s['miou_std']:4.1f})"
        lines.append(f"{row:<{name_w}} | " + " ".join(pct(v) for v in ious)
                     + f" | {pct(s['miou'])} {std} | {s['ok']}/{s['runs']}")
    return "\n".join(lines) + "\n"
