"""Training loop: one bag per step, self-distillation loss, Lookahead-RAdam."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError, TrainingAbort
from .loss import LossWeights, self_distillation_loss
from .metrics import evaluate
from .model import DQModel
from .optim import LookaheadRAdam, OptimConfig, default_decay_filter

log = logging.getLogger(__name__)

STEP_FIELDS = ("step", "epoch", "bag_id", "total", "ce_sa", "ce_mil", "kl", "hint", "ce_blend")
EPOCH_FIELDS = ("epoch", "mean_loss", "val_auc", "val_accuracy")


@dataclass
class TrainConfig:
    epochs: int = 30
    seed: int = 7
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    patience: Optional[int] = None  # epochs without val-AUC improvement before stopping

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class TrainResult:
    model: DQModel
    steps: list
    epochs: list
    best_val_auc: float = float("nan")
    optimizer: Optional[LookaheadRAdam] = None


def model_precision(model) -> str:
    return "float32" if model.parameters()[0].data.dtype == np.float32 else "float64"


def train(model: DQModel, train_bags: Sequence, cfg: TrainConfig = TrainConfig(),
          val_bags: Sequence = (), out_dir=None) -> TrainResult:
    """Train ``model`` in place.

    Per epoch the bag order is reshuffled from a Philox stream seeded with
    ``cfg.seed``. When ``out_dir`` is given, ``last.dqml`` is rewritten after
    every epoch, ``best.dqml`` whenever validation AUC improves, and the step
    and epoch logs are written as CSV.
    """
    if not train_bags:
        raise ConfigError("training set is empty")
    variant = model.config.variant
    opt = LookaheadRAdam(model.named_parameters(), cfg.optim, default_decay_filter)
    rng = nx.make_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    steps, epochs = [], []
    best, stale = -math.inf, 0

    with nx.precision(model_precision(model)):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_bags))
            losses = []
            for i in order:
                bag = train_bags[i]
                where = f"epoch {epoch}, step {opt.t + 1}, bag {bag.bag_id}"
                try:
                    out = model.forward(bag.sources)
                    parts = self_distillation_loss(out, bag.label, cfg.loss, variant)
                except NumericError as exc:
                    nx.current_graph().clear()
                    raise TrainingAbort(f"non-finite value at {where}: {exc}") from exc
                value = parts.total.item()
                if not math.isfinite(value):
                    nx.current_graph().clear()
                    raise TrainingAbort(f"non-finite loss at {where}")
                opt.zero_grad()
                nx.backward(parts.total)
                opt.step()
                losses.append(value)
                steps.append({"step": opt.t, "epoch": epoch, "bag_id": bag.bag_id, **parts.as_row()})

            row = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                   "val_auc": float("nan"), "val_accuracy": float("nan")}
            if val_bags:
                report = evaluate(model, val_bags)
                row.update(val_auc=report.auc, val_accuracy=report.accuracy)
            epochs.append(row)
            log.info("epoch %d  loss %.4f  val_auc %.4f  val_acc %.4f", epoch, row["mean_loss"],
                     row["val_auc"], row["val_accuracy"])

            improved = row["val_auc"] > best
            if improved:
                best, stale = row["val_auc"], 0
            else:
                stale += 1
            if out_dir is not None:
                save_checkpoint(model, out_dir / "last.dqml", {"epoch": epoch, "seed": cfg.seed})
                if improved:
                    save_checkpoint(model, out_dir / "best.dqml", {"epoch": epoch, "seed": cfg.seed})
            if cfg.patience is not None and val_bags and stale >= cfg.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break

    if out_dir is not None:
        write_csv(out_dir / "steps.csv", STEP_FIELDS, steps)
        write_csv(out_dir / "epochs.csv", EPOCH_FIELDS, epochs)
    return TrainResult(model, steps, epochs, best if best > -math.inf else float("nan"), opt)


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
