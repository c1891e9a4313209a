"""Bag-level evaluation and attention-score localization."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .errors import UndefinedMetricError

HIGHLIGHT_THRESHOLD = 0.95


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Binary AUC for 1-D scores; macro one-vs-rest AUC for an (n x K) probability matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return binary_auc(scores, labels)
    if scores.shape[1] == 2:
        return binary_auc(scores[:, 1], labels == 1)
    per_class = [binary_auc(scores[:, k], labels == k) for k in range(scores.shape[1])]
    return float(np.mean(per_class))


def predict_labels(probs) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(np.asarray(probs), axis=-1)


def accuracy(probs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(predict_labels(probs) == labels))


def confusion_matrix(pred, labels, num_classes) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    per_class_counts: list
    confusion: list  # rows: true class, columns: predicted class
    bag_count: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def table(self, classes=None):
        classes = classes or [str(k) for k in range(len(self.confusion))]
        lines = [f"bags      {self.bag_count}",
                 f"AUC       {self.auc:.4f}" if self.auc == self.auc else "AUC       undefined",
                 f"accuracy  {self.accuracy:.4f}",
                 "confusion (rows = true, cols = predicted)"]
        width = max(len(c) for c in classes) + 2
        lines.append(" " * width + "".join(c.rjust(width) for c in classes))
        for name, row in zip(classes, self.confusion):
            lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in row))
        return "\n".join(lines)


def predict(model, bags, workers: int = 1):
    """Run ``model`` on every bag without recording a graph.

    Returns ``(probs, attention)``: an (n x K) array and one attention vector per bag,
    in input order regardless of ``workers``.
    """
    dtype = model.parameters()[0].data.dtype
    prec = "float32" if dtype == np.float32 else "float64"

    def one(bag):
        with nx.precision(prec), nx.no_grad():
            out = model.forward(bag.sources)
            return out.p.data.astype(np.float64), out.attention.data.astype(np.float64)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, bags))
    else:
        results = [one(b) for b in bags]
    probs = np.stack([r[0] for r in results]) if results else np.zeros((0, model.config.num_classes))
    return probs, [r[1] for r in results]


def evaluate(model, bags, workers: int = 1) -> EvalReport:
    probs, _ = predict(model, bags, workers)
    labels = np.array([b.label for b in bags])
    k = model.config.num_classes
    try:
        auc_value = auc(probs, labels)
    except UndefinedMetricError:
        auc_value = float("nan")
    cm = confusion_matrix(predict_labels(probs), labels, k)
    return EvalReport(auc=auc_value, accuracy=accuracy(probs, labels),
                      per_class_counts=np.bincount(labels, minlength=k).tolist(),
                      confusion=cm.tolist(), bag_count=len(bags))


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def normalize_scores(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a single instance maps to 1, constant scores to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 1:
        return np.ones(1)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


@dataclass
class AttentionExport:
    bag_id: str
    raw: np.ndarray
    normalized: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_scores(cls, bag_id, raw):
        norm = normalize_scores(raw)
        return cls(bag_id, np.asarray(raw, dtype=np.float64), norm, norm > HIGHLIGHT_THRESHOLD)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "raw_score", "normalized_score", "flagged"])
            for i, (r, n, m) in enumerate(zip(self.raw, self.normalized, self.mask)):
                w.writerow([i, repr(float(r)), repr(float(n)), int(m)])

    def write_pgm(self, path, height=16):
        """Binary greyscale strip, one column per instance, brighter = more attention."""
        row = np.round(self.normalized * 255).astype(np.uint8)
        img = np.repeat(row[None, :], height, axis=0)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


def export_attention(bag, model) -> AttentionExport:
    _, attn = predict(model, [bag])
    return AttentionExport.from_scores(bag.bag_id, attn[0])


def write_exports(exports: Sequence[AttentionExport], out_dir, pgm=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in exports:
        e.write_csv(out_dir / f"{e.bag_id}.csv")
        if pgm:
            e.write_pgm(out_dir / f"{e.bag_id}.pgm")


def witness_recovery(attention: Sequence[np.ndarray], flags: Sequence[np.ndarray]):
    """Mean attention mass on witness instances over bags that have witnesses.

    Returns ``(recovery, baseline)`` where the baseline is the mean witness
    fraction, i.e. the recovery of uniform attention.
    """
    mass, base = [], []
    for a, f in zip(attention, flags):
        if f is None or not np.any(f):
            continue
        a = np.asarray(a, dtype=np.float64)
        mass.append(a[f].sum())
        base.append(f.mean())
    if not mass:
        raise UndefinedMetricError("witness recovery needs at least one positive bag with flags")
    return float(np.mean(mass)), float(np.mean(base))


def attention_entropy(logits, tau) -> float:
    """Shannon entropy (nats) of softmax(logits / tau), computed in log space."""
    logp = nx.log_softmax_array(logits, tau)
    return float(-(np.exp(logp) * logp).sum())


def attention_ranking(logits, tau) -> np.ndarray:
    """Instance order by attention, ranked on log-scores so underflow cannot create ties."""
    return np.argsort(-nx.log_softmax_array(logits, tau), kind="stable")
