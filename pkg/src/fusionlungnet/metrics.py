"""Pixel confusion counts and the derived segmentation metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

COLUMNS = ("IoU", "F1", "Precision", "Recall", "Acc", "MCC")
# 0/0 conventions, recorded in every report
CONVENTIONS = {
    "empty_denominator": "precision, recall, F1 and IoU are 1 when both prediction and target are empty",
    "mcc_zero_factor": "MCC is 0 when any factor of its denominator is 0",
}


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricReport:
    iou: float
    f1: float
    precision: float
    recall: float
    accuracy: float
    mcc: float
    counts: ConfusionCounts
    threshold: float = 0.5

    def values(self) -> tuple[float, ...]:
        """Metrics in table column order (IoU, F1, Precision, Recall, Acc, MCC)."""
        return (self.iou, self.f1, self.precision, self.recall, self.accuracy, self.mcc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conventions"] = CONVENTIONS
        return d


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(pred, target, threshold: float = 0.5) -> ConfusionCounts:
    """Tally pixels; ``pred >= threshold`` is a positive prediction."""
    pred, target = _to_numpy(pred), _to_numpy(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    p = pred >= threshold
    t = target > 0.5
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def compute_metrics(counts: ConfusionCounts, threshold: float = 0.5) -> MetricReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    factors = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    # integer product keeps the denominator exact before the single sqrt
    mcc = 0.0 if factors == 0 else (tp * tn - fp * fn) / math.sqrt(factors)
    return MetricReport(
        iou=_ratio(tp, tp + fp + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        accuracy=_ratio(tp + tn, counts.total),
        mcc=mcc,
        counts=counts,
        threshold=threshold,
    )


def macro_average(reports: list[MetricReport], threshold: float = 0.5) -> MetricReport:
    """Per-image mean of every metric; counts are still summed."""
    if not reports:
        raise ValueError("no reports to average")
    vals = np.mean([r.values() for r in reports], axis=0)
    counts = sum((r.counts for r in reports), ConfusionCounts())
    return MetricReport(*map(float, vals), counts=counts, threshold=threshold)


def format_table(rows: list[tuple[str, MetricReport]], columns=COLUMNS, label: str | None = "Run") -> str:
    """Aligned text table with one line per (name, report), values in percent.

    ``label=None`` drops the name column.
    """
    idx = [COLUMNS.index(c) for c in columns]
    head = " ".join(f"{c:>9}" for c in columns)
    if label is None:
        lines = [head]
        lines += [" ".join(f"{100 * r.values()[i]:9.2f}" for i in idx) for _, r in rows]
        return "\n".join(lines)
    width = max([len(label)] + [len(name) for name, _ in rows])
    lines = [f"{label:<{width}}  {head}"]
    for name, report in rows:
        vals = report.values()
        lines.append(f"{name:<{width}}  " + " ".join(f"{100 * vals[i]:9.2f}" for i in idx))
    return "\n".join(lines)


def write_metrics_json(report: MetricReport, path, **extra) -> None:
    payload = report.to_dict()
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_per_image_csv(per_image: list[tuple[str, MetricReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "tp", "fp", "fn", "tn", *COLUMNS])
        for sid, r in per_image:
            c = r.counts
            writer.writerow([sid, c.tp, c.fp, c.fn, c.tn, *(f"{v:.6f}" for v in r.values())])


def predict_probabilities(model, images, batch_size: int = 8):
    """Primary probability maps for a [N, 3, H, W] tensor, in eval mode, no grad."""
    import torch

    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(model(images[start : start + batch_size], supervision=False).primary)
    return torch.cat(outs)


def per_image_reports(model, index, threshold: float = 0.5, input_size=None, preprocess_cfg=None,
                      batch_size: int = 8, samples: dict | None = None) -> list[tuple[str, MetricReport]]:
    """Confusion counts and metrics for every image in ``index``.

    ``samples`` may carry already-loaded tensors (see
    :func:`fusionlungnet.loader.load_tensors`); otherwise images are read from
    disk at ``input_size`` (default 320x320).
    """
    from .loader import load_tensors, stack_batch

    ids = list(index.entries)
    if samples is None:
        samples = load_tensors(index, input_size or (320, 320), preprocess_cfg)
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        images, masks = stack_batch(samples, chunk)
        probs = predict_probabilities(model, images, batch_size)
        for sid, p, m in zip(chunk, probs, masks):
            rows.append((sid, compute_metrics(confusion(p, m, threshold), threshold)))
    return rows


def evaluate_dataset(model, index, threshold: float = 0.5, macro: bool = False, **kwargs) -> MetricReport:
    """Micro-averaged report (counts summed over images, metrics computed once).

    ``macro=True`` averages per-image metrics instead. Extra keyword
    arguments go to :func:`per_image_reports`.
    """
    rows = per_image_reports(model, index, threshold, **kwargs)
    if macro:
        return macro_average([r for _, r in rows], threshold)
    counts = sum((r.counts for _, r in rows), ConfusionCounts())
    return compute_metrics(counts, threshold)
