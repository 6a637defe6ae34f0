"""Evaluation metrics: multi-label mAP, macro AUROC, mean IoU and mAP gated by IoU.

AP is the mean precision at the rank of each positive, ranking by score
descending with ties broken by ascending record id.  Classes without
positives (or, for AUROC, without negatives) are left out of the macro
means and counted in the report.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionRecord:
    id: str
    scores: np.ndarray
    pred_box: np.ndarray
    gt_labels: np.ndarray
    gt_box: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.float64)
        self.pred_box = np.asarray(self.pred_box, dtype=np.float64)
        self.gt_box = np.asarray(self.gt_box, dtype=np.float64)
        if self.scores.shape != self.gt_labels.shape:
            raise ValueError(f"record {self.id}: {self.scores.shape[0]} scores vs "
                             f"{self.gt_labels.shape[0]} labels")

    def to_dict(self) -> dict:
        return {"id": self.id, "scores": self.scores.tolist(), "pred_box": self.pred_box.tolist(),
                "gt_labels": self.gt_labels.astype(int).tolist(), "gt_box": self.gt_box.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "PredictionRecord":
        return cls(str(obj["id"]), obj["scores"], obj["pred_box"], obj["gt_labels"], obj["gt_box"])


@dataclass
class MetricReport:
    mAP: float | None
    AUROC: float | None
    mIOU: float | None
    map_at_iou: dict[str, float | None] = field(default_factory=dict)
    per_class_ap: list[float | None] = field(default_factory=list)
    excluded_ap: int = 0
    excluded_auroc: int = 0
    n_records: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- array-level metrics --------------------------------------------------------------
def _id_keys(ids: Sequence) -> np.ndarray:
    ids = list(ids)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    keys = np.empty(len(ids), dtype=np.int64)
    keys[order] = np.arange(len(ids))
    return keys


def rank_order(scores: np.ndarray, id_keys: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, then id ascending."""
    return np.lexsort((id_keys, -np.asarray(scores)))


def average_precision(labels: np.ndarray, scores: np.ndarray, id_keys: np.ndarray,
                      n_relevant: int | None = None) -> float | None:
    """Mean precision at positive ranks; ``None`` when there is nothing relevant.

    ``n_relevant`` overrides the divisor (used when some positives were
    demoted and must still count as missed).
    """
    labels = np.asarray(labels, dtype=bool)
    total = int(labels.sum()) if n_relevant is None else n_relevant
    if total == 0:
        return None
    hits = labels[rank_order(scores, id_keys)]
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precision = np.cumsum(hits)[hits] / ranks
    return float(precision.sum() / total)


def auroc(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner boxes ``(..., 4)``; zero when either box has no area."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0.0, None) * np.clip(a[..., 3] - a[..., 1], 0.0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0.0, None) * np.clip(b[..., 3] - b[..., 1], 0.0, None)
    union = area_a + area_b - inter
    ok = (area_a > 0) & (area_b > 0) & (union > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0)


def _stack(records: Sequence[PredictionRecord]):
    scores = np.stack([r.scores for r in records])
    labels = np.stack([r.gt_labels for r in records])
    return scores, labels, _id_keys([r.id for r in records])


def per_class_ap(records: Sequence[PredictionRecord], demote: np.ndarray | None = None) -> list[float | None]:
    if not records:
        return []
    scores, labels, keys = _stack(records)
    out = []
    for c in range(scores.shape[1]):
        y = labels[:, c] > 0.5
        n_rel = int(y.sum())
        if demote is not None:
            y = y & ~demote
        out.append(average_precision(y, scores[:, c], keys, n_relevant=n_rel))
    return out


def _mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def mean_average_precision(records: Sequence[PredictionRecord]) -> float | None:
    return _mean_defined(per_class_ap(records))


def macro_auroc(records: Sequence[PredictionRecord]) -> float | None:
    if not records:
        return None
    scores, labels, _ = _stack(records)
    return _mean_defined(auroc(labels[:, c] > 0.5, scores[:, c]) for c in range(scores.shape[1]))


def mean_iou(records: Sequence[PredictionRecord]) -> float | None:
    if not records:
        return None
    return float(np.mean(box_iou(np.stack([r.pred_box for r in records]),
                                 np.stack([r.gt_box for r in records]))))


def map_at_iou(records: Sequence[PredictionRecord], threshold: float) -> float | None:
    """mAP where a record's positives count as negatives unless its box IoU >= threshold.

    Demoted positives still count in each class's divisor, so a class whose
    positives are all badly localized scores 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("IoU threshold must lie in (0, 1)")
    if not records:
        return None
    ious = box_iou(np.stack([r.pred_box for r in records]), np.stack([r.gt_box for r in records]))
    return _mean_defined(per_class_ap(records, demote=ious < threshold))


def evaluate_records(records: Sequence[PredictionRecord],
                     iou_thresholds: Sequence[float] = (0.2, 0.5)) -> MetricReport:
    if not records:
        return MetricReport(None, None, None, {f"{t:g}": None for t in iou_thresholds})
    aps = per_class_ap(records)
    scores, labels, _ = _stack(records)
    aucs = [auroc(labels[:, c] > 0.5, scores[:, c]) for c in range(scores.shape[1])]
    return MetricReport(
        mAP=_mean_defined(aps),
        AUROC=_mean_defined(aucs),
        mIOU=mean_iou(records),
        map_at_iou={f"{t:g}": map_at_iou(records, t) for t in iou_thresholds},
        per_class_ap=aps,
        excluded_ap=sum(a is None for a in aps),
        excluded_auroc=sum(a is None for a in aucs),
        n_records=len(records),
    )


# -- files ------------------------------------------------------------------------------
def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    with open(path) as fh:
        return [PredictionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_report(path: str | Path, report: MetricReport, config_hash: str | None = None,
                 extra: dict | None = None) -> None:
    body = {"metrics": report.to_dict(), "config_hash": config_hash}
    if extra:
        body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True))
