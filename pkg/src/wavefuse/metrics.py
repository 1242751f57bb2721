"""Evaluation metrics with pinned matching rules.

All matching is ground-truth-centric: iterate the reference structures,
find the best prediction for each, and charge unmatched references a
penalty. This keeps recall failures visible and is order-deterministic
(ties always break toward the lower start index / lower value).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .series import Segment

__all__ = [
    "MetricReport",
    "segment_miou",
    "accuracy_at_iou",
    "pointwise_f1",
    "boundary_mae",
    "boundary_accuracy",
    "match_boundaries",
    "period_adjusted_prf",
    "auroc",
]


@dataclass
class MetricReport:
    """Named metric values plus matching diagnostics for one evaluation."""

    task: str
    values: dict[str, Optional[float]] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task={self.task}"]
        for k in sorted(self.values):
            v = self.values[k]
            lines.append(f"{k}={'absent' if v is None else format(v, '.6g')}")
        return "\n".join(lines) + "\n"

    def to_row(self) -> dict:
        row: dict = {"task": self.task}
        row.update(self.values)
        return row

    def save(self, path_txt, path_json=None) -> None:
        with open(path_txt, "w") as f:
            f.write(self.to_text())
        if path_json is not None:
            with open(path_json, "w") as f:
                json.dump(self.to_row(), f, indent=2, sort_keys=True)
                f.write("\n")


def _iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def _best_matches(
    pred: Sequence[Segment], gt: Sequence[Segment], class_matched: bool
) -> list[float]:
    """Best-overlap IoU for every gt segment (0 when nothing matches)."""
    out = []
    for g in gt:
        best = 0.0
        best_start = None
        for p in pred:
            if class_matched and p.label != g.label:
                continue
            v = _iou(p, g)
            if v > best or (v == best and best > 0.0 and (best_start is None or p.start < best_start)):
                best, best_start = v, p.start
        out.append(best)
    return out


def segment_miou(
    pred: Sequence[Segment], gt: Sequence[Segment], class_matched: bool = True
) -> float:
    """Mean over gt segments of the best-overlap IoU.

    For semantic segmentation only predictions of the same class can
    match (class_matched=True); boundary-derived segments carry no class
    and match freely. Unmatched gt segments contribute 0.
    """
    if not gt:
        raise ValueError("empty ground-truth segment list")
    return float(np.mean(_best_matches(pred, gt, class_matched)))


def accuracy_at_iou(
    pred: Sequence[Segment],
    gt: Sequence[Segment],
    tau: float = 0.75,
    class_matched: bool = True,
) -> float:
    """Fraction of gt segments whose best-match IoU reaches tau (inclusive)."""
    if not gt:
        raise ValueError("empty ground-truth segment list")
    best = _best_matches(pred, gt, class_matched)
    return float(np.mean([b >= tau for b in best]))


def pointwise_f1(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """Macro-averaged F1 over the classes present in pred or gt."""
    p = np.asarray(pred_labels)
    g = np.asarray(gt_labels)
    if p.shape != g.shape:
        raise ValueError("label arrays must have equal length")
    classes = np.union1d(np.unique(p), np.unique(g))
    f1s = []
    for c in classes:
        tp = int(np.sum((p == c) & (g == c)))
        fp = int(np.sum((p == c) & (g != c)))
        fn = int(np.sum((p != c) & (g == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def match_boundaries(
    pred: Sequence[int], gt: Sequence[int]
) -> list[tuple[int, Optional[int]]]:
    """Greedy one-to-one matching in ascending gt order.

    Each gt point takes the nearest still-unmatched prediction (ties to
    the lower predicted value); gt points left over once predictions run
    out pair with None.
    """
    preds = sorted(int(x) for x in pred)
    pairs: list[tuple[int, Optional[int]]] = []
    available = list(preds)
    for g in sorted(int(x) for x in gt):
        if not available:
            pairs.append((g, None))
            continue
        best = min(available, key=lambda p: (abs(p - g), p))
        available.remove(best)
        pairs.append((g, best))
    return pairs


def _median_gap(gt: np.ndarray) -> float:
    return float(np.median(np.diff(gt))) if gt.size >= 2 else 0.0


def boundary_mae(pred: Sequence[int], gt: Sequence[int]) -> float:
    """Mean absolute gt-to-prediction distance over all gt points.

    Unmatched gt points are charged the median inter-boundary gap of the
    ground truth.
    """
    g = np.asarray(sorted(gt), dtype=int)
    if g.size == 0:
        raise ValueError("empty ground-truth boundary list")
    penalty = _median_gap(g)
    dists = [abs(gp - pp) if pp is not None else penalty for gp, pp in match_boundaries(pred, gt)]
    return float(np.mean(dists))


def boundary_accuracy(pred: Sequence[int], gt: Sequence[int], tol: int = 50) -> float:
    """Fraction of gt boundary points matched within tol samples."""
    g = np.asarray(sorted(gt), dtype=int)
    if g.size == 0:
        raise ValueError("empty ground-truth boundary list")
    hits = [pp is not None and abs(gp - pp) <= tol for gp, pp in match_boundaries(pred, gt)]
    return float(np.mean(hits))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.asarray(mask, dtype=bool)
    starts = np.flatnonzero(m & ~np.concatenate(([False], m[:-1])))
    ends = np.flatnonzero(m & ~np.concatenate((m[1:], [False]))) + 1
    return list(zip(starts.tolist(), ends.tolist()))


def adjust_mask(pred_mask: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """Point adjustment: a hit anywhere in a gt run credits the whole run."""
    p = np.asarray(pred_mask, dtype=bool).copy()
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError("masks must have equal length")
    for a, b in _runs(g):
        if p[a:b].any():
            p[a:b] = True
    return p


def period_adjusted_prf(
    pred_mask: np.ndarray, gt_mask: np.ndarray
) -> tuple[float, float, float]:
    """Precision, recall, F1 after point adjustment of the prediction."""
    g = np.asarray(gt_mask, dtype=bool)
    p = adjust_mask(pred_mask, g)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    precision = tp / (tp + fp) if tp + fp > 0 else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def auroc(scores: np.ndarray, gt_mask: np.ndarray) -> Optional[float]:
    """Rank-statistic AUROC of raw scores against the unadjusted mask.

    Returns None when the mask contains a single class (undefined).
    """
    s = np.asarray(scores, dtype=float)
    g = np.asarray(gt_mask, dtype=bool)
    if s.shape != g.shape:
        raise ValueError("scores and mask must have equal length")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties with 0.5 credit
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
