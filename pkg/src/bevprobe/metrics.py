"""Recall and average-precision metrics over center-distance matching.

Matching follows the greedy convention from :mod:`bevprobe.assignment`:
predictions in descending score order, each taking its nearest unmatched
same-class ground truth within the distance threshold. Recall is averaged
over a threshold sweep; AP uses all-point interpolation of the
precision-recall curve.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assignment import (
    MatchMetric,
    greedy_match_matrix,
    prediction_score,
    sigma_matrix,
)
from .geometry import BevBox


@dataclass(frozen=True)
class RecallConfig:
    """Distance threshold sweep (meters) for recall evaluation."""

    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    class_agnostic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "thresholds", tuple(float(t) for t in self.thresholds)
        )
        if not self.thresholds:
            raise ValueError("at least one distance threshold is required")
        if any(not t > 0.0 for t in self.thresholds):
            raise ValueError("distance thresholds must be positive")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("distance thresholds must be strictly increasing")


@dataclass(frozen=True)
class RecallReport:
    """Recall at each threshold plus their mean and per-class breakdown.

    ``per_class_recall`` is keyed by ground-truth class id, then threshold.
    A report over zero ground truth has recall 1.0 everywhere and
    ``empty_gt`` set.
    """

    per_threshold_recall: dict[float, float]
    mean_average_recall: float
    per_class_recall: dict[int, dict[float, float]]
    num_gt: int
    num_pred: int
    num_matched: dict[float, int]
    per_class_gt: dict[int, int] = field(default_factory=dict)
    per_class_matched: dict[int, dict[float, int]] = field(default_factory=dict)
    empty_gt: bool = False


def _empty_report(thresholds: Sequence[float], num_pred: int) -> RecallReport:
    return RecallReport(
        per_threshold_recall={t: 1.0 for t in thresholds},
        mean_average_recall=1.0,
        per_class_recall={},
        num_gt=0,
        num_pred=num_pred,
        num_matched={t: 0 for t in thresholds},
        empty_gt=True,
    )


def average_recall(
    preds: Sequence,
    gts: Sequence[BevBox],
    cfg: RecallConfig = RecallConfig(),
) -> RecallReport:
    """Recall of scored predictions against ground truth per threshold.

    Predictions may be heatmap candidates or scored boxes. The mean
    average recall is the plain mean of the per-threshold recalls.
    """
    thresholds = cfg.thresholds
    if len(gts) == 0:
        return _empty_report(thresholds, len(preds))
    gt_cls = np.array([int(g.class_id) for g in gts], dtype=np.int64)
    classes = sorted(set(gt_cls.tolist()))
    class_gt = {c: int((gt_cls == c).sum()) for c in classes}
    if len(preds) == 0:
        zero = {t: 0.0 for t in thresholds}
        return RecallReport(
            per_threshold_recall=dict(zero),
            mean_average_recall=0.0,
            per_class_recall={c: dict(zero) for c in classes},
            num_gt=len(gts),
            num_pred=0,
            num_matched={t: 0 for t in thresholds},
            per_class_gt=class_gt,
            per_class_matched={c: {t: 0 for t in thresholds} for c in classes},
        )
    sigma = sigma_matrix(preds, gts, MatchMetric.CENTER_DISTANCE)
    scores = np.array([prediction_score(p) for p in preds], dtype=np.float64)
    pred_cls = np.array([int(p.class_id) for p in preds], dtype=np.int64)

    per_threshold: dict[float, float] = {}
    matched_counts: dict[float, int] = {}
    class_matched: dict[int, dict[float, int]] = {c: {} for c in classes}
    for t in thresholds:
        pairs = greedy_match_matrix(
            sigma, scores, pred_cls, gt_cls,
            eta=t,
            larger_is_better=False,
            class_consistent=not cfg.class_agnostic,
        )
        matched_counts[t] = len(pairs)
        per_threshold[t] = len(pairs) / len(gts)
        hits = {c: 0 for c in classes}
        for j, _i, _s in pairs:
            hits[int(gt_cls[j])] += 1
        for c in classes:
            class_matched[c][t] = hits[c]
    per_class = {
        c: {t: class_matched[c][t] / class_gt[c] for t in thresholds} for c in classes
    }
    mar = sum(per_threshold[t] for t in thresholds) / len(thresholds)
    return RecallReport(
        per_threshold_recall=per_threshold,
        mean_average_recall=mar,
        per_class_recall=per_class,
        num_gt=len(gts),
        num_pred=len(preds),
        num_matched=matched_counts,
        per_class_gt=class_gt,
        per_class_matched=class_matched,
    )


def classwise_recall(
    preds: Sequence,
    gts: Sequence[BevBox],
    cfg: RecallConfig = RecallConfig(),
) -> dict[int, RecallReport]:
    """Independent recall report per ground-truth class."""
    out: dict[int, RecallReport] = {}
    for c in sorted(set(int(g.class_id) for g in gts)):
        sub_gts = [g for g in gts if g.class_id == c]
        sub_preds = [p for p in preds if int(p.class_id) == c]
        out[c] = average_recall(sub_preds, sub_gts, cfg)
    return out


def merge_reports(
    reports: Sequence[RecallReport], cfg: RecallConfig = RecallConfig()
) -> RecallReport:
    """Pool reports by summing matched/ground-truth counts.

    Pooled recall is sum(matched) / sum(gt) per threshold, so merging is
    associative and order-independent. Note the pooled mean average recall
    weights scenes by ground-truth count, unlike a mean of per-scene means.
    """
    thresholds = cfg.thresholds
    total_gt = sum(r.num_gt for r in reports)
    total_pred = sum(r.num_pred for r in reports)
    matched = {t: sum(r.num_matched.get(t, 0) for r in reports) for t in thresholds}
    if total_gt == 0:
        return _empty_report(thresholds, total_pred)
    class_gt: dict[int, int] = {}
    class_matched: dict[int, dict[float, int]] = {}
    for r in reports:
        for c, n in r.per_class_gt.items():
            class_gt[c] = class_gt.get(c, 0) + n
            bucket = class_matched.setdefault(c, {t: 0 for t in thresholds})
            for t in thresholds:
                bucket[t] += r.per_class_matched.get(c, {}).get(t, 0)
    classes = sorted(class_gt)
    per_threshold = {t: matched[t] / total_gt for t in thresholds}
    per_class = {
        c: {t: class_matched[c][t] / class_gt[c] for t in thresholds} for c in classes
    }
    return RecallReport(
        per_threshold_recall=per_threshold,
        mean_average_recall=sum(per_threshold[t] for t in thresholds) / len(thresholds),
        per_class_recall=per_class,
        num_gt=total_gt,
        num_pred=total_pred,
        num_matched=matched,
        per_class_gt={c: class_gt[c] for c in classes},
        per_class_matched={c: class_matched[c] for c in classes},
    )


def false_negative_indices(
    preds: Sequence,
    gts: Sequence[BevBox],
    cfg: RecallConfig = RecallConfig(),
) -> dict[float, list[int]]:
    """Ground-truth indices left unmatched at each threshold.

    Uses the same greedy matching as :func:`average_recall`, so counts
    agree with the recall report exactly.
    """
    if len(gts) == 0:
        return {t: [] for t in cfg.thresholds}
    if len(preds) == 0:
        return {t: list(range(len(gts))) for t in cfg.thresholds}
    sigma = sigma_matrix(preds, gts, MatchMetric.CENTER_DISTANCE)
    scores = np.array([prediction_score(p) for p in preds], dtype=np.float64)
    pred_cls = np.array([int(p.class_id) for p in preds], dtype=np.int64)
    gt_cls = np.array([int(g.class_id) for g in gts], dtype=np.int64)
    out: dict[float, list[int]] = {}
    for t in cfg.thresholds:
        pairs = greedy_match_matrix(
            sigma, scores, pred_cls, gt_cls,
            eta=t,
            larger_is_better=False,
            class_consistent=not cfg.class_agnostic,
        )
        matched = {j for j, _i, _s in pairs}
        out[t] = [j for j in range(len(gts)) if j not in matched]
    return out


@dataclass(frozen=True)
class ApResult:
    value: float
    num_gt: int
    num_pred: int
    no_predictions: bool = False
    no_gt: bool = False


def ap_center_distance(
    preds: Sequence, gts: Sequence[BevBox], threshold: float, *,
    class_consistent: bool = True,
) -> ApResult:
    """All-point interpolated average precision at one distance threshold.

    Predictions are ranked by score; each is a TP if the greedy matcher
    pairs it with a ground truth within the threshold, an FP otherwise.
    AP integrates the upper precision envelope over recall. Zero ground
    truth yields NaN (flagged); zero predictions yield 0 (flagged).
    """
    if not threshold > 0.0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if len(gts) == 0:
        return ApResult(math.nan, 0, len(preds), no_gt=True)
    if len(preds) == 0:
        return ApResult(0.0, len(gts), 0, no_predictions=True)
    sigma = sigma_matrix(preds, gts, MatchMetric.CENTER_DISTANCE)
    scores = np.array([prediction_score(p) for p in preds], dtype=np.float64)
    pred_cls = np.array([int(p.class_id) for p in preds], dtype=np.int64)
    gt_cls = np.array([int(g.class_id) for g in gts], dtype=np.int64)
    pairs = greedy_match_matrix(
        sigma, scores, pred_cls, gt_cls,
        eta=threshold,
        larger_is_better=False,
        class_consistent=class_consistent,
    )
    is_tp = np.zeros(len(preds), dtype=bool)
    for _j, i, _s in pairs:
        is_tp[i] = True
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    # Upper envelope of precision, integrated over recall increments.
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        if mrec[i] > mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return ApResult(float(ap), len(gts), len(preds))


def recall_report_rows(report: RecallReport, scope: str = "overall") -> list[dict]:
    """Flatten a report into CSV-ready rows.

    Columns: scope, class, threshold, recall, num_gt, num_matched. Overall
    rows use "*" for the class column; per-class rows follow, ordered by
    class id then threshold.
    """
    thresholds = sorted(report.per_threshold_recall)
    rows = []
    for t in thresholds:
        rows.append(
            {
                "scope": scope,
                "class": "*",
                "threshold": repr(t),
                "recall": repr(report.per_threshold_recall[t]),
                "num_gt": report.num_gt,
                "num_matched": report.num_matched.get(t, 0),
            }
        )
    for c in sorted(report.per_class_recall):
        for t in thresholds:
            rows.append(
                {
                    "scope": scope,
                    "class": c,
                    "threshold": repr(t),
                    "recall": repr(report.per_class_recall[c][t]),
                    "num_gt": report.per_class_gt.get(c, 0),
                    "num_matched": report.per_class_matched.get(c, {}).get(t, 0),
                }
            )
    return rows


_CSV_COLUMNS = ("scope", "class", "threshold", "recall", "num_gt", "num_matched")


def write_recall_csv(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    """Write recall rows with a fixed column order and '\n' line endings."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def recall_report_to_dict(report: RecallReport) -> dict:
    """JSON mirror of the CSV rows, with threshold keys stringified."""
    thresholds = sorted(report.per_threshold_recall)
    return {
        "per_threshold_recall": {repr(t): report.per_threshold_recall[t] for t in thresholds},
        "mean_average_recall": report.mean_average_recall,
        "per_class_recall": {
            str(c): {repr(t): report.per_class_recall[c][t] for t in thresholds}
            for c in sorted(report.per_class_recall)
        },
        "num_gt": report.num_gt,
        "num_pred": report.num_pred,
        "num_matched": {repr(t): report.num_matched.get(t, 0) for t in thresholds},
        "per_class_gt": {str(c): report.per_class_gt[c] for c in sorted(report.per_class_gt)},
        "per_class_matched": {
            str(c): {repr(t): report.per_class_matched[c].get(t, 0) for t in thresholds}
            for c in sorted(report.per_class_matched)
        },
        "empty_gt": report.empty_gt,
    }


def write_recall_json(path: str | os.PathLike, report: RecallReport) -> None:
    with open(path, "w") as fh:
        json.dump(recall_report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
