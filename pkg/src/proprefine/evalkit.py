"""Proposal and detection quality metrics.

Recall metrics pool ground truths across videos: average recall at a proposal
budget is the matched fraction of all ground truths, averaged over the
overlap thresholds. The proposal-set summary number is 100 times the mean of
that recall over budgets 1..100. Detection quality is the class-mean average
precision from all-points interpolated precision-recall curves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TIOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_AN_VALUES = (1, 5, 10, 50, 100)
DEFAULT_MAP_THRESHOLDS = (0.5, 0.75, 0.95)


def tiou(a, b) -> float:
    """Temporal intersection-over-union of two (start, end) intervals."""
    a_s, a_e = _interval(a)
    b_s, b_e = _interval(b)
    inter = min(a_e, b_e) - max(a_s, b_s)
    if inter <= 0:
        return 0.0
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union


def _interval(x) -> tuple[float, float]:
    if hasattr(x, "start"):
        return float(x.start), float(x.end)
    return float(x[0]), float(x[1])


def _scored(p) -> tuple[float, float, float]:
    if hasattr(p, "start"):
        return float(p.start), float(p.end), float(p.score)
    return float(p[0]), float(p[1]), float(p[2])


def _ranked(proposals) -> list[tuple[float, float, float]]:
    return sorted((_scored(p) for p in proposals), key=lambda p: (-p[2], p[0], p[1]))


def _greedy_matches(kept: list[tuple[float, float, float]], gts: list[tuple[float, float]], thr: float) -> int:
    """One-to-one matching in rank order; each proposal takes its best free ground truth."""
    taken = [False] * len(gts)
    matched = 0
    for p in kept:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            ov = tiou(p, g)
            if ov > best_iou:
                best, best_iou = j, ov
        if best >= 0 and best_iou >= thr:
            taken[best] = True
            matched += 1
    return matched


def average_recall_at_an(videos, an: int, thresholds=DEFAULT_TIOU_THRESHOLDS) -> float:
    """Average recall when each video keeps its top ``an`` proposals.

    ``videos`` is a list of (proposals, ground_truths); videos without ground
    truths are excluded. Recall per threshold counts matches over the pooled
    ground-truth set.
    """
    total_gts = 0
    matched_per_thr = [0] * len(thresholds)
    for proposals, gts in videos:
        gt_list = [_interval(g) for g in gts]
        if not gt_list:
            continue
        total_gts += len(gt_list)
        kept = _ranked(proposals)[: max(an, 0)]
        for t_idx, thr in enumerate(thresholds):
            matched_per_thr[t_idx] += _greedy_matches(kept, gt_list, thr)
    if total_gts == 0:
        return 0.0
    return float(np.mean([m / total_gts for m in matched_per_thr]))


def auc(videos, an_values=range(1, 101), thresholds=DEFAULT_TIOU_THRESHOLDS) -> float:
    """Mean of average recall over the proposal budgets, as a percentage."""
    values = [average_recall_at_an(videos, an, thresholds) for an in an_values]
    return 100.0 * float(np.sum(values)) / len(values)


def _average_precision(tp_flags: list[int], num_gts: int) -> float:
    if num_gts == 0:
        raise ValueError("average precision is undefined without ground truths")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags, dtype=np.float64)
    fp = np.cumsum([1 - f for f in tp_flags], dtype=np.float64)
    prec = tp / (tp + fp)
    rec = tp / num_gts
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def detection_map(videos, thresholds=DEFAULT_MAP_THRESHOLDS) -> tuple[dict[float, float], float]:
    """Class-mean average precision at each threshold, plus the overall mean.

    ``videos`` is a list of (detections, ground_truths) where each detection
    is (start, end, class_id, score) and each ground truth is
    (start, end, class_id). Detections are pooled across videos per class and
    matched greedily in descending score order (ties broken by video index,
    then start) against unmatched ground truths of the same video and class.
    Classes without any ground truth are excluded from the mean.
    """
    gt_classes = sorted({int(g[2]) for _, gts in videos for g in gts})
    if not gt_classes:
        raise ValueError("no ground truths to evaluate against")

    per_class_dets: dict[int, list[tuple[float, int, float, float]]] = {c: [] for c in gt_classes}
    per_class_gts: dict[int, dict[int, list[tuple[float, float]]]] = {c: {} for c in gt_classes}
    for vid, (dets, gts) in enumerate(videos):
        for d in dets:
            c = int(d[2])
            if c in per_class_dets:
                per_class_dets[c].append((float(d[3]), vid, float(d[0]), float(d[1])))
        for g in gts:
            per_class_gts[int(g[2])].setdefault(vid, []).append((float(g[0]), float(g[1])))

    map_at: dict[float, float] = {}
    for thr in thresholds:
        aps = []
        for c in gt_classes:
            num_gts = sum(len(v) for v in per_class_gts[c].values())
            dets = sorted(per_class_dets[c], key=lambda d: (-d[0], d[1], d[2]))
            taken: dict[int, list[bool]] = {vid: [False] * len(v) for vid, v in per_class_gts[c].items()}
            flags = []
            for score, vid, s, e in dets:
                gts_here = per_class_gts[c].get(vid, [])
                best, best_iou = -1, 0.0
                for j, g in enumerate(gts_here):
                    if taken[vid][j]:
                        continue
                    ov = tiou((s, e), g)
                    if ov > best_iou:
                        best, best_iou = j, ov
                if best >= 0 and best_iou >= thr:
                    taken[vid][best] = True
                    flags.append(1)
                else:
                    flags.append(0)
            aps.append(_average_precision(flags, num_gts))
        map_at[float(thr)] = float(np.mean(aps))
    return map_at, float(np.mean(list(map_at.values())))


@dataclass
class EvalReport:
    """Recall table, proposal-set summary, and optional detection scores."""

    ar_at_an: dict[int, float]
    auc: float
    map_at: dict[float, float] = field(default_factory=dict)
    average_map: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "ar_at_an": {str(k): v for k, v in sorted(self.ar_at_an.items())},
            "auc": self.auc,
            "map_at": {f"{k:g}": v for k, v in sorted(self.map_at.items())},
            "average_map": self.average_map,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    def write_ar_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["an", "average_recall"])
            for an in sorted(self.ar_at_an):
                writer.writerow([an, repr(self.ar_at_an[an])])

    def write_map_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tiou_threshold", "map"])
            for thr in sorted(self.map_at):
                writer.writerow([thr, repr(self.map_at[thr])])


def evaluate_proposals(
    videos,
    an_values=DEFAULT_AN_VALUES,
    auc_an_values=range(1, 101),
    thresholds=DEFAULT_TIOU_THRESHOLDS,
) -> EvalReport:
    """Build the recall/summary part of a report for (proposals, gts) pairs."""
    table = {int(an): average_recall_at_an(videos, an, thresholds) for an in an_values}
    return EvalReport(ar_at_an=table, auc=auc(videos, auc_an_values, thresholds))
