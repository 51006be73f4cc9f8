"""Inference-time score fusion and Soft-NMS suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .seqio import Proposal


@dataclass(frozen=True)
class SoftNmsConfig:
    """Gaussian Soft-NMS parameters: decay width, retain floor, output cap."""

    sigma: float = 0.4
    score_floor: float = 1e-3
    top_k: int = 100

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must lie in [0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def fuse_scores(external_score: float, refined_score: float) -> float:
    """Combine an upstream candidate score with the refinement confidence."""
    if not 0.0 <= external_score <= 1.0 or not 0.0 <= refined_score <= 1.0:
        raise ValueError(f"scores must lie in [0, 1], got ({external_score}, {refined_score})")
    return external_score * refined_score


def _overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def soft_nms(proposals: list[Proposal], cfg: SoftNmsConfig) -> list[Proposal]:
    """Gaussian-decay suppression of overlapping proposals.

    Repeatedly selects the highest-scoring remaining proposal (ties broken by
    earlier start, then shorter duration), multiplies every other remaining
    score by exp(-tIoU^2 / sigma), and stops once the best remaining score
    falls below the floor or top_k proposals are selected. Intervals are
    never modified, only scores and membership.
    """
    remaining = [[p.start, p.end, p.score] for p in proposals]
    selected: list[Proposal] = []
    while remaining and len(selected) < cfg.top_k:
        best = min(range(len(remaining)), key=lambda i: (-remaining[i][2], remaining[i][0], remaining[i][1] - remaining[i][0]))
        s, e, score = remaining.pop(best)
        if score < cfg.score_floor:
            break
        selected.append(Proposal(s, e, score))
        for other in remaining:
            iou = _overlap((s, e), (other[0], other[1]))
            other[2] *= math.exp(-(iou * iou) / cfg.sigma)
    return selected
