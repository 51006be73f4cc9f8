"""Label assignment, balanced sampling, losses, and the optimization loop.

Candidates are labeled positive, incomplete, or negative by their best
overlap against the ground truths, sampled to a 1:1:1 ratio per kind, and
supervised with a smooth-L1 confidence loss over all samples plus a
smooth-L1 offset-regression loss over positives. With progressive stages,
every stage is supervised against its own input proposal and the objective
sums the per-stage losses; gradients flow through the whole stage chain.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .evalkit import tiou
from .lgte import EncoderParams, as_float64, encode_matrix
from .postproc import SoftNmsConfig, soft_nms
from .seqio import FeatureSequence, Proposal, VideoAnnotation
from .tbr import TbrStageParams, refine_tensors

POSITIVE = "positive"
INCOMPLETE = "incomplete"
NEGATIVE = "negative"
KINDS = (POSITIVE, INCOMPLETE, NEGATIVE)

IOU_TARGET_MODES = ("input", "refined")

TOP_CANDIDATES_FOR_TRAINING = 100


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


def substream_seed(master_seed: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{master_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class LabeledProposal:
    """A candidate with its best-overlap ground truth and sample kind."""

    proposal: Proposal
    matched_gt: tuple[float, float] | None
    g_iou: float
    kind: str


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and label-assignment settings."""

    i_p: float = 0.7
    i_n: float = 0.3
    lambda_: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    per_kind: int = 8
    iou_target: str = "input"

    def __post_init__(self) -> None:
        if not 0.0 <= self.i_n < self.i_p <= 1.0:
            raise ValueError("thresholds must satisfy 0 <= i_n < i_p <= 1")
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.per_kind < 1:
            raise ValueError("batch_size and per_kind must be >= 1, epochs >= 0")
        if self.iou_target not in IOU_TARGET_MODES:
            raise ValueError(f"iou_target must be one of {IOU_TARGET_MODES}")


@dataclass
class Diagnostics:
    """Counters for rare but expected training events."""

    empty_kinds: int = 0
    zero_positive_losses: int = 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_total: float
    mean_iou: float
    mean_reg: float


@dataclass
class TrainResult:
    encoder: EncoderParams
    stages: list[TbrStageParams]
    history: list[EpochStats]
    diagnostics: Diagnostics


def _interval(g) -> tuple[float, float]:
    if hasattr(g, "start"):
        return float(g.start), float(g.end)
    return float(g[0]), float(g[1])


def assign_labels(candidates, gts, i_p: float, i_n: float) -> list[LabeledProposal]:
    """Label each candidate by its best overlap over the ground truths.

    Ties between equally overlapping ground truths go to the one with the
    earliest start. Overlap exactly at a threshold counts as incomplete.
    """
    if not 0.0 <= i_n < i_p <= 1.0:
        raise ValueError("thresholds must satisfy 0 <= i_n < i_p <= 1")
    intervals = [_interval(g) for g in gts]
    labeled = []
    for cand in candidates:
        if not intervals:
            labeled.append(LabeledProposal(cand, None, 0.0, NEGATIVE))
            continue
        best = min(
            ((tiou(cand, g), g) for g in intervals),
            key=lambda item: (-item[0], item[1][0], item[1][1]),
        )
        g_iou, matched = best
        if g_iou > i_p:
            kind = POSITIVE
        elif g_iou < i_n:
            kind = NEGATIVE
        else:
            kind = INCOMPLETE
        labeled.append(LabeledProposal(cand, matched, g_iou, kind))
    return labeled


def sample_balanced(
    labeled: list[LabeledProposal],
    per_kind: int,
    seed: int,
    diagnostics: Diagnostics | None = None,
) -> list[LabeledProposal]:
    """Draw up to ``per_kind`` samples of each kind, deterministically.

    Kinds with enough members are sampled uniformly without replacement;
    undersized kinds are upsampled with replacement to keep the 1:1:1 ratio.
    An entirely empty kind contributes nothing and bumps a diagnostic.
    """
    if per_kind < 1:
        raise ValueError("per_kind must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[LabeledProposal] = []
    for kind in KINDS:
        pool = [lp for lp in labeled if lp.kind == kind]
        if not pool:
            if diagnostics is not None:
                diagnostics.empty_kinds += 1
            continue
        replace = len(pool) < per_kind
        idx = rng.choice(len(pool), size=per_kind, replace=replace)
        out.extend(pool[i] for i in idx)
    return out


def regression_targets(p, g) -> tuple[float, float, float, float]:
    """Offsets (ds, de, dx, dw) that make the coordinate transforms hit ``g`` exactly."""
    s_p, e_p = _interval(p)
    s_g, e_g = _interval(g)
    w_p = e_p - s_p
    w_g = e_g - s_g
    if w_p <= 0:
        raise ValueError("proposal width must be positive")
    if w_g <= 0:
        raise ValueError("ground-truth width must be positive")
    ds = (s_p - s_g) / w_p
    de = (e_p - e_g) / w_p
    dx = (0.5 * (s_p + e_p) - 0.5 * (s_g + e_g)) / w_p
    dw = float(np.log(w_g / w_p))
    return ds, de, dx, dw


def smooth_l1(x):
    """Half-quadratic near zero, linear beyond unit magnitude."""
    if torch.is_tensor(x):
        ax = x.abs()
        return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    arr = np.asarray(x, dtype=np.float64)
    ax = np.abs(arr)
    out = np.where(ax < 1.0, 0.5 * arr * arr, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def _tiou_t(s1: Tensor, e1: Tensor, s2: Tensor, e2: Tensor) -> Tensor:
    inter = (torch.minimum(e1, e2) - torch.maximum(s1, s2)).clamp_min(0.0)
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union.clamp_min(1e-12)


def _loss_terms(
    conf: Tensor,
    offsets: Tensor,
    g_iou: Tensor,
    targets: Tensor,
    pos_mask: Tensor,
    lambda_: float,
    diagnostics: Diagnostics | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    l_iou = smooth_l1(conf - g_iou).mean()
    num_pos = int(pos_mask.sum())
    if num_pos == 0:
        if diagnostics is not None:
            diagnostics.zero_positive_losses += 1
        l_reg = torch.zeros((), dtype=torch.float64)
    else:
        per_sample = smooth_l1(offsets - targets).sum(dim=1)
        l_reg = (per_sample * pos_mask.to(offsets.dtype)).sum() / num_pos
    return l_iou + lambda_ * l_reg, l_iou, l_reg


def stage_loss(conf, offsets, labels: list[LabeledProposal], lambda_: float, diagnostics: Diagnostics | None = None):
    """Confidence loss over all samples plus offset loss over positives.

    ``conf`` is (N,) and ``offsets`` is (N, 4) with columns (ds, de, dx, dw)
    aligned with ``labels``. Returns (total, confidence term, regression term)
    as scalars, keeping tensor inputs in the autograd graph.
    """
    conf_t = conf if torch.is_tensor(conf) else torch.as_tensor(np.asarray(conf), dtype=torch.float64)
    off_t = offsets if torch.is_tensor(offsets) else torch.as_tensor(np.asarray(offsets), dtype=torch.float64)
    if conf_t.shape[0] != len(labels) or off_t.shape != (len(labels), 4):
        raise ValueError("predictions must align with labels: conf (N,), offsets (N, 4)")
    g_iou = torch.tensor([lp.g_iou for lp in labels], dtype=torch.float64)
    pos_mask = torch.tensor([lp.kind == POSITIVE for lp in labels], dtype=torch.bool)
    target_rows = []
    for lp in labels:
        if lp.kind == POSITIVE:
            target_rows.append(regression_targets(lp.proposal, lp.matched_gt))
        else:
            target_rows.append((0.0, 0.0, 0.0, 0.0))
    targets = torch.tensor(target_rows, dtype=torch.float64)
    total, l_iou, l_reg = _loss_terms(conf_t, off_t, g_iou, targets, pos_mask, lambda_, diagnostics)
    if torch.is_tensor(conf) or torch.is_tensor(offsets):
        return total, l_iou, l_reg
    return float(total), float(l_iou), float(l_reg)


def _targets_t(in_s: Tensor, in_e: Tensor, gt_s: Tensor, gt_e: Tensor) -> Tensor:
    w_p = in_e - in_s
    ds = (in_s - gt_s) / w_p
    de = (in_e - gt_e) / w_p
    dx = (0.5 * (in_s + in_e) - 0.5 * (gt_s + gt_e)) / w_p
    dw = torch.log((gt_e - gt_s) / w_p)
    return torch.stack([ds, de, dx, dw], dim=1)


def video_loss(
    features: Tensor,
    valid_len: int,
    labels: list[LabeledProposal],
    encoder: EncoderParams,
    stages: list[TbrStageParams],
    lambda_: float,
    iou_target: str = "input",
    diagnostics: Diagnostics | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Summed per-stage loss for one video's sampled proposals.

    Each stage recomputes its overlap target and regression targets against
    its own input proposal; the sample kinds stay fixed from label
    assignment.
    """
    if iou_target not in IOU_TARGET_MODES:
        raise ValueError(f"iou_target must be one of {IOU_TARGET_MODES}")
    fenc = encode_matrix(features, encoder, valid_len)
    starts = torch.tensor([lp.proposal.start for lp in labels], dtype=torch.float64)
    ends = torch.tensor([lp.proposal.end for lp in labels], dtype=torch.float64)
    scores = torch.tensor([lp.proposal.score for lp in labels], dtype=torch.float64)
    records = refine_tensors(fenc, starts, ends, scores, stages, valid_len)

    has_match = torch.tensor([lp.matched_gt is not None for lp in labels], dtype=torch.float64)
    gt_s = torch.tensor([lp.matched_gt[0] if lp.matched_gt else 0.0 for lp in labels], dtype=torch.float64)
    gt_e = torch.tensor([lp.matched_gt[1] if lp.matched_gt else 1.0 for lp in labels], dtype=torch.float64)
    pos_mask = torch.tensor([lp.kind == POSITIVE for lp in labels], dtype=torch.bool)

    total = torch.zeros((), dtype=torch.float64)
    iou_sum = torch.zeros((), dtype=torch.float64)
    reg_sum = torch.zeros((), dtype=torch.float64)
    for rec in records:
        if iou_target == "input":
            ref_s, ref_e = rec.input_start, rec.input_end
        else:
            ref_s, ref_e = rec.start, rec.end
        g_iou = _tiou_t(ref_s, ref_e, gt_s, gt_e) * has_match
        targets = _targets_t(rec.input_start, rec.input_end, gt_s, gt_e)
        stage_total, l_iou, l_reg = _loss_terms(
            rec.conf_raw, rec.offsets, g_iou, targets, pos_mask, lambda_, diagnostics
        )
        total = total + stage_total
        iou_sum = iou_sum + l_iou
        reg_sum = reg_sum + l_reg
    return total, iou_sum, reg_sum


def preselect_candidates(candidates, nms_cfg: SoftNmsConfig | None = None, limit: int = TOP_CANDIDATES_FOR_TRAINING):
    """Suppression pass plus top-k cut applied before label assignment."""
    cfg = nms_cfg or SoftNmsConfig()
    return soft_nms(list(candidates), cfg)[:limit]


def train_model(
    dataset: list[tuple[FeatureSequence, VideoAnnotation]],
    encoder: EncoderParams,
    stages: list[TbrStageParams],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch adaptive-moment training of encoder and stage parameters.

    A batch is ``cfg.batch_size`` videos, each contributing a balanced sample
    of its preselected candidates. The run is deterministic for a fixed
    config and dataset. Raises TrainingDivergedError if the loss leaves the
    finite range.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    diagnostics = Diagnostics()

    prepared = []
    for seq, ann in dataset:
        cands = preselect_candidates(ann.candidates)
        labeled = assign_labels(cands, ann.ground_truths, cfg.i_p, cfg.i_n)
        feat_t = as_float64(seq.features)
        prepared.append((feat_t, seq.valid_len, labeled))

    params = list(encoder.parameters()) + [p for s in stages for p in s.parameters()]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    order_rng = np.random.default_rng(substream_seed(cfg.seed, "batch-order"))

    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(prepared))
        epoch_totals, epoch_ious, epoch_regs = [], [], []
        for batch_idx in range(0, len(order), cfg.batch_size):
            batch = order[batch_idx : batch_idx + cfg.batch_size]
            optimizer.zero_grad()
            batch_total = torch.zeros((), dtype=torch.float64)
            batch_iou = torch.zeros((), dtype=torch.float64)
            batch_reg = torch.zeros((), dtype=torch.float64)
            contributing = 0
            for vid in batch:
                feat_t, valid_len, labeled = prepared[vid]
                sample_seed = substream_seed(cfg.seed, f"sample/{epoch}/{vid}")
                sampled = sample_balanced(labeled, cfg.per_kind, sample_seed, diagnostics)
                if not sampled:
                    continue
                total, l_iou, l_reg = video_loss(
                    feat_t, valid_len, sampled, encoder, stages, cfg.lambda_, cfg.iou_target, diagnostics
                )
                batch_total = batch_total + total
                batch_iou = batch_iou + l_iou
                batch_reg = batch_reg + l_reg
                contributing += 1
            if contributing == 0:
                continue
            batch_total = batch_total / contributing
            if not torch.isfinite(batch_total):
                norms = {f"param{i}": float(p.detach().norm()) for i, p in enumerate(params)}
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx // cfg.batch_size}; parameter norms: {norms}"
                )
            batch_total.backward()
            torch.nn.utils.clip_grad_norm_(params, 10.0)
            optimizer.step()
            epoch_totals.append(float(batch_total.detach()))
            epoch_ious.append(float(batch_iou.detach()) / contributing)
            epoch_regs.append(float(batch_reg.detach()) / contributing)
        history.append(
            EpochStats(
                epoch=epoch,
                mean_total=float(np.mean(epoch_totals)) if epoch_totals else 0.0,
                mean_iou=float(np.mean(epoch_ious)) if epoch_ious else 0.0,
                mean_reg=float(np.mean(epoch_regs)) if epoch_regs else 0.0,
            )
        )
    return TrainResult(encoder, stages, history, diagnostics)


def write_loss_history(path: str | Path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_total", "mean_iou", "mean_reg"])
        for row in history:
            writer.writerow([row.epoch, repr(row.mean_total), repr(row.mean_iou), repr(row.mean_reg)])


def grad_check(
    loss_fn,
    params: list[Tensor],
    epsilon: float = 1e-5,
    samples_per_tensor: int | None = None,
    seed: int = 0,
    analytic_grads: list[Tensor] | None = None,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    Every checked entry compares the analytic gradient against
    (f(p + eps) - f(p - eps)) / (2 eps) with relative error
    |a - n| / max(|a|, |n|, 1e-8). ``samples_per_tensor`` limits the entries
    checked per tensor (None checks all of them); ``analytic_grads`` lets the
    caller substitute precomputed gradients.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if analytic_grads is None:
        for p in params:
            p.grad = None
        loss = loss_fn()
        loss.backward()
        analytic_grads = [
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params
        ]

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic_grads):
            flat = p.view(-1)
            grad_flat = grad.reshape(-1)
            n = flat.numel()
            if samples_per_tensor is None or samples_per_tensor >= n:
                indices = range(n)
            else:
                indices = rng.choice(n, size=samples_per_tensor, replace=False)
            for i in indices:
                original = float(flat[i])
                flat[i] = original + epsilon
                f_plus = float(loss_fn())
                flat[i] = original - epsilon
                f_minus = float(loss_fn())
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                analytic = float(grad_flat[i])
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel


def make_pipeline_loss(
    encoder: EncoderParams,
    stages: list[TbrStageParams],
    t: int = 32,
    valid_len: int | None = None,
    num_proposals: int = 4,
    lambda_: float = 1.0,
    i_p: float = 0.7,
    i_n: float = 0.3,
    iou_target: str = "input",
    seed: int = 11,
):
    """Deterministic training-loss closure over random features and proposals.

    Builds one synthetic video with proposals spanning all three sample kinds
    so both loss terms stay active, then returns (loss_fn, named_params).
    """
    channels = encoder.channels or stages[0].channels
    rng = np.random.default_rng(seed)
    vl = t if valid_len is None else valid_len
    features = as_float64(rng.normal(0.0, 1.0, size=(t, channels)))
    if vl < t:
        features[vl:] = 0.0

    gts = [(0.15, 0.45), (0.6, 0.85)]
    candidates = []
    for i in range(num_proposals):
        g = gts[i % len(gts)]
        width = g[1] - g[0]
        if i % 3 == 2:
            shift = 0.45 * width * (1 + 0.1 * rng.uniform())
        else:
            shift = 0.03 * width * rng.uniform(-1.0, 1.0)
        s = float(np.clip(g[0] + shift, 0.0, 0.98))
        e = float(np.clip(g[1] + shift * 0.5, s + 0.01, 1.0))
        candidates.append(Proposal(s, e, float(rng.uniform(0.2, 0.9))))
    labels = assign_labels(candidates, gts, i_p, i_n)

    def loss_fn() -> Tensor:
        total, _, _ = video_loss(features, vl, labels, encoder, stages, lambda_, iou_target)
        return total

    named = [(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
    for idx, stage in enumerate(stages):
        named.extend((f"stage{idx}.{n}", p) for n, p in stage.named_parameters())
    return loss_fn, named
