"""Progressive boundary regression over encoded feature sequences.

Each stage samples three fixed-size contexts per proposal (around the start,
inside the interval, around the end) by linear interpolation, feeds the
boundary contexts to a frame-level head predicting start/end offsets and the
concatenated contexts to a segment-level head predicting center/width offsets
plus a confidence, converts offsets to two refined intervals, and blends them
with a convex fusion weight tau. Stages chain: stage t consumes the fused,
clamped output of stage t - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .lgte import as_float64

CONF_MODES = ("last", "product")

# Output layers start near zero so an untrained stage approximates the
# identity refinement instead of injecting offset noise.
_OUTPUT_INIT_SCALE = 0.01


def _conv_init(
    out_ch: int, in_ch: int, kernel: int, generator: torch.Generator | None, scale: float = 1.0
) -> Tensor:
    bound = scale / math.sqrt(in_ch * kernel)
    w = torch.rand((out_ch, in_ch, kernel), generator=generator, dtype=torch.float64)
    return (w * 2.0 - 1.0) * bound


class TbrStageParams(nn.Module):
    """Learnable state and sampling geometry of one regression stage.

    The frame-level head is one two-layer conv stack shared between the start
    and end contexts by default; ``share_frame_weights=False`` gives the end
    context its own stack. ``boundary_extent`` is the half-width of the
    boundary sampling regions as a fraction of the proposal width, and
    ``bins_per_region`` is the number of interpolation bins per region.
    """

    def __init__(
        self,
        channels: int,
        hidden_channels: int = 512,
        kernel_size: int = 3,
        bins_per_region: int = 8,
        boundary_extent: float = 0.25,
        tau: float = 0.5,
        share_frame_weights: bool = True,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if bins_per_region < 1:
            raise ValueError("bins_per_region must be >= 1")
        if not 0.0 < boundary_extent <= 0.5:
            raise ValueError("boundary_extent must lie in (0, 0.5]")
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")

        self.channels = channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.bins_per_region = bins_per_region
        self.boundary_extent = boundary_extent
        self.tau = tau
        self.share_frame_weights = share_frame_weights

        self.frame_conv1_weight = nn.Parameter(_conv_init(hidden_channels, channels, kernel_size, generator))
        self.frame_conv1_bias = nn.Parameter(torch.zeros(hidden_channels, dtype=torch.float64))
        self.frame_conv2_weight = nn.Parameter(_conv_init(1, hidden_channels, kernel_size, generator, _OUTPUT_INIT_SCALE))
        self.frame_conv2_bias = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        if not share_frame_weights:
            self.frame_end_conv1_weight = nn.Parameter(_conv_init(hidden_channels, channels, kernel_size, generator))
            self.frame_end_conv1_bias = nn.Parameter(torch.zeros(hidden_channels, dtype=torch.float64))
            self.frame_end_conv2_weight = nn.Parameter(_conv_init(1, hidden_channels, kernel_size, generator, _OUTPUT_INIT_SCALE))
            self.frame_end_conv2_bias = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.segment_conv1_weight = nn.Parameter(_conv_init(hidden_channels, channels, kernel_size, generator))
        self.segment_conv1_bias = nn.Parameter(torch.zeros(hidden_channels, dtype=torch.float64))
        self.segment_conv2_weight = nn.Parameter(_conv_init(3, hidden_channels, kernel_size, generator, _OUTPUT_INIT_SCALE))
        self.segment_conv2_bias = nn.Parameter(torch.zeros(3, dtype=torch.float64))


@dataclass(frozen=True)
class RefinedProposal:
    """One stage's output interval with its confidence and raw offsets.

    ``provenance`` records the head outputs (ds, de, dx, dw) that produced the
    interval. ``degenerate`` marks proposals whose fused interval collapsed
    and was replaced by the stage input.
    """

    start: float
    end: float
    conf: float
    provenance: tuple[float, float, float, float]
    degenerate: bool = False


@dataclass
class StageRecord:
    """In-graph tensors produced by one stage for a batch of proposals."""

    input_start: Tensor
    input_end: Tensor
    start: Tensor
    end: Tensor
    conf: Tensor
    conf_raw: Tensor
    offsets: Tensor  # (P, 4) columns ds, de, dx, dw
    degenerate: Tensor  # bool (P,)


@dataclass
class RefineResult:
    """Per-proposal, per-stage refinement outputs plus degeneracy diagnostics."""

    proposals: list[list[RefinedProposal]]
    degenerate_count: int

    def final_intervals(self, conf_mode: str = "last") -> list[tuple[float, float, float]]:
        """Last-stage (start, end) per proposal with the selected confidence."""
        if conf_mode not in CONF_MODES:
            raise ValueError(f"conf_mode must be one of {CONF_MODES}")
        out = []
        for stages in self.proposals:
            last = stages[-1]
            if conf_mode == "last":
                conf = last.conf
            else:
                conf = 1.0
                for st in stages:
                    conf *= st.conf
            out.append((last.start, last.end, conf))
        return out


def _interp_rows(fenc: Tensor, times: Tensor, valid_len: int) -> Tensor:
    """Linearly interpolate feature rows at normalized times.

    A time t maps to fractional row t * (valid_len - 1); times outside [0, 1]
    clamp to the boundary rows.
    """
    if valid_len == 1:
        return fenc[0].expand(*times.shape, fenc.shape[1])
    pos = times.clamp(0.0, 1.0) * (valid_len - 1)
    lo = pos.detach().floor().clamp(0, valid_len - 2).long()
    frac = pos - lo.to(pos.dtype)
    return fenc[lo] * (1.0 - frac[..., None]) + fenc[lo + 1] * frac[..., None]


def _region_samples(fenc: Tensor, a: Tensor, b: Tensor, bins: int, valid_len: int) -> Tensor:
    """Sample ``bins`` uniformly spaced bin centers of region [a, b] per proposal."""
    centers = (torch.arange(bins, dtype=fenc.dtype) * 2.0 + 1.0) / (2.0 * bins)
    times = a[:, None] + (b - a)[:, None] * centers[None, :]
    return _interp_rows(fenc, times, valid_len)


def _roi_features(
    fenc: Tensor, starts: Tensor, ends: Tensor, bins: int, extent: float, valid_len: int
) -> tuple[Tensor, Tensor, Tensor]:
    width = ends - starts
    half = extent * width
    f_s = _region_samples(fenc, starts - half, starts + half, bins, valid_len)
    f_c = _region_samples(fenc, starts, ends, bins, valid_len)
    f_e = _region_samples(fenc, ends - half, ends + half, bins, valid_len)
    return f_s, f_c, f_e


def temporal_roi_align(
    fenc, proposal, bins_per_region: int, boundary_extent: float, valid_len: int | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Sample the start, internal, and end contexts of one proposal.

    Returns three bins x C matrices taken from the boundary regions
    [s -+ extent * w] and [e -+ extent * w] and the interior [s, e].
    """
    fenc = as_float64(fenc)
    s, e = _interval_of(proposal)
    if e <= s:
        raise ValueError(f"proposal must have positive width, got ({s}, {e})")
    if bins_per_region < 1:
        raise ValueError("bins_per_region must be >= 1")
    vl = fenc.shape[0] if valid_len is None else int(valid_len)
    starts = torch.tensor([s], dtype=torch.float64)
    ends = torch.tensor([e], dtype=torch.float64)
    f_s, f_c, f_e = _roi_features(fenc, starts, ends, bins_per_region, boundary_extent, vl)
    return f_s[0], f_c[0], f_e[0]


def _interval_of(p) -> tuple[float, float]:
    if hasattr(p, "start"):
        return float(p.start), float(p.end)
    s, e = p[0], p[1]
    return float(s), float(e)


def _conv_stack(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, kernel: int) -> Tensor:
    """Two-layer conv over the bin axis; expects (P, bins, C), returns (P, out, bins)."""
    h = F.conv1d(x.transpose(1, 2), w1, b1, padding=kernel // 2)
    return F.conv1d(torch.relu(h), w2, b2, padding=kernel // 2)


def _frame_offsets(f_s: Tensor, f_e: Tensor, params: TbrStageParams) -> tuple[Tensor, Tensor]:
    k = params.kernel_size
    ds = _conv_stack(f_s, params.frame_conv1_weight, params.frame_conv1_bias,
                     params.frame_conv2_weight, params.frame_conv2_bias, k).mean(dim=(1, 2))
    if params.share_frame_weights:
        de = _conv_stack(f_e, params.frame_conv1_weight, params.frame_conv1_bias,
                         params.frame_conv2_weight, params.frame_conv2_bias, k).mean(dim=(1, 2))
    else:
        de = _conv_stack(f_e, params.frame_end_conv1_weight, params.frame_end_conv1_bias,
                         params.frame_end_conv2_weight, params.frame_end_conv2_bias, k).mean(dim=(1, 2))
    return ds, de


def _segment_outputs(f_s: Tensor, f_c: Tensor, f_e: Tensor, params: TbrStageParams) -> tuple[Tensor, Tensor, Tensor]:
    stacked = torch.cat([f_s, f_c, f_e], dim=1)
    out = _conv_stack(stacked, params.segment_conv1_weight, params.segment_conv1_bias,
                      params.segment_conv2_weight, params.segment_conv2_bias, params.kernel_size).mean(dim=2)
    return out[:, 0], out[:, 1], torch.sigmoid(out[:, 2])


def frame_level_head(f_s, f_e, params: TbrStageParams) -> tuple[Tensor, Tensor]:
    """Predict (start offset, end offset) from the two boundary contexts.

    Both contexts pass through the same stack when weights are shared; the
    final one-channel map is averaged over its bins to a scalar.
    """
    f_s, f_e = as_float64(f_s), as_float64(f_e)
    if f_s.shape != f_e.shape or f_s.ndim != 2 or f_s.shape[1] != params.channels:
        raise ValueError(f"expected two bins x {params.channels} contexts, got {tuple(f_s.shape)} and {tuple(f_e.shape)}")
    ds, de = _frame_offsets(f_s[None], f_e[None], params)
    return ds[0], de[0]


def segment_level_head(f_s, f_c, f_e, params: TbrStageParams) -> tuple[Tensor, Tensor, Tensor]:
    """Predict (center offset, width offset, confidence) from all three contexts.

    The contexts are concatenated along the bin axis; the confidence channel
    passes through a sigmoid so it ranges over (0, 1).
    """
    f_s, f_c, f_e = as_float64(f_s), as_float64(f_c), as_float64(f_e)
    for m in (f_s, f_c, f_e):
        if m.ndim != 2 or m.shape[1] != params.channels:
            raise ValueError(f"expected bins x {params.channels} contexts, got shape {tuple(m.shape)}")
    dx, dw, conf = _segment_outputs(f_s[None], f_c[None], f_e[None], params)
    return dx[0], dw[0], conf[0]


def apply_offsets(proposal, ds: float, de: float, dx: float, dw: float):
    """Convert head offsets into two candidate intervals, without clamping.

    The first interval shifts each boundary by its offset times the proposal
    width; the second shifts the center and rescales the width by exp(dw).
    """
    s, e = _interval_of(proposal)
    w = e - s
    x = 0.5 * (s + e)
    s1 = s - ds * w
    e1 = e - de * w
    x2 = x - dx * w
    w2 = w * math.exp(dw)
    return (s1, e1), (x2 - 0.5 * w2, x2 + 0.5 * w2)


def fuse_proposals(p1, p2, tau: float):
    """Convex combination of two intervals: tau picks p1, 1 - tau picks p2."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    s1, e1 = p1
    s2, e2 = p2
    return tau * s1 + (1.0 - tau) * s2, tau * e1 + (1.0 - tau) * e2


def refine_tensors(
    fenc: Tensor,
    starts: Tensor,
    ends: Tensor,
    init_conf: Tensor,
    stages: list[TbrStageParams],
    valid_len: int | None = None,
) -> list[StageRecord]:
    """Run every stage over a batch of proposals, keeping the autograd graph.

    Degenerate fused intervals (end <= start after clamping to [0, 1]) revert
    to the stage input with the prior confidence; the raw head outputs are
    still recorded for training.
    """
    if not stages:
        raise ValueError("at least one stage is required")
    vl = fenc.shape[0] if valid_len is None else int(valid_len)
    cur_s, cur_e, cur_conf = starts, ends, init_conf
    records: list[StageRecord] = []
    for stage in stages:
        f_s, f_c, f_e = _roi_features(fenc, cur_s, cur_e, stage.bins_per_region, stage.boundary_extent, vl)
        ds, de = _frame_offsets(f_s, f_e, stage)
        dx, dw, conf_raw = _segment_outputs(f_s, f_c, f_e, stage)

        w = cur_e - cur_s
        x = 0.5 * (cur_s + cur_e)
        s1 = cur_s - ds * w
        e1 = cur_e - de * w
        x2 = x - dx * w
        w2 = w * torch.exp(dw)
        s2 = x2 - 0.5 * w2
        e2 = x2 + 0.5 * w2
        fused_s = stage.tau * s1 + (1.0 - stage.tau) * s2
        fused_e = stage.tau * e1 + (1.0 - stage.tau) * e2

        clamped_s = fused_s.clamp(0.0, 1.0)
        clamped_e = fused_e.clamp(0.0, 1.0)
        degenerate = clamped_e <= clamped_s
        new_s = torch.where(degenerate, cur_s, clamped_s)
        new_e = torch.where(degenerate, cur_e, clamped_e)
        new_conf = torch.where(degenerate, cur_conf, conf_raw)

        records.append(
            StageRecord(
                input_start=cur_s,
                input_end=cur_e,
                start=new_s,
                end=new_e,
                conf=new_conf,
                conf_raw=conf_raw,
                offsets=torch.stack([ds, de, dx, dw], dim=1),
                degenerate=degenerate,
            )
        )
        cur_s, cur_e, cur_conf = new_s, new_e, new_conf
    return records


def tbr_refine(fenc, proposals, stages: list[TbrStageParams], valid_len: int | None = None) -> RefineResult:
    """Refine proposals through every stage and collect per-stage outputs."""
    fenc = as_float64(fenc)
    intervals = [_interval_of(p) for p in proposals]
    for s, e in intervals:
        if e <= s:
            raise ValueError(f"proposal must have positive width, got ({s}, {e})")
    scores = [float(getattr(p, "score", 0.5)) for p in proposals]
    starts = torch.tensor([s for s, _ in intervals], dtype=torch.float64)
    ends = torch.tensor([e for _, e in intervals], dtype=torch.float64)
    init_conf = torch.tensor(scores, dtype=torch.float64)
    with torch.no_grad():
        records = refine_tensors(fenc, starts, ends, init_conf, stages, valid_len)

    per_proposal: list[list[RefinedProposal]] = [[] for _ in intervals]
    degenerate_count = 0
    for rec in records:
        degenerate_count += int(rec.degenerate.sum())
        for i in range(len(intervals)):
            per_proposal[i].append(
                RefinedProposal(
                    start=float(rec.start[i]),
                    end=float(rec.end[i]),
                    conf=float(rec.conf[i]),
                    provenance=tuple(float(v) for v in rec.offsets[i]),
                    degenerate=bool(rec.degenerate[i]),
                )
            )
    return RefineResult(per_proposal, degenerate_count)
