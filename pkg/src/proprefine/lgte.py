"""Local-global grouped attention encoder for snippet feature sequences.

One block projects the input sequence by three learned matrices (gamma, rho,
phi acting as query, key, and value maps), splits each projection into N
channel groups of width d = C / N, and runs attention per group: the first A
groups attend inside a fixed odd window around each location, the remaining
N - A groups attend over the whole valid sequence. Group outputs are
concatenated, mixed by an output projection, then passed through row
normalization and a position-wise feed-forward network.

All math runs in float64. Padding rows (>= valid_len) are excluded from every
softmax and zeroed in block outputs, so stacked blocks never leak padding
into the valid prefix.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .seqio import FeatureSequence

_LN_EPS = 1e-12


def as_float64(x) -> Tensor:
    """Coerce array-like input to a float64 tensor without aliasing read-only memory."""
    if torch.is_tensor(x):
        return x.to(torch.float64)
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr)

SCALE_MODES = ("group_dim", "full_dim")
RESIDUAL_MODES = ("paper", "standard")


def _uniform(rows: int, cols: int, generator: torch.Generator | None) -> Tensor:
    bound = 1.0 / math.sqrt(rows)
    w = torch.rand((rows, cols), generator=generator, dtype=torch.float64)
    return (w * 2.0 - 1.0) * bound


class LgteBlockParams(nn.Module):
    """Learnable state of one encoder block.

    ``scale_mode`` selects the softmax temperature basis: per-group width
    C / N ("group_dim", default) or the full channel count ("full_dim").
    ``residual_mode`` selects the first residual wiring: "paper" computes
    LayerNorm(f_a) + f_a, "standard" computes LayerNorm(x + f_a).
    """

    def __init__(
        self,
        channels: int,
        num_groups: int = 8,
        num_local_groups: int = 4,
        window_size: int = 9,
        ffn_hidden: int | None = None,
        scale_mode: str = "group_dim",
        residual_mode: str = "paper",
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if channels < 1 or channels % num_groups != 0:
            raise ValueError(f"channels ({channels}) must be a positive multiple of num_groups ({num_groups})")
        if not 0 <= num_local_groups <= num_groups:
            raise ValueError("num_local_groups must lie in [0, num_groups]")
        if window_size < 1 or window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 1")
        if scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"residual_mode must be one of {RESIDUAL_MODES}")
        hidden = 4 * channels if ffn_hidden is None else int(ffn_hidden)
        if hidden < 1:
            raise ValueError("ffn_hidden must be >= 1")

        self.channels = channels
        self.num_groups = num_groups
        self.num_local_groups = num_local_groups
        self.window_size = window_size
        self.ffn_hidden = hidden
        self.scale_mode = scale_mode
        self.residual_mode = residual_mode

        self.gamma = nn.Parameter(_uniform(channels, channels, generator))
        self.rho = nn.Parameter(_uniform(channels, channels, generator))
        self.phi = nn.Parameter(_uniform(channels, channels, generator))
        self.w_o = nn.Parameter(_uniform(channels, channels, generator))
        self.ffn_w1 = nn.Parameter(_uniform(channels, hidden, generator))
        self.ffn_b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.ffn_w2 = nn.Parameter(_uniform(hidden, channels, generator))
        self.ffn_b2 = nn.Parameter(torch.zeros(channels, dtype=torch.float64))
        self.ln1_scale = nn.Parameter(torch.ones(channels, dtype=torch.float64))
        self.ln1_shift = nn.Parameter(torch.zeros(channels, dtype=torch.float64))
        self.ln2_scale = nn.Parameter(torch.ones(channels, dtype=torch.float64))
        self.ln2_shift = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    @property
    def group_width(self) -> int:
        return self.channels // self.num_groups


class EncoderParams(nn.Module):
    """Ordered stack of encoder blocks sharing one channel width."""

    def __init__(self, blocks: list[LgteBlockParams]) -> None:
        super().__init__()
        widths = {b.channels for b in blocks}
        if len(widths) > 1:
            raise ValueError(f"all blocks must share one channel width, got {sorted(widths)}")
        self.blocks = nn.ModuleList(blocks)

    @property
    def channels(self) -> int | None:
        return self.blocks[0].channels if len(self.blocks) else None


def scaled_group_softmax(sims, d: int) -> Tensor:
    """Softmax of a similarity vector divided by sqrt(d), max-stabilized."""
    if d < 1:
        raise ValueError("d must be >= 1")
    s = as_float64(sims)
    z = s / math.sqrt(d)
    z = z - z.max()
    w = torch.exp(z)
    return w / w.sum()


def _masked_attention(q: Tensor, k: Tensor, v: Tensor, scale_dim: int, mask: Tensor) -> Tensor:
    """Row-wise softmax attention restricted to mask=True key positions.

    Rows whose mask support is empty produce zeros.
    """
    scores = (q @ k.transpose(0, 1)) / math.sqrt(scale_dim)
    scores = scores.masked_fill(~mask, float("-inf"))
    row_max = scores.max(dim=1, keepdim=True).values
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    weights = torch.exp(scores - row_max)
    denom = weights.sum(dim=1, keepdim=True)
    weights = weights / torch.where(denom > 0, denom, torch.ones_like(denom))
    return weights @ v


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 2:
        raise ValueError(f"q, k, v must share one T x d shape, got {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")


def lte_group_forward(
    q, k, v, window_size: int, valid_len: int | None = None, scale_dim: int | None = None
) -> Tensor:
    """Windowed attention: location i attends to keys j with |i - j| <= window//2.

    Out-of-range and padding positions are excluded from the softmax rather
    than substituted, so no fabricated keys enter the average.
    """
    q, k, v = as_float64(q), as_float64(k), as_float64(v)
    _check_qkv(q, k, v)
    if window_size < 1 or window_size % 2 == 0:
        raise ValueError("window_size must be odd and >= 1")
    t = q.shape[0]
    vl = t if valid_len is None else int(valid_len)
    idx = torch.arange(t)
    mask = ((idx[:, None] - idx[None, :]).abs() <= window_size // 2) & (idx[None, :] < vl)
    return _masked_attention(q, k, v, scale_dim or q.shape[1], mask)


def gte_group_forward(q, k, v, valid_len: int | None = None, scale_dim: int | None = None) -> Tensor:
    """Full-sequence attention over every valid location."""
    q, k, v = as_float64(q), as_float64(k), as_float64(v)
    _check_qkv(q, k, v)
    t = q.shape[0]
    vl = t if valid_len is None else int(valid_len)
    idx = torch.arange(t)
    mask = (idx[None, :] < vl).expand(t, t)
    return _masked_attention(q, k, v, scale_dim or q.shape[1], mask)


def _layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + _LN_EPS) * scale + shift


def lgte_block_forward(features, params: LgteBlockParams, valid_len: int | None = None) -> Tensor:
    """Apply one encoder block to a T x C matrix and return a T x C matrix."""
    x = as_float64(features)
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise ValueError(f"expected a T x {params.channels} input, got shape {tuple(x.shape)}")
    t = x.shape[0]
    vl = t if valid_len is None else int(valid_len)
    if not 1 <= vl <= t:
        raise ValueError(f"valid_len must be in [1, {t}], got {vl}")

    q = x @ params.gamma
    k = x @ params.rho
    v = x @ params.phi
    d = params.group_width
    scale_dim = d if params.scale_mode == "group_dim" else params.channels

    groups = []
    for g in range(params.num_groups):
        sl = slice(g * d, (g + 1) * d)
        if g < params.num_local_groups:
            groups.append(lte_group_forward(q[:, sl], k[:, sl], v[:, sl], params.window_size, vl, scale_dim))
        else:
            groups.append(gte_group_forward(q[:, sl], k[:, sl], v[:, sl], vl, scale_dim))
    f_a = torch.cat(groups, dim=1) @ params.w_o

    if params.residual_mode == "paper":
        f_b = _layer_norm(f_a, params.ln1_scale, params.ln1_shift) + f_a
    else:
        f_b = _layer_norm(x + f_a, params.ln1_scale, params.ln1_shift)

    hidden = torch.relu(f_b @ params.ffn_w1 + params.ffn_b1)
    ffn_out = hidden @ params.ffn_w2 + params.ffn_b2
    out = _layer_norm(ffn_out + f_b, params.ln2_scale, params.ln2_shift)

    if vl < t:
        keep = (torch.arange(t) < vl).to(out.dtype)
        out = out * keep[:, None]
    return out


def encode_matrix(features, params: EncoderParams, valid_len: int | None = None) -> Tensor:
    """Run the block stack over a raw T x C matrix (identity for zero blocks)."""
    x = as_float64(features)
    for block in params.blocks:
        x = lgte_block_forward(x, block, valid_len)
    return x


def encoder_forward(seq: FeatureSequence, params: EncoderParams) -> Tensor:
    """Encode a feature sequence, masking its padding in every block."""
    if params.channels is not None and params.channels != seq.num_channels:
        raise ValueError(f"encoder expects {params.channels} channels, sequence has {seq.num_channels}")
    return encode_matrix(seq.features, params, seq.valid_len)
