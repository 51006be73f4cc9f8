"""Single-file binary container for named float32 tensors.

Layout: magic "TCAP", u32 version, u32 tensor count, then per tensor a u32
name length, the UTF-8 name, u32 ndim, u32 dims, and the little-endian f32
payload. Encoder and stage parameters live in one container under namespaced
names; non-tensor settings (group counts, window size, sampling geometry)
are stored as small "config" tensors alongside the weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .lgte import EncoderParams, LgteBlockParams, RESIDUAL_MODES, SCALE_MODES
from .seqio import FormatError
from .tbr import TbrStageParams

CHECKPOINT_MAGIC = b"TCAP"
CHECKPOINT_VERSION = 1

_BLOCK_MATS = (
    "gamma", "rho", "phi", "w_o",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift",
)
_STAGE_MATS = (
    ("frame.conv1.weight", "frame_conv1_weight"),
    ("frame.conv1.bias", "frame_conv1_bias"),
    ("frame.conv2.weight", "frame_conv2_weight"),
    ("frame.conv2.bias", "frame_conv2_bias"),
    ("segment.conv1.weight", "segment_conv1_weight"),
    ("segment.conv1.bias", "segment_conv1_bias"),
    ("segment.conv2.weight", "segment_conv2_weight"),
    ("segment.conv2.bias", "segment_conv2_bias"),
)
_STAGE_END_MATS = (
    ("frame_end.conv1.weight", "frame_end_conv1_weight"),
    ("frame_end.conv1.bias", "frame_end_conv1_bias"),
    ("frame_end.conv2.weight", "frame_end_conv2_weight"),
    ("frame_end.conv2.bias", "frame_end_conv2_bias"),
)


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors sorted by name so equal contents give equal bytes."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = raw[offset : offset + 4 * size]
            if len(payload) != 4 * size:
                raise FormatError(f"{path}: truncated tensor payload for {name!r}")
            offset += 4 * size
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except struct.error as exc:
        raise FormatError(f"{path}: truncated container ({exc})") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors


def _to_f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().numpy().astype(np.float32)


def model_to_tensors(encoder: EncoderParams, stages: list[TbrStageParams]) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for i, block in enumerate(encoder.blocks):
        prefix = f"lgte.block{i}."
        for name in _BLOCK_MATS:
            tensors[prefix + name] = _to_f32(getattr(block, name))
        tensors[prefix + "config"] = np.array(
            [
                block.num_groups,
                block.num_local_groups,
                block.window_size,
                SCALE_MODES.index(block.scale_mode),
                RESIDUAL_MODES.index(block.residual_mode),
            ],
            dtype=np.float32,
        )
    for i, stage in enumerate(stages):
        prefix = f"tbr.stage{i}."
        for tensor_name, attr in _STAGE_MATS:
            tensors[prefix + tensor_name] = _to_f32(getattr(stage, attr))
        if not stage.share_frame_weights:
            for tensor_name, attr in _STAGE_END_MATS:
                tensors[prefix + tensor_name] = _to_f32(getattr(stage, attr))
        tensors[prefix + "config"] = np.array(
            [
                stage.bins_per_region,
                stage.boundary_extent,
                stage.tau,
                1.0 if stage.share_frame_weights else 0.0,
            ],
            dtype=np.float32,
        )
    return tensors


def _copy_into(param: torch.nn.Parameter, value: np.ndarray, name: str) -> None:
    if tuple(param.shape) != tuple(value.shape):
        raise FormatError(f"tensor {name!r} has shape {value.shape}, expected {tuple(param.shape)}")
    with torch.no_grad():
        param.copy_(torch.as_tensor(value, dtype=torch.float64))


def model_from_tensors(tensors: dict[str, np.ndarray]) -> tuple[EncoderParams, list[TbrStageParams]]:
    blocks = []
    i = 0
    while f"lgte.block{i}.config" in tensors:
        prefix = f"lgte.block{i}."
        cfg = tensors[prefix + "config"]
        channels = tensors[prefix + "gamma"].shape[0]
        block = LgteBlockParams(
            channels=channels,
            num_groups=int(round(float(cfg[0]))),
            num_local_groups=int(round(float(cfg[1]))),
            window_size=int(round(float(cfg[2]))),
            ffn_hidden=tensors[prefix + "ffn_w1"].shape[1],
            scale_mode=SCALE_MODES[int(round(float(cfg[3])))],
            residual_mode=RESIDUAL_MODES[int(round(float(cfg[4])))],
        )
        for name in _BLOCK_MATS:
            _copy_into(getattr(block, name), tensors[prefix + name], prefix + name)
        blocks.append(block)
        i += 1

    stages = []
    i = 0
    while f"tbr.stage{i}.config" in tensors:
        prefix = f"tbr.stage{i}."
        cfg = tensors[prefix + "config"]
        w1 = tensors[prefix + "frame.conv1.weight"]
        stage = TbrStageParams(
            channels=w1.shape[1],
            hidden_channels=w1.shape[0],
            kernel_size=w1.shape[2],
            bins_per_region=int(round(float(cfg[0]))),
            boundary_extent=float(cfg[1]),
            tau=float(cfg[2]),
            share_frame_weights=bool(round(float(cfg[3]))),
        )
        for tensor_name, attr in _STAGE_MATS:
            _copy_into(getattr(stage, attr), tensors[prefix + tensor_name], prefix + tensor_name)
        if not stage.share_frame_weights:
            for tensor_name, attr in _STAGE_END_MATS:
                _copy_into(getattr(stage, attr), tensors[prefix + tensor_name], prefix + tensor_name)
        stages.append(stage)
        i += 1

    if not blocks and not stages:
        raise FormatError("container holds no recognizable model tensors")
    return EncoderParams(blocks), stages


def save_model(path: str | Path, encoder: EncoderParams, stages: list[TbrStageParams]) -> None:
    save_tensors(path, model_to_tensors(encoder, stages))


def load_model(path: str | Path) -> tuple[EncoderParams, list[TbrStageParams]]:
    return model_from_tensors(load_tensors(path))
