"""Feature-sequence data model, on-disk formats, and a synthetic dataset generator.

A feature sequence is a T x C float32 matrix of per-snippet activations.
Padding is tracked through ``valid_len``: rows at or beyond it are exactly
zero. Time is normalized to [0, 1] per video everywhere in this package;
seconds only appear as annotation metadata.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"TCAF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4s5I")

_BACKGROUND_STD = 0.5
_PATTERN_BASE = 0.5
_PATTERN_STD = 0.5
_PATTERN_AMPLITUDE = (1.0, 2.0)
_SCORE_NOISE_STD = 0.05
_DURATION_RANGE_SEC = (30.0, 300.0)
_MIN_CANDIDATE_WIDTH = 1e-3


class FormatError(ValueError):
    """A file does not conform to the expected on-disk layout."""


class DataError(ValueError):
    """A file parses but carries invalid values (non-finite entries, bad padding)."""


@dataclass(frozen=True)
class FeatureSequence:
    """A padded T x C snippet feature matrix.

    ``valid_len`` marks the unpadded prefix. ``snippet_interval`` is the
    frame step between consecutive snippets, carried as metadata only.
    """

    features: np.ndarray
    snippet_interval: int = 1
    valid_len: int | None = None

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a T x C matrix with T, C >= 1, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        if int(self.snippet_interval) < 1:
            raise ValueError("snippet_interval must be a positive integer")
        vl = feats.shape[0] if self.valid_len is None else int(self.valid_len)
        if not 1 <= vl <= feats.shape[0]:
            raise ValueError(f"valid_len must be in [1, {feats.shape[0]}], got {vl}")
        if vl < feats.shape[0] and np.any(feats[vl:]):
            raise ValueError("rows at or beyond valid_len must be exactly zero")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "snippet_interval", int(self.snippet_interval))
        object.__setattr__(self, "valid_len", vl)

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Proposal:
    """A scored (start, end) interval in normalized video time."""

    start: float
    end: float
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError(f"proposal requires 0 <= start < end <= 1, got ({self.start}, {self.end})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"proposal score must lie in [0, 1], got {self.score}")

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class GroundTruth:
    """An annotated action interval with its class label."""

    start: float
    end: float
    class_id: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError(f"ground truth requires 0 <= start < end <= 1, got ({self.start}, {self.end})")


@dataclass(frozen=True)
class VideoAnnotation:
    """Per-video annotation: ground truths plus externally generated candidates."""

    video_id: str
    duration_sec: float
    ground_truths: tuple[GroundTruth, ...]
    candidates: tuple[Proposal, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ground_truths", tuple(self.ground_truths))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.duration_sec <= 0:
            raise ValueError("duration_sec must be positive")


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the deterministic synthetic dataset generator."""

    num_videos: int
    T: int
    C: int
    actions_per_video: tuple[int, int] = (1, 3)
    jitter_scale: float = 0.3
    seed: int = 0
    num_classes: int = 5
    candidates_per_action: int = 10
    snippet_interval: int = 8

    def __post_init__(self) -> None:
        if self.num_videos < 1 or self.T < 1 or self.C < 1:
            raise ValueError("num_videos, T, and C must all be >= 1")
        if self.jitter_scale <= 0:
            raise ValueError("jitter_scale must be positive")
        lo, hi = self.actions_per_video
        if not 1 <= lo <= hi:
            raise ValueError("actions_per_video must be an increasing range of positive integers")
        if self.num_classes < 1 or self.candidates_per_action < 1:
            raise ValueError("num_classes and candidates_per_action must be >= 1")


def write_features(path: str | Path, seq: FeatureSequence) -> None:
    """Write a feature sequence in the binary container format."""
    t, c = seq.features.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, c, seq.snippet_interval, seq.valid_len)
    payload = np.ascontiguousarray(seq.features, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_features(path: str | Path) -> FeatureSequence:
    """Load a feature sequence, validating the header and payload.

    Raises FormatError for layout problems and DataError for non-finite
    values or nonzero padding rows.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, t, c, delta, valid_len = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if t < 1 or c < 1 or delta < 1:
        raise FormatError(f"{path}: invalid dimensions T={t} C={c} delta={delta}")
    if not 1 <= valid_len <= t:
        raise FormatError(f"{path}: valid_len {valid_len} out of range for T={t}")
    payload = raw[_HEADER.size:]
    if len(payload) != t * c * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {t * c * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, c)
    if not np.isfinite(values).all():
        raise DataError(f"{path}: payload contains non-finite values")
    if valid_len < t and np.any(values[valid_len:]):
        raise DataError(f"{path}: padding rows beyond valid_len are not zero")
    return FeatureSequence(values.copy(), snippet_interval=delta, valid_len=valid_len)


def pad_to(seq: FeatureSequence, target_len: int) -> FeatureSequence:
    """Zero-pad (or trim pure padding) to ``target_len`` rows.

    The unpadded prefix and valid_len are preserved; shrinking below
    valid_len is rejected since that would truncate data.
    """
    if target_len < seq.valid_len:
        raise ValueError(f"target_len {target_len} is below valid_len {seq.valid_len}")
    out = np.zeros((target_len, seq.num_channels), dtype=np.float32)
    out[: seq.valid_len] = seq.features[: seq.valid_len]
    return FeatureSequence(out, snippet_interval=seq.snippet_interval, valid_len=seq.valid_len)


def _interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _jitter_interval(rng: np.random.Generator, gt: GroundTruth, scale: float) -> tuple[float, float]:
    length = gt.end - gt.start
    s = float(np.clip(gt.start + rng.normal(0.0, scale * length), 0.0, 1.0))
    e = float(np.clip(gt.end + rng.normal(0.0, scale * length), 0.0, 1.0))
    if e - s < _MIN_CANDIDATE_WIDTH:
        mid = float(np.clip(0.5 * (s + e), _MIN_CANDIDATE_WIDTH / 2, 1.0 - _MIN_CANDIDATE_WIDTH / 2))
        s, e = mid - _MIN_CANDIDATE_WIDTH / 2, mid + _MIN_CANDIDATE_WIDTH / 2
    return s, e


def synth_dataset(cfg: SynthConfig) -> list[tuple[FeatureSequence, VideoAnnotation]]:
    """Generate a deterministic synthetic dataset.

    Each video plants one constant feature-offset pattern per action on top of
    background noise. Candidates are the ground truths with both boundaries
    perturbed by zero-mean Gaussian noise of std jitter_scale * action length,
    scored by their overlap with the source interval plus small noise.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_videos)
    out: list[tuple[FeatureSequence, VideoAnnotation]] = []
    lo_actions, hi_actions = cfg.actions_per_video
    for v in range(cfg.num_videos):
        rng = np.random.default_rng(children[v])
        n_actions = int(rng.integers(lo_actions, hi_actions + 1))
        duration = float(rng.uniform(*_DURATION_RANGE_SEC))
        slot = 1.0 / n_actions
        gts = []
        for k in range(n_actions):
            length = slot * float(rng.uniform(0.3, 0.7))
            start = k * slot + float(rng.uniform(0.0, slot - length))
            gts.append(GroundTruth(start, start + length, int(rng.integers(0, cfg.num_classes))))

        feats = rng.normal(0.0, _BACKGROUND_STD, size=(cfg.T, cfg.C))
        # Zero-mean alternating base direction: the action signature survives
        # row-wise mean subtraction and normalization in downstream encoders.
        base = _PATTERN_BASE * np.where(np.arange(cfg.C) % 2 == 0, 1.0, -1.0)
        for gt in gts:
            amplitude = float(rng.uniform(*_PATTERN_AMPLITUDE))
            pattern = amplitude * base + rng.normal(0.0, _PATTERN_STD, size=cfg.C)
            lo = math.ceil(gt.start * (cfg.T - 1))
            hi = math.floor(gt.end * (cfg.T - 1))
            if lo <= hi:
                feats[lo : hi + 1] += pattern

        candidates = []
        for gt in gts:
            for _ in range(cfg.candidates_per_action):
                s, e = _jitter_interval(rng, gt, cfg.jitter_scale)
                score = _interval_iou((s, e), (gt.start, gt.end)) + float(rng.normal(0.0, _SCORE_NOISE_STD))
                candidates.append(Proposal(s, e, float(np.clip(score, 0.0, 1.0))))

        seq = FeatureSequence(feats.astype(np.float32), snippet_interval=cfg.snippet_interval, valid_len=cfg.T)
        ann = VideoAnnotation(f"video_{v:04d}", duration, tuple(gts), tuple(candidates))
        out.append((seq, ann))
    return out


def write_annotation(path: str | Path, ann: VideoAnnotation) -> None:
    doc = {
        "video_id": ann.video_id,
        "duration_sec": ann.duration_sec,
        "ground_truths": [
            {"start": g.start, "end": g.end, "class_id": g.class_id} for g in ann.ground_truths
        ],
        "candidates": [
            {"start": p.start, "end": p.end, "score": p.score} for p in ann.candidates
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_annotation(path: str | Path) -> VideoAnnotation:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        gts = tuple(
            GroundTruth(float(g["start"]), float(g["end"]), int(g["class_id"]))
            for g in doc["ground_truths"]
        )
        cands = tuple(
            Proposal(float(p["start"]), float(p["end"]), float(p["score"]))
            for p in doc["candidates"]
        )
        return VideoAnnotation(str(doc["video_id"]), float(doc["duration_sec"]), gts, cands)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: annotation schema violation ({exc})") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_dataset(directory: str | Path, items: list[tuple[FeatureSequence, VideoAnnotation]]) -> list[Path]:
    """Write one .tcaf/.json pair per video; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for seq, ann in items:
        feat_path = directory / f"{ann.video_id}.tcaf"
        ann_path = directory / f"{ann.video_id}.json"
        write_features(feat_path, seq)
        write_annotation(ann_path, ann)
        written.extend([feat_path, ann_path])
    return written


def load_dataset(directory: str | Path) -> list[tuple[FeatureSequence, VideoAnnotation]]:
    """Load every .tcaf/.json pair from a directory, sorted by video id."""
    directory = Path(directory)
    items = []
    for ann_path in sorted(directory.glob("*.json")):
        ann = load_annotation(ann_path)
        feat_path = directory / f"{ann.video_id}.tcaf"
        if not feat_path.exists():
            raise FormatError(f"missing feature file for video {ann.video_id!r}")
        items.append((load_features(feat_path), ann))
    if not items:
        raise FormatError(f"no annotation files found in {directory}")
    return items
