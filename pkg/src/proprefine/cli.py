"""Command-line surface: synthesize data, train, refine, evaluate, gradcheck.

All hyperparameters come from one JSON config (deep-merged over defaults)
with flag overrides; every subcommand is deterministic given its resolved
config and seed, and every run writes one manifest recording the command,
config digest, seed, artifacts, and wall time. Manifests are written next to
the primary output so output directories stay byte-reproducible.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint, evalkit, postproc, seqio, tbr, train as train_mod
from .lgte import EncoderParams, LgteBlockParams, as_float64, encode_matrix
from .seqio import DataError, FormatError, Proposal, SynthConfig
from .tbr import TbrStageParams
from .train import TrainConfig, TrainingDivergedError, substream_seed

DEFAULT_CONFIG: dict = {
    "encoder": {
        "channels": 32,
        "num_blocks": 2,
        "num_groups": 8,
        "num_local_groups": 4,
        "window_size": 9,
        "ffn_hidden": None,
        "scale_mode": "group_dim",
        "residual_mode": "paper",
    },
    "tbr": {
        "num_stages": 3,
        "hidden_channels": 512,
        "kernel_size": 3,
        "bins_per_region": 8,
        "boundary_extent": 0.25,
        "tau": 0.5,
        "share_frame_weights": True,
        "conf_mode": "last",
    },
    "train": {
        "i_p": 0.7,
        "i_n": 0.3,
        "lambda": 1.0,
        "learning_rate": 1e-3,
        "batch_size": 16,
        "epochs": 10,
        "seed": 0,
        "per_kind": 8,
        "iou_target": "input",
    },
    "soft_nms": {"sigma": 0.4, "score_floor": 1e-3, "top_k": 100},
    "eval": {
        "tiou_thresholds": list(evalkit.DEFAULT_TIOU_THRESHOLDS),
        "an_values": list(evalkit.DEFAULT_AN_VALUES),
        "auc_an_max": 100,
        "map_thresholds": list(evalkit.DEFAULT_MAP_THRESHOLDS),
    },
    "gradcheck": {
        "t": 32,
        "valid_len": 28,
        "num_proposals": 4,
        "num_stages": 1,
        "seed": 11,
        "epsilon": 1e-5,
        "tolerance": 1e-4,
        "samples_per_tensor": 8,
    },
    "synth": {
        "actions_min": 1,
        "actions_max": 3,
        "num_classes": 5,
        "candidates_per_action": 10,
        "snippet_interval": 8,
    },
}


@dataclass
class RunManifest:
    """Record of one CLI run, written next to the primary output."""

    command: str
    config_digest: str
    seed: int
    artifact_paths: list[str]
    wall_time_sec: float


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ValueError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON config ({exc})") from exc
    return _merge(DEFAULT_CONFIG, user)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def build_encoder(cfg: dict, seed: int) -> EncoderParams:
    enc = cfg["encoder"]
    gen = torch.Generator().manual_seed(substream_seed(seed, "init/encoder"))
    blocks = [
        LgteBlockParams(
            channels=enc["channels"],
            num_groups=enc["num_groups"],
            num_local_groups=enc["num_local_groups"],
            window_size=enc["window_size"],
            ffn_hidden=enc["ffn_hidden"],
            scale_mode=enc["scale_mode"],
            residual_mode=enc["residual_mode"],
            generator=gen,
        )
        for _ in range(enc["num_blocks"])
    ]
    return EncoderParams(blocks)


def build_stages(cfg: dict, seed: int, num_stages: int | None = None) -> list[TbrStageParams]:
    t = cfg["tbr"]
    gen = torch.Generator().manual_seed(substream_seed(seed, "init/tbr"))
    count = t["num_stages"] if num_stages is None else num_stages
    return [
        TbrStageParams(
            channels=cfg["encoder"]["channels"],
            hidden_channels=t["hidden_channels"],
            kernel_size=t["kernel_size"],
            bins_per_region=t["bins_per_region"],
            boundary_extent=t["boundary_extent"],
            tau=t["tau"],
            share_frame_weights=t["share_frame_weights"],
            generator=gen,
        )
        for _ in range(count)
    ]


def _manifest_path(primary: str | Path) -> Path:
    primary = Path(primary)
    return primary.parent / (primary.name.rstrip("/") + ".manifest.json")


def _write_manifest(command: str, cfg: dict, seed: int, artifacts: list[Path], primary: Path, started: float) -> None:
    manifest = RunManifest(
        command=command,
        config_digest=config_digest(cfg),
        seed=int(seed),
        artifact_paths=[str(p) for p in artifacts],
        wall_time_sec=time.monotonic() - started,
    )
    _manifest_path(primary).write_text(json.dumps(manifest.__dict__, indent=2, sort_keys=True) + "\n")


def _load_annotations(directory: str | Path) -> list[seqio.VideoAnnotation]:
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("*.json") if not p.name.endswith(".manifest.json"))
    if not paths:
        raise FormatError(f"no annotation files found in {directory}")
    return [seqio.load_annotation(p) for p in paths]


def _write_proposals(path: Path, by_video: dict[str, list[dict]]) -> None:
    path.write_text(json.dumps(by_video, indent=2, sort_keys=True) + "\n")


def _load_proposals(path: str | Path) -> dict[str, list[dict]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid proposals JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: proposals file must map video ids to proposal lists")
    return doc


def _cmd_synth(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    synth = cfg["synth"]
    scfg = SynthConfig(
        num_videos=args.videos,
        T=args.t,
        C=args.c,
        actions_per_video=(synth["actions_min"], synth["actions_max"]),
        jitter_scale=args.jitter,
        seed=args.seed,
        num_classes=synth["num_classes"],
        candidates_per_action=synth["candidates_per_action"],
        snippet_interval=synth["snippet_interval"],
    )
    written = seqio.save_dataset(args.out, seqio.synth_dataset(scfg))
    _write_manifest("synth", cfg, args.seed, written, Path(args.out), started)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.lr is not None:
        cfg["train"]["learning_rate"] = args.lr
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    tc = cfg["train"]
    tcfg = TrainConfig(
        i_p=tc["i_p"],
        i_n=tc["i_n"],
        lambda_=tc["lambda"],
        learning_rate=tc["learning_rate"],
        batch_size=tc["batch_size"],
        epochs=tc["epochs"],
        seed=tc["seed"],
        per_kind=tc["per_kind"],
        iou_target=tc["iou_target"],
    )
    dataset = seqio.load_dataset(args.data)
    encoder = build_encoder(cfg, tcfg.seed)
    stages = build_stages(cfg, tcfg.seed)
    result = train_mod.train_model(dataset, encoder, stages, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_model(out, result.encoder, result.stages)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.parent / (out.name + ".loss.csv")
    train_mod.write_loss_history(loss_csv, result.history)
    _write_manifest("train", cfg, tcfg.seed, [out, loss_csv], out, started)
    if result.history:
        print(f"trained {tcfg.epochs} epochs; first mean loss {result.history[0].mean_total:.6f}, "
              f"last mean loss {result.history[-1].mean_total:.6f}")
    return 0


def _refine_dataset(
    dataset: list[tuple[seqio.FeatureSequence, seqio.VideoAnnotation]],
    encoder: EncoderParams,
    stages: list[TbrStageParams],
    conf_mode: str,
    nms_cfg: postproc.SoftNmsConfig | None,
) -> dict[str, list[dict]]:
    by_video: dict[str, list[dict]] = {}
    for seq, ann in dataset:
        if not ann.candidates:
            by_video[ann.video_id] = []
            continue
        fenc = encode_matrix(as_float64(seq.features), encoder, seq.valid_len)
        result = tbr.tbr_refine(fenc, list(ann.candidates), stages, seq.valid_len)
        fused = []
        for cand, (s, e, conf) in zip(ann.candidates, result.final_intervals(conf_mode)):
            fused.append(Proposal(s, e, postproc.fuse_scores(cand.score, conf)))
        if nms_cfg is not None:
            fused = postproc.soft_nms(fused, nms_cfg)
        else:
            fused = sorted(fused, key=lambda p: (-p.score, p.start, p.end))
        by_video[ann.video_id] = [{"start": p.start, "end": p.end, "score": p.score} for p in fused]
    return by_video


def _cmd_refine(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    if args.tau is not None:
        cfg["tbr"]["tau"] = args.tau
    dataset = seqio.load_dataset(args.data)
    encoder, stages = checkpoint.load_model(args.ckpt)
    if args.stages is not None:
        if not 1 <= args.stages <= len(stages):
            raise ValueError(f"--stages must lie in [1, {len(stages)}]")
        stages = stages[: args.stages]
    if args.tau is not None:
        for s in stages:
            s.tau = args.tau
    nms_cfg = None
    if args.soft_nms:
        nms = cfg["soft_nms"]
        nms_cfg = postproc.SoftNmsConfig(sigma=nms["sigma"], score_floor=nms["score_floor"], top_k=nms["top_k"])
    by_video = _refine_dataset(dataset, encoder, stages, cfg["tbr"]["conf_mode"], nms_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_proposals(out, by_video)
    _write_manifest("refine", cfg, 0, [out], out, started)
    print(f"refined proposals for {len(by_video)} videos -> {out}")
    return 0


def _evaluate(cfg: dict, annotations: list[seqio.VideoAnnotation], by_video: dict[str, list[dict]]) -> evalkit.EvalReport:
    ecfg = cfg["eval"]
    videos = []
    det_videos = []
    have_classes = True
    for ann in annotations:
        props = [(float(p["start"]), float(p["end"]), float(p["score"])) for p in by_video.get(ann.video_id, [])]
        gts = [(g.start, g.end) for g in ann.ground_truths]
        videos.append((props, gts))
        dets = []
        for p in by_video.get(ann.video_id, []):
            if "class_id" not in p:
                have_classes = False
                break
            dets.append((float(p["start"]), float(p["end"]), int(p["class_id"]), float(p["score"])))
        det_videos.append((dets, [(g.start, g.end, g.class_id) for g in ann.ground_truths]))
    report = evalkit.evaluate_proposals(
        videos,
        an_values=ecfg["an_values"],
        auc_an_values=range(1, ecfg["auc_an_max"] + 1),
        thresholds=ecfg["tiou_thresholds"],
    )
    if have_classes and any(d for d, _ in det_videos):
        report.map_at, report.average_map = evalkit.detection_map(det_videos, ecfg["map_thresholds"])
    return report


def _cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    annotations = _load_annotations(args.data)
    by_video = _load_proposals(args.proposals)
    report = _evaluate(cfg, annotations, by_video)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    artifacts = [out]
    if args.ar_csv:
        report.write_ar_csv(args.ar_csv)
        artifacts.append(Path(args.ar_csv))
    if args.map_csv and report.map_at:
        report.write_map_csv(args.map_csv)
        artifacts.append(Path(args.map_csv))
    _write_manifest("eval", cfg, 0, artifacts, out, started)
    print(f"auc = {report.auc:.4f}")
    return 0


def _cmd_pipeline(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    if args.tau is not None:
        cfg["tbr"]["tau"] = args.tau
    dataset = seqio.load_dataset(args.data)
    encoder, stages = checkpoint.load_model(args.ckpt)
    if args.stages is not None:
        if not 1 <= args.stages <= len(stages):
            raise ValueError(f"--stages must lie in [1, {len(stages)}]")
        stages = stages[: args.stages]
    if args.tau is not None:
        for s in stages:
            s.tau = args.tau
    nms_cfg = None
    if args.soft_nms:
        nms = cfg["soft_nms"]
        nms_cfg = postproc.SoftNmsConfig(sigma=nms["sigma"], score_floor=nms["score_floor"], top_k=nms["top_k"])
    by_video = _refine_dataset(dataset, encoder, stages, cfg["tbr"]["conf_mode"], nms_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    proposals_path = Path(args.proposals) if args.proposals else out.parent / (out.name + ".proposals.json")
    _write_proposals(proposals_path, by_video)
    report = _evaluate(cfg, _load_annotations(args.data), _load_proposals(proposals_path))
    report.write_json(out)
    _write_manifest("pipeline", cfg, 0, [proposals_path, out], out, started)
    print(f"auc = {report.auc:.4f}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = load_config(args.config)
    gcfg = cfg["gradcheck"]
    epsilon = args.eps if args.eps is not None else gcfg["epsilon"]
    tolerance = args.tol if args.tol is not None else gcfg["tolerance"]
    samples = args.samples_per_tensor if args.samples_per_tensor is not None else gcfg["samples_per_tensor"]
    seed = args.seed if args.seed is not None else gcfg["seed"]

    encoder = build_encoder(cfg, seed)
    stages = build_stages(cfg, seed, num_stages=gcfg["num_stages"])
    loss_fn, named = train_mod.make_pipeline_loss(
        encoder,
        stages,
        t=gcfg["t"],
        valid_len=gcfg["valid_len"],
        num_proposals=gcfg["num_proposals"],
        lambda_=cfg["train"]["lambda"],
        i_p=cfg["train"]["i_p"],
        i_n=cfg["train"]["i_n"],
        iou_target=cfg["train"]["iou_target"],
        seed=seed,
    )
    params = [p for _, p in named]
    max_rel = train_mod.grad_check(
        loss_fn, params, epsilon=epsilon, samples_per_tensor=samples, seed=seed
    )
    manifest_out = Path(args.manifest) if args.manifest else Path("gradcheck.manifest")
    _write_manifest("gradcheck", cfg, seed, [], manifest_out, started)
    print(f"max relative gradient error = {max_rel:.3e} (tolerance {tolerance:g})")
    return 0 if max_rel < tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proprefine", description="Temporal action proposal refinement pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--t", type=int, default=128)
    p.add_argument("--c", type=int, default=32)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train encoder and regression stages")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("refine", help="refine candidate proposals with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--soft-nms", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="score proposals against annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ar-csv", default=None)
    p.add_argument("--map-csv", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="refine then evaluate in one run")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proposals", default=None)
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--soft-nms", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("gradcheck", help="verify gradients against central differences")
    p.add_argument("--config", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--samples-per-tensor", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
    except TrainingDivergedError as exc:
        print(f"training error: {exc}", file=sys.stderr)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
    return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
