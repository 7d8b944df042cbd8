"""Command-line entry point wiring all stages into reproducible commands.

Every command writes a run manifest (command, arguments, input content hash,
seed, wall clock) next to its outputs; all structured output is JSON, images
are PNG, diagnostics go to standard error, and any pipeline error exits
non-zero with a single machine-parsable line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import eedetect, objectives, synthgen, ticselect, trainer
from .errors import ParameterError, PipelineError

SEED_ENV = "TASL_SEED"


def _seed_override(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError as exc:
        raise ParameterError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _hash_inputs(paths) -> str:
    digest = hashlib.sha256()
    for path in sorted(str(p) for p in paths):
        p = Path(path)
        digest.update(path.encode())
        if p.is_file():
            digest.update(p.read_bytes())
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    digest.update(str(f.relative_to(p)).encode())
                    digest.update(hashlib.sha256(f.read_bytes()).digest())
    return digest.hexdigest()


def _write_run_manifest(out_dir, command: str, args: dict, inputs, outputs,
                        seed, started: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": {k: v if isinstance(v, (str, int, float, bool, type(None)))
                      else str(v)
                      for k, v in args.items() if not callable(v)},
        "inputs": [str(p) for p in inputs],
        "input_hash": _hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_clock_seconds": time.time() - started,
        "started_unix": started,
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _require_empty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ParameterError(f"{path} is not empty (use --force to overwrite)")


def _case_dirs(root: Path):
    root = Path(root)
    if (root / synthgen.MANIFEST_NAME).is_file():
        return [root]
    dirs = sorted(d for d in root.iterdir()
                  if d.is_dir() and (d / synthgen.MANIFEST_NAME).is_file())
    if not dirs:
        raise ParameterError(f"{root} contains no case directories")
    return dirs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    seed = _seed_override(args.seed)
    if args.n < 1:
        raise ParameterError("--n must be >= 1")
    out = Path(args.out)
    _require_empty(out, args.force)
    paths = synthgen.make_dataset(
        out, args.n, seed=seed, balance=args.balance, jobs=args.jobs,
        frame_count=args.frames, height=args.height, width=args.width,
        noise_sigma=args.noise, motion_amplitude=args.motion)
    _write_run_manifest(out, "synth", vars(args), [], paths, seed, started)
    print(json.dumps({"cases": len(paths), "out": str(out)}))
    return 0


def cmd_validate(args) -> int:
    started = time.time()
    report = {}
    for case_dir in _case_dirs(Path(args.data)):
        violations = synthgen.validate_case(case_dir)
        if violations:
            report[str(case_dir)] = violations
    print(json.dumps({"violations": report, "clean": not report}, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 1 if report else 0


def _select_one(case_dir: Path, out_dir: Path, args, seed) -> None:
    case = synthgen.read_case(case_dir)
    clip, selection = ticselect.select_clip(
        case.video, window=args.window, order=args.order,
        threshold=args.grad_threshold, frames=args.frames)
    manifest = dict(case.manifest)
    # remap ground truth onto sampled frame indices
    step = selection.step
    tts = selection.tts

    def remap(f):
        return int(min(max(round((f - tts) / step), 0), args.frames - 1))

    gt = manifest["ground_truth"]
    manifest["ground_truth"] = {
        "tts": remap(gt["tts"]), "ttp": remap(gt["ttp"]),
        "onsets": [remap(v) for v in gt.get("onsets", [])]}
    manifest["selection"] = {
        "source": str(case_dir), "tts": selection.tts, "ttp": selection.ttp,
        "step": selection.step, "fallback": selection.fallback,
        "raw_ground_truth": gt}
    synthgen.write_case(out_dir, clip, case.truth, manifest=manifest)
    with open(out_dir / "selection.json", "w") as fh:
        json.dump({"tts": selection.tts, "ttp": selection.ttp,
                   "step": selection.step, "fallback": selection.fallback,
                   "indices": selection.indices.tolist()}, fh, indent=2)


def cmd_select(args) -> int:
    started = time.time()
    seed = _seed_override(args.seed)
    src = Path(getattr(args, "in"))
    out = Path(args.out)
    cases = _case_dirs(src)
    _require_empty(out, args.force)
    tasks = []
    for case_dir in cases:
        dst = out if len(cases) == 1 else out / case_dir.name
        tasks.append((case_dir, dst))
    if args.jobs > 1:
        import multiprocessing
        with multiprocessing.Pool(args.jobs) as pool:
            pool.starmap(_select_worker, [(c, d, args, seed) for c, d in tasks])
    else:
        for c, d in tasks:
            _select_one(c, d, args, seed)
    _write_run_manifest(out, "select", vars(args), [src],
                        [d for _, d in tasks], seed, started)
    print(json.dumps({"cases": len(tasks), "out": str(out)}))
    return 0


def _select_worker(case_dir, out_dir, args, seed):
    _select_one(case_dir, out_dir, args, seed)


def _detect_one(case_dir: Path, out_path: Path, args, seed) -> dict:
    case = synthgen.read_case(case_dir)
    result = eedetect.earliest_enhanced_tics(
        case.video, tau_wall=args.tau_wall, tau_nwall=args.tau_nwall,
        threshold=args.grad_threshold, seed=seed)
    payload = {
        "degenerate": result.degenerate,
        "notes": result.notes,
        "positions": [{
            "group": e.group, "row": int(e.cell[0]), "col": int(e.cell[1]),
            "tts": e.tts, "tic": [float(v) for v in e.tic]}
            for e in result.entries],
    }
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2)
    if args.ssim_map:
        eedetect.write_ssim_map(args.ssim_map,
                                eedetect.adjacent_ssim_map(case.video.ceus))
    return payload


def cmd_detect(args) -> int:
    started = time.time()
    seed = _seed_override(args.seed)
    src = Path(getattr(args, "in"))
    cases = _case_dirs(src)
    outputs = []
    if len(cases) == 1:
        out_path = Path(args.out) if args.out else cases[0] / "positions.json"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _detect_one(cases[0], out_path, args, seed)
        outputs.append(out_path)
    else:
        worklist = [(c, c / "positions.json") for c in cases]
        if args.jobs > 1:
            import multiprocessing
            with multiprocessing.Pool(args.jobs) as pool:
                pool.starmap(_detect_worker,
                             [(c, o, args, seed) for c, o in worklist])
        else:
            for c, o in worklist:
                _detect_one(c, o, args, seed)
        outputs.extend(o for _, o in worklist)
    _write_run_manifest(outputs[0].parent, "detect", vars(args), [src],
                        outputs, seed, started)
    print(json.dumps({"cases": len(cases)}))
    return 0


def _detect_worker(case_dir, out_path, args, seed):
    _detect_one(case_dir, out_path, args, seed)


def cmd_train(args) -> int:
    started = time.time()
    config = trainer.read_config_file(args.config) if args.config \
        else trainer.TrainConfig()
    seed = _seed_override(config.seed)
    if seed != config.seed:
        config = trainer.TrainConfig(**{**_config_dict(config), "seed": seed})
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case_dirs = _case_dirs(data)
    cases = trainer.prepare_cases(case_dirs, config, cache_dir=out / "cache")
    labels = [c.label for c in cases]
    folds = objectives.kfold_split([c.case_id for c in cases], labels,
                                   k=max(2, min(5, min(labels.count(0), labels.count(1)))),
                                   seed=seed)
    val_ids = set(folds[0])
    train_cases = [c for c in cases if c.case_id not in val_ids]
    val_cases = [c for c in cases if c.case_id in val_ids]
    result = trainer.train(config, train_cases, val_cases, out_dir=out)
    with open(out / "history.json", "w") as fh:
        json.dump(result.history, fh, indent=2)
    _write_run_manifest(out, "train", vars(args), [data],
                        [result.checkpoint_path, out / "history.json"],
                        seed, started)
    print(json.dumps({"best_epoch": result.best_epoch,
                      "best_val_auc": result.best_val_auc,
                      "checkpoint": str(result.checkpoint_path)}))
    return 0


def _config_dict(config) -> dict:
    import dataclasses
    return dataclasses.asdict(config)


def cmd_eval(args) -> int:
    started = time.time()
    model, config, meta = trainer.model_from_checkpoint(args.checkpoint)
    data = Path(args.data)
    cases = trainer.prepare_cases(_case_dirs(data), config)
    report = trainer.evaluate(model, cases, config, threshold=args.threshold)
    out = Path(args.out) if args.out else data / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    scores, labels, _ = trainer._evaluate_scores(model, cases, config)
    table = ["fpr\ttpr"]
    try:
        table += [f"{fpr:.6f}\t{tpr:.6f}"
                  for fpr, tpr in objectives.roc_points(scores, labels)]
    except PipelineError:
        table += ["# single-class labels: ROC undefined"]
    (out.parent / "roc_points.txt").write_text("\n".join(table) + "\n")
    _write_run_manifest(out.parent, "eval", vars(args),
                        [args.checkpoint, data],
                        [out, out.parent / "roc_points.txt"],
                        meta.get("config", {}).get("seed"), started)
    print(json.dumps(report.as_dict()))
    return 0


def _normalize_u8(arr: np.ndarray) -> np.ndarray:
    arr = arr.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.rint((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def cmd_export_attn(args) -> int:
    import torch

    started = time.time()
    model, config, _ = trainer.model_from_checkpoint(args.checkpoint)
    case_dir = Path(args.case)
    case = synthgen.read_case(case_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = trainer.prepare_cases([case_dir], config)[0]
    video = torch.from_numpy(prep.video).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        feats = model.cmt.forward_features(video)

    frames = config.frames
    H, W = case.video.frame_shape
    outputs = []
    for stage_idx, tokens in enumerate(feats["stage_tokens"], start=1):
        if args.stage not in ("all", f"s{stage_idx}"):
            continue
        magnitude = tokens[0].norm(dim=-1).numpy()     # (T, h, w)
        T = magnitude.shape[0]
        for f in range(frames):
            t = min(int(f * T / frames), T - 1)
            img = Image.fromarray(_normalize_u8(magnitude[t]))
            img = img.resize((W, H), Image.NEAREST)
            path = out / f"stage{stage_idx}_frame{f:03d}.png"
            img.save(path)
            outputs.append(path)

    if args.stage in ("all", "detect"):
        positions_path = case_dir / "positions.json"
        if positions_path.is_file():
            positions = json.loads(positions_path.read_text())["positions"]
        else:
            result = eedetect.earliest_enhanced_tics(case.video)
            positions = [{"group": e.group, "row": e.cell[0], "col": e.cell[1]}
                         for e in result.entries]
        ssim_map = eedetect.adjacent_ssim_map(case.video.ceus)
        for f in range(case.video.frame_count):
            img = Image.fromarray(case.video.ceus[f]).convert("RGB")
            draw = ImageDraw.Draw(img)
            pair = min(f, ssim_map.shape[2] - 1)
            # grid contours shaded by similarity, selected cells boxed
            for i in range(ssim_map.shape[0]):
                for j in range(ssim_map.shape[1]):
                    val = ssim_map[i, j, pair]
                    shade = int(np.clip((1.0 - val) * 255, 0, 255))
                    draw.rectangle([j * 64, i * 64, j * 64 + 63, i * 64 + 63],
                                   outline=(shade, shade, 0))
            for p in positions:
                draw.rectangle([p["col"] * 64 + 2, p["row"] * 64 + 2,
                                p["col"] * 64 + 61, p["row"] * 64 + 61],
                               outline=(255, 0, 0), width=2)
            path = out / f"detect_frame{f:03d}.png"
            img.save(path)
            outputs.append(path)

    _write_run_manifest(out, "export-attn", vars(args),
                        [args.checkpoint, case_dir], outputs, config.seed,
                        started)
    print(json.dumps({"images": len(outputs), "out": str(out)}))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="busvid",
        description="Bimodal ultrasound video pipeline: synthesize, select, "
                    "detect, train, evaluate, export attention maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=384)
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--motion", type=float, default=0.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check dataset consistency")
    p.add_argument("data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("select", help="sample the enhancing clip per case")
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=ticselect.DEFAULT_SG_WINDOW)
    p.add_argument("--order", type=int, default=ticselect.DEFAULT_SG_ORDER)
    p.add_argument("--grad-threshold", type=float,
                   default=ticselect.DEFAULT_GRADIENT_THRESHOLD)
    p.add_argument("--frames", type=int, default=ticselect.DEFAULT_FRAME_BUDGET)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("detect", help="earliest-enhanced positions and curves")
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out")
    p.add_argument("--tau-wall", type=float, default=eedetect.TAU_WALL)
    p.add_argument("--tau-nwall", type=float, default=eedetect.TAU_NONWALL)
    p.add_argument("--grad-threshold", type=float,
                   default=ticselect.DEFAULT_GRADIENT_THRESHOLD)
    p.add_argument("--ssim-map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attn", help="write attention/activation maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="all",
                   choices=["all", "s1", "s2", "s3", "s4", "detect"])
    p.set_defaults(func=cmd_export_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
