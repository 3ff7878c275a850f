"""``renderflow`` command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command writes into a run directory (``--run``, default
``$RENDERFLOW_RUN_DIR/<command>-<timestamp>``) holding ``config.snapshot``,
``manifest.json`` and whatever the command produces (``log.jsonl``,
``ckpt/``, ``images/``, ``report.json``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from renderflow.checkpoint import file_hash, load_checkpoint, save_checkpoint
from renderflow.config import RunConfig, load_config
from renderflow.errors import ConfigError, RenderFlowError
from renderflow.metrics import jsonable

log = logging.getLogger("renderflow")

COMMANDS = ("synth", "train", "train-keyframe", "train-inverse", "infer", "invert", "eval", "ablate",
            "edit-material", "config-dump")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# helpers

def _run_dir(args, command) -> Path:
    if getattr(args, "run", None):
        path = Path(args.run)
    else:
        root = Path(os.environ.get("RENDERFLOW_RUN_DIR", "runs"))
        path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
        k = 1
        while path.exists():
            path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _start(args, command, cfg: RunConfig) -> Path:
    run = _run_dir(args, command)
    (run / "config.snapshot").write_text(cfg.dump())
    return run


def _finish(run: Path, command, args, **info):
    manifest = {"command": command, "argv": sys.argv[1:], "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **info}
    (run / "manifest.json").write_text(json.dumps(jsonable(manifest), indent=2, sort_keys=True))


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True))


def save_png(path, image):
    """8-bit PNG of a [0, 1] float image (value * 255, rounded)."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _write_frames(directory: Path, frames):
    for i, frame in enumerate(frames):
        save_png(directory / f"frame_{i:04d}.png", frame)


def resolve_sequences(path, split=None):
    """A ``.rfsq`` file, its path without extension, or a dataset directory."""
    from renderflow.scene.sequence import read_manifest, read_sequence

    p = Path(path)
    if p.is_dir():
        manifest = read_manifest(p)
        entries = [e for e in manifest["sequences"] if split is None or e["split"] == split]
        return [(Path(e["path"]).stem, read_sequence(p / e["path"])) for e in entries]
    if not p.exists() and p.with_name(p.name + ".rfsq").exists():
        p = p.with_name(p.name + ".rfsq")
    if not p.exists():
        raise FileNotFoundError(f"no sequence file or dataset directory at {path}")
    return [(p.stem, read_sequence(p))]


def _load_split(data_dir, split):
    from renderflow.scene.sequence import load_dataset

    seqs = load_dataset(data_dir, split)
    if not seqs:
        raise RenderFlowError(f"{data_dir} has no sequences in split {split!r}")
    return seqs


def _net_for(cfg: RunConfig, seqs):
    from renderflow.model import NetConfig

    d = cfg.net.to_dict()
    d["image_res"], d["env_res"] = list(seqs[0].resolution), list(seqs[0].envmap.resolution)
    return NetConfig(**d)


# ----------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg: RunConfig):
    from renderflow.scene.sequence import write_dataset

    ds = cfg.dataset
    seed = ds.seed if args.seed is None else args.seed
    n = ds.sequences if args.sequences is None else args.sequences
    frames = ds.frames if args.frames is None else args.frames
    if n < 1 or frames < 1:
        raise UsageError("--sequences and --frames must be >= 1")
    seq_cfg = cfg.dataset.sequence_config()
    seq_cfg.frames = frames
    out = Path(args.out) if args.out else _run_dir(args, "synth") / "data"
    manifest = write_dataset(out, seed, n, seq_cfg, ds.val_frac, ds.test_frac)
    print(f"wrote {n} sequences to {out}")
    return {"out": str(out), "seed": seed, "sequences": len(manifest["sequences"])}


def cmd_train(args, cfg: RunConfig, run: Path):
    from renderflow.train import train_stage1

    seqs = _load_split(args.data, "train")
    over = {"steps": args.steps} if args.steps else {}
    tcfg = cfg.train_config("base", **over)
    resume = load_checkpoint(args.resume) if args.resume else None
    ck = train_stage1(seqs, tcfg, _net_for(cfg, seqs), resume=resume, log_path=run / "log.jsonl",
                      ckpt_dir=run / "ckpt")
    digest = save_checkpoint(ck, run / "ckpt" / "final.rfck")
    _write_json(run / "report.json", {"final_loss": ck.history[-1]["loss"] if ck.history else None,
                                      "steps": ck.step, "checkpoint_sha256": digest,
                                      "params_hash": ck.params_hash()})
    print(f"checkpoint: {run / 'ckpt' / 'final.rfck'}")
    return {"seed": tcfg.seed, "checkpoint": str(run / "ckpt" / "final.rfck"), "checkpoint_sha256": digest}


def cmd_train_keyframe(args, cfg: RunConfig, run: Path):
    from renderflow.train import train_stage2

    seqs = _load_split(args.data, "train")
    base = load_checkpoint(args.ckpt)
    over = {"steps": args.steps}
    if args.gap:
        over["keyframe_gap"] = args.gap
    tcfg = cfg.train_config("keyframe", **over)
    ck = train_stage2(seqs, base, tcfg, log_path=run / "log.jsonl", ckpt_dir=run / "ckpt")
    digest = save_checkpoint(ck, run / "ckpt" / "final.rfck")
    _write_json(run / "report.json", {"steps": ck.step, "checkpoint_sha256": digest,
                                      "base_checkpoint_sha256": file_hash(args.ckpt)})
    print(f"checkpoint: {run / 'ckpt' / 'final.rfck'}")
    return {"seed": tcfg.seed, "base_checkpoint_sha256": file_hash(args.ckpt), "checkpoint_sha256": digest}


def cmd_train_inverse(args, cfg: RunConfig, run: Path):
    from renderflow.inverse import build_inverse, evaluate_inverse, train_inverse

    seqs = _load_split(args.data, "train")
    fwd = load_checkpoint(args.ckpt)
    icfg = cfg.inverse_config(**({"steps": args.steps} if args.steps else {}))
    ck = train_inverse(seqs, fwd, icfg, log_path=run / "log.jsonl")
    digest = save_checkpoint(ck, run / "ckpt" / "inverse.rfck")
    report = {"steps": ck.step, "checkpoint_sha256": digest, "forward_checkpoint_sha256": file_hash(args.ckpt),
              "max_frozen_grad_norm": max((h["frozen_grad_norm"] for h in ck.history), default=0.0)}
    val = _try_split(args.data, "val")
    if val:
        report["validation"] = evaluate_inverse(build_inverse(ck, fwd), val)
    _write_json(run / "report.json", report)
    print(f"checkpoint: {run / 'ckpt' / 'inverse.rfck'}")
    return {"seed": icfg.seed, "checkpoint_sha256": digest, "forward_checkpoint_sha256": report[
        "forward_checkpoint_sha256"]}


def _try_split(data_dir, split):
    from renderflow.scene.sequence import load_dataset

    return load_dataset(data_dir, split)


def _infer_config(cfg: RunConfig, args):
    from renderflow.infer import InferConfig

    d = {k: v for k, v in cfg.to_dict()["infer"].items()}
    if args.steps is not None:
        d["steps"] = args.steps
    if args.mode is not None:
        d["mode"] = args.mode
    if getattr(args, "keyframe_gap", None):
        d["use_keyframes"], d["keyframe_gap"] = True, args.keyframe_gap
    return InferConfig(**d)


def cmd_infer(args, cfg: RunConfig, run: Path):
    from renderflow.infer import NetVelocity, render_sequence

    icfg = _infer_config(cfg, args)
    model = NetVelocity.from_checkpoint(args.ckpt)
    ckpt_hash = file_hash(args.ckpt)
    outputs = {}
    for name, seq in resolve_sequences(args.input, args.split):
        gap = icfg.keyframe_gap if icfg.use_keyframes else None
        res = render_sequence(model, seq, icfg, keyframe_gap=gap)
        _write_frames(run / "images" / name, res.images)
        meta = {"config": res.config, "frame_seconds": res.frame_seconds, "checkpoint_sha256": ckpt_hash,
                "input": name, "frames": len(res)}
        _write_json(run / "images" / name / "metadata.json", meta)
        outputs[name] = len(res)
    print(f"rendered {sum(outputs.values())} frames into {run / 'images'}")
    return {"checkpoint_sha256": ckpt_hash, "rng_seed": icfg.rng_seed, "outputs": outputs}


def cmd_invert(args, cfg: RunConfig, run: Path):
    from renderflow.inverse import depth_from_log, inverse_forward, load_inverse

    model = load_inverse(args.ckpt, args.forward)
    outputs = {}
    for name, seq in resolve_sequences(args.input, args.split):
        model_pred = inverse_forward(model, seq.stack("reference"), args.modality)
        pred = depth_from_log(model_pred) if args.modality == "depth" else model_pred
        _write_frames(run / "images" / name / args.modality, pred)
        np.save(run / "images" / name / f"{args.modality}.npy", model_pred)
        outputs[name] = len(pred)
    print(f"wrote {args.modality} layers into {run / 'images'}")
    return {"inverse_checkpoint_sha256": file_hash(args.ckpt), "forward_checkpoint_sha256": file_hash(args.forward),
            "outputs": outputs}


def _pred_frames(pred_root: Path, name: str):
    for cand in (pred_root / "images" / name, pred_root / name):
        if cand.is_dir():
            files = sorted(cand.glob("frame_*.png"))
            if files:
                return np.stack([load_png(f) for f in files])
    raise FileNotFoundError(f"no predicted frames for {name} under {pred_root}")


def cmd_eval(args, cfg: RunConfig, run: Path):
    from renderflow.metrics import evaluate_frames, merge_reports

    pred_root = Path(args.pred)
    reports, per_seq = [], {}
    for name, seq in resolve_sequences(args.gt, args.split):
        try:
            pred = _pred_frames(pred_root, name)
        except FileNotFoundError:
            if Path(args.gt).is_dir():
                continue
            raise
        gt = seq.stack("reference")
        if pred.shape != gt.shape:
            raise RenderFlowError(f"{name}: predicted frames {pred.shape} do not match reference {gt.shape}")
        rep = evaluate_frames(pred, gt)
        reports.append(rep)
        per_seq[name] = rep.aggregate
    if not reports:
        raise RenderFlowError(f"no predictions under {pred_root} match sequences in {args.gt}")
    merged = merge_reports(reports, meta={"pred": str(pred_root), "gt": str(args.gt)})
    out = {"aggregate": merged.aggregate, "per_sequence": per_seq, "meta": merged.meta}
    target = Path(args.report) if args.report else run / "report.json"
    _write_json(target, out)
    agg = merged.aggregate
    print(f"psnr {agg['psnr']:.3f} dB  ssim {agg['ssim']:.4f}  perceptual_proxy {agg['perceptual_proxy']:.4f}"
          f"  -> {target}")
    return {"report": str(target)}


def cmd_ablate(args, cfg: RunConfig, run: Path):
    from renderflow.evaluate import run_ablation

    train = _load_split(args.data, "train")
    evals = _load_split(args.data, cfg.eval.split)
    budget = cfg.ablation_budget()
    budget.net = _net_for(cfg, train)
    table = run_ablation(args.suite, train, evals, budget)
    table.write(run)
    _write_json(run / "report.json", table.to_dict())
    print(table.to_text())
    return {"suite": args.suite, "seed": budget.seed}


def cmd_edit_material(args, cfg: RunConfig, run: Path):
    from renderflow.infer import NetVelocity, material_edit_demo

    try:
        start, end = json.loads(args.start), json.loads(args.end)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--start/--end must be numbers or JSON lists: {exc}") from exc
    edit = {"object": args.object, "param": args.param, "start": start, "end": end}
    model = NetVelocity.from_checkpoint(args.ckpt)
    res = model.image_res
    seq_cfg = cfg.dataset.sequence_config()
    seq_cfg.res = tuple(res)
    result, plog, side, _ = material_edit_demo(model, args.seed, edit, frames=args.frames, seq_config=seq_cfg,
                                               config=_infer_config(cfg, args))
    _write_frames(run / "images", side)
    _write_json(run / "report.json", {"edit": edit, "parameter_log": plog, "frame_seconds": result.frame_seconds})
    print(f"wrote {len(side)} side-by-side frames into {run / 'images'}")
    return {"seed": args.seed, "checkpoint_sha256": file_hash(args.ckpt)}


# ----------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
    common.add_argument("--run", help="run directory (default: $RENDERFLOW_RUN_DIR/<command>-<time>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="renderflow", description="Bridge-matching neural renderer toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="synthesize a procedural dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="stage 1: backbone + envmap adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="continue from a stage-1 checkpoint")

    p = sub.add_parser("train-keyframe", parents=[common], help="stage 2: keyframe adapter only")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--gap", type=int)

    p = sub.add_parser("train-inverse", parents=[common], help="train the intrinsic decomposition adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="forward checkpoint")
    p.add_argument("--steps", type=int)

    for name, hlp in (("infer", "render sequences"), ("edit-material", "material interpolation demo")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--mode", choices=("ode", "sde"))
        if name == "infer":
            p.add_argument("--input", required=True, help="sequence file, path without .rfsq, or dataset dir")
            p.add_argument("--split")
            p.add_argument("--keyframe-gap", type=int)
        else:
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--object", required=True)
            p.add_argument("--param", required=True, choices=("roughness", "metallic", "specular", "albedo"))
            p.add_argument("--start", required=True)
            p.add_argument("--end", required=True)
            p.add_argument("--frames", type=int, default=5)

    p = sub.add_parser("invert", parents=[common], help="intrinsic decomposition of sequences")
    p.add_argument("--ckpt", required=True, help="inverse checkpoint")
    p.add_argument("--forward", required=True, help="forward checkpoint the adapter was trained on")
    p.add_argument("--input", required=True)
    p.add_argument("--split")
    p.add_argument("--modality", default="albedo", choices=("albedo", "normal", "depth", "material"))

    p = sub.add_parser("eval", parents=[common], help="score rendered frames against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split")
    p.add_argument("--report")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    p.add_argument("--suite", required=True,
                   choices=("schedules", "pixel_losses", "keyframe_designs", "keyframe_gaps", "inference_steps"))
    p.add_argument("--data", required=True)

    p = sub.add_parser("config-dump", parents=[common], help="print the effective configuration")
    p.add_argument("--out")
    return parser


_HANDLERS = {
    "train": cmd_train, "train-keyframe": cmd_train_keyframe, "train-inverse": cmd_train_inverse,
    "infer": cmd_infer, "invert": cmd_invert, "eval": cmd_eval, "ablate": cmd_ablate,
    "edit-material": cmd_edit_material,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + f"\ncommands: {', '.join(COMMANDS)}")
        cfg = load_config(args.config, args.set)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "config-dump":
            text = cfg.dump()
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
        if args.command == "synth":
            info = cmd_synth(args, cfg)
            if args.run:
                (Path(args.run) / "config.snapshot").write_text(cfg.dump())
                _finish(Path(args.run), "synth", args, **info)
            return 0
        run = _start(args, args.command, cfg)
        info = _HANDLERS[args.command](args, cfg, run)
        _finish(run, args.command, args, **(info or {}))
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RenderFlowError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
