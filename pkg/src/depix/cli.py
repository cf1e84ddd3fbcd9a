"""Command-line entry point: ``depix <command> [flags]``.

Every flag mirrors a key of :class:`~depix.pipeline.RunConfig`; values from
``--config`` are applied first and explicit flags win. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .alignment import Aligner, IdentityAligner, train_stn
from .depix_train import train_depix
from .errors import ConfigError, DataError, DepixError
from .metrics import Scope, aggregate
from .nets import load_checkpoint
from .pipeline import (AblationPlan, RunConfig, evaluate_dirs, id_extractor, infer_clip, load_config,
                       make_report, run_ablation, write_provenance)

log = logging.getLogger("depix")


class JsonLinesHandler(logging.Handler):
    def __init__(self, path):
        super().__init__()
        self.path = Path(path)

    def emit(self, record):
        line = json.dumps({"time": record.created, "level": record.levelname,
                           "logger": record.name, "message": record.getMessage()})
        with open(self.path, "a") as f:
            f.write(line + "\n")


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _attach_run_log(run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = JsonLinesHandler(run_dir / "run_log.jsonl")
    logging.getLogger().addHandler(handler)
    return handler


# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "source": "paths.source",
    "lr_size": "data.lr_size",
    "hr_size": "data.hr_size",
    "test_fraction": "data.test_fraction",
    "synthetic_clips": "data.synthetic_clips",
    "synthetic_frames": "data.synthetic_frames",
    "stn_steps": "stn_train.steps",
    "lambda_id": "stn_train.lambda_id",
    "w": "window.w",
    "d": "window.d",
    "lambda_p": "depix_train.lambda_p",
    "lambda_adv": "depix_train.lambda_adv",
    "depix_steps": "depix_train.steps",
    "batch_size": "depix_train.batch_size",
    "base_channels": "gen.base_channels",
    "extractor_width": "depix_train.extractor_width",
    "vgg19_weights": "depix_train.vgg19_weights",
    "vggface_weights": "depix_train.vggface_weights",
    "stn": "paths.stn_ckpt",
}

OUT_KEYS = {
    "prepare-data": "paths.data_root",
    "train-stn": "paths.stn_ckpt",
    "train-depix": "paths.depix_dir",
    "infer": "paths.infer_dir",
    "evaluate": "paths.eval_out",
    "ablate": "paths.ablate_dir",
}


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "manifest", None):
        overrides["paths.data_root"] = str(_manifest_root(args.manifest))
    if getattr(args, "out", None) and args.command in OUT_KEYS:
        overrides[OUT_KEYS[args.command]] = args.out
    if getattr(args, "no_stn", False):
        overrides["use_stn"] = False
    return cfg.with_overrides(overrides)


def _manifest_root(path) -> Path:
    p = Path(path)
    return p if p.is_dir() else p.parent


def _require(value, what):
    if not value:
        raise ConfigError(f"{what} is required (flag or config file)")
    return value


def _split_clips(cfg: RunConfig, split=None):
    root = Path(_require(cfg.paths.data_root, "--manifest"))
    manifests = data_mod.read_manifests(root)
    if split:
        manifests = [m for m in manifests if m.split == split]
    if not manifests:
        raise DataError(f"no {split or ''} clips listed under {root}")
    for m in manifests:
        if m.lr_size != cfg.data.lr_size:
            raise ConfigError(f"clip {m.clip_id} was pixelated at {m.lr_size}px, config says {cfg.data.lr_size}")
    return [data_mod.load_clip(root, m) for m in manifests]


def _skip(path, args) -> bool:
    if Path(path).exists() and not args.force:
        log.info("%s exists, skipping (use --force to redo)", path)
        return True
    return False


def cmd_prepare_data(cfg: RunConfig, args):
    root = Path(_require(cfg.paths.data_root, "--out"))
    if _skip(root / data_mod.MANIFEST_NAME, args):
        return
    source = _require(cfg.paths.source, "--source")
    if source == "synthetic":
        n = cfg.data.synthetic_clips or 4
        sources = data_mod.write_synthetic_sources(root / "_sources", n, cfg.data.synthetic_frames,
                                                   cfg.data.crop_resolution, cfg.seed)
    else:
        sources = data_mod.clip_sources(source)
    manifests = data_mod.prepare_dataset(sources, root, cfg.data.lr_size, cfg.data.hr_size,
                                         cfg.data.test_fraction, cfg.seed,
                                         data_mod.CropSpec(cfg.data.crop_resolution))
    write_provenance(root, cfg, command="prepare-data")
    log.info("prepared %d clips under %s", len(manifests), root)


def cmd_train_stn(cfg: RunConfig, args):
    out = Path(_require(cfg.paths.stn_ckpt, "--out"))
    if _skip(out, args):
        return
    clips = {c.clip_id: c.lr for c in _split_clips(cfg, "train")}
    run_dir = out.parent / (out.stem + "_run")
    write_provenance(run_dir, cfg, command="train-stn")
    log_path = run_dir / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    train_stn(clips, cfg.stn_config(), cfg.stn_hyper(log_path), out=out)
    log.info("wrote %s", out)


def _aligner(cfg: RunConfig):
    if not cfg.use_stn:
        return IdentityAligner(cfg.data.lr_size, cfg.stn_net.grid_resolution)
    return Aligner.load(_require(cfg.paths.stn_ckpt, "--stn"))


def cmd_train_depix(cfg: RunConfig, args):
    out = Path(_require(cfg.paths.depix_dir, "--out"))
    if _skip(out / "DONE", args):
        return
    clips = _split_clips(cfg, "train")
    try:
        val = _split_clips(cfg, "test")
    except DataError:
        val = []
    write_provenance(out, cfg, command="train-depix")
    train_depix(clips, _aligner(cfg), cfg.window_spec(), cfg.gen_config(), cfg.disc, cfg.depix_hyper(),
                val_clips=val, out_dir=out)
    (out / "DONE").write_text(time.strftime("%Y-%m-%dT%H:%M:%S\n"))


def cmd_infer(cfg: RunConfig, args):
    out = Path(_require(cfg.paths.infer_dir, "--out"))
    if _skip(out / "DONE", args):
        return
    gen_path = args.generator or (Path(_require(cfg.paths.depix_dir, "--generator")) / "generator.pt")
    gen = load_checkpoint(gen_path, kind="depix", expected_config=cfg.gen_config())
    aligner = _aligner(cfg)
    clips = _split_clips(cfg, None if args.clip else args.split)
    if args.clip:
        clips = [c for c in clips if c.clip_id == args.clip]
        if not clips:
            raise DataError(f"clip {args.clip} not in manifest")
    write_provenance(out, cfg, command="infer")
    for clip in clips:
        infer_clip(gen, aligner, clip, cfg.window_spec(), out / clip.clip_id)
    (out / "DONE").write_text(time.strftime("%Y-%m-%dT%H:%M:%S\n"))


def _pairs_for_eval(pred_dir: Path, gt_dir: Path, hr_size: int):
    subdirs = sorted(p for p in pred_dir.iterdir() if p.is_dir())
    if not subdirs:
        return [(pred_dir.name, pred_dir, gt_dir)]
    pairs = []
    for d in subdirs:
        gt = gt_dir / d.name / f"gt{hr_size}"
        pairs.append((d.name, d, gt if gt.is_dir() else gt_dir / d.name))
    return pairs


def cmd_evaluate(cfg: RunConfig, args):
    out = Path(_require(cfg.paths.eval_out, "--out"))
    if _skip(out, args):
        return
    pred_dir = Path(args.pred_dir or _require(cfg.paths.infer_dir, "--pred-dir"))
    gt_dir = Path(args.gt_dir or _require(cfg.paths.data_root, "--gt-dir"))
    extractor = id_extractor(cfg)
    frames, clip_recs = [], []
    for clip_id, p, g in _pairs_for_eval(pred_dir, gt_dir, cfg.data.hr_size):
        recs, _ = evaluate_dirs(p, g, extractor)
        for r in recs:
            r.name = f"{clip_id}/{r.name}"
        frames += recs
        clip_recs.append(aggregate(recs, Scope.CLIP, clip_id))
    summary = aggregate(frames, Scope.DATASET)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".frames.jsonl"), "w") as f:
        for r in frames:
            f.write(json.dumps(r.to_dict()) + "\n")
    out.write_text(json.dumps({
        "summary": {"PSNR": summary.psnr, "SSIM": summary.ssim, "ID": summary.id_sim, "count": summary.count},
        "clips": [r.to_dict() for r in clip_recs],
        "frames": [r.to_dict() for r in frames],
    }, indent=2))
    print(f"PSNR {summary.psnr:.4f}  SSIM {summary.ssim:.4f}  ID {summary.id_sim:.4f}  ({summary.count} frames)")


def cmd_ablate(cfg: RunConfig, args):
    out = Path(_require(cfg.paths.ablate_dir, "--out"))
    if _skip(out / "ablation.json", args):
        return
    if args.plan:
        plan = AblationPlan.from_dict(json.loads(Path(args.plan).read_text()))
    else:
        plan = AblationPlan.default()
    train = _split_clips(cfg, "train")
    try:
        test = _split_clips(cfg, "test")
    except DataError:
        log.warning("no test split, evaluating ablations on the training clips")
        test = train
    result = run_ablation(plan, cfg, train, test, out)
    for r in result["rows"]:
        if r["status"] == "ok":
            print(f"{r['version']:>12}  PSNR {r['PSNR']:.4f}  SSIM {r['SSIM']:.4f}  ID {r['ID']:.4f}")
        else:
            print(f"{r['version']:>12}  FAILED  {r['error']}")


def cmd_report(cfg: RunConfig, args):
    out = Path(args.out)
    if _skip(out / "sheet_000.png", args):
        return
    preds = []
    for item in args.pred_dir:
        name, sep, path = item.partition("=")
        preds.append((name, path) if sep else (Path(item).name, item))
    paths = make_report(preds, args.gt_dir, args.pix_dir, out, args.frames_per_sheet)
    print("\n".join(str(p) for p in paths))


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-stn": cmd_train_stn,
    "train-depix": cmd_train_depix,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="redo work even if outputs exist")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="depix", description="Face video de-pixelization pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", parents=[common], help="ingest clips, pixelate, split")
    s.add_argument("--source", help="directory of clips (frame dirs or videos), or 'synthetic'")
    s.add_argument("--out")
    s.add_argument("--lr-size", type=int, choices=(8, 16))
    s.add_argument("--hr-size", type=int)
    s.add_argument("--test-fraction", type=float)
    s.add_argument("--synthetic-clips", type=int)
    s.add_argument("--synthetic-frames", type=int)

    s = sub.add_parser("train-stn", parents=[common], help="train the alignment network")
    s.add_argument("--manifest")
    s.add_argument("--lr-size", type=int, choices=(8, 16))
    s.add_argument("--out")
    s.add_argument("--steps", type=int, dest="stn_steps")
    s.add_argument("--lambda-id", type=float)

    s = sub.add_parser("train-depix", parents=[common], help="train the de-pixelization network")
    s.add_argument("--manifest")
    s.add_argument("--stn")
    s.add_argument("--no-stn", action="store_true", help="identity alignment (ablation)")
    s.add_argument("--w", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--lr-size", type=int, choices=(8, 16))
    s.add_argument("--lambda-p", type=float)
    s.add_argument("--lambda-adv", type=float)
    s.add_argument("--steps", type=int, dest="depix_steps")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--extractor-width", type=float)
    s.add_argument("--vgg19-weights")
    s.add_argument("--vggface-weights")
    s.add_argument("--out")

    s = sub.add_parser("infer", parents=[common], help="de-pixelate clips")
    s.add_argument("--generator")
    s.add_argument("--stn")
    s.add_argument("--no-stn", action="store_true")
    s.add_argument("--manifest")
    s.add_argument("--clip")
    s.add_argument("--split", default="test")
    s.add_argument("--w", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--lr-size", type=int, choices=(8, 16))
    s.add_argument("--base-channels", type=int)
    s.add_argument("--out")

    s = sub.add_parser("evaluate", parents=[common], help="PSNR / SSIM / ID of predictions")
    s.add_argument("--pred-dir")
    s.add_argument("--gt-dir")
    s.add_argument("--out")
    s.add_argument("--vggface-weights")
    s.add_argument("--extractor-width", type=float)

    s = sub.add_parser("ablate", parents=[common], help="run an ablation plan")
    s.add_argument("--manifest")
    s.add_argument("--plan", help="JSON ablation plan (default: full, w/o STN, w/o disc., F sweep)")
    s.add_argument("--out")

    s = sub.add_parser("report", parents=[common], help="contact sheets of inputs, GT and outputs")
    s.add_argument("--pred-dir", action="append", required=True, help="[name=]dir, repeatable")
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--pix-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames-per-sheet", type=int, default=6)
    return p


def _run_dir(cfg: RunConfig, args):
    if args.command == "report":
        return Path(args.out)
    section, name = OUT_KEYS[args.command].split(".")
    target = getattr(getattr(cfg, section), name)
    if not target:
        return None
    # file outputs log next to themselves
    return Path(target).parent if args.command in ("train-stn", "evaluate") else Path(target)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler = None
    try:
        cfg = resolve_config(args)
        seed_everything(cfg.seed)
        run_dir = _run_dir(cfg, args)
        if run_dir is not None:
            handler = _attach_run_log(run_dir)
        COMMANDS[args.command](cfg, args)
    except DepixError as e:
        log.error("%s", e)
        return e.exit_code
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
    return 0


if __name__ == "__main__":
    sys.exit(main())
