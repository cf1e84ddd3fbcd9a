"""Run configuration, clip inference, ablations and contact-sheet reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .alignment import Aligner, IdentityAligner, StnHyper, train_stn
from .depix_train import ClipData, DepixHyper, train_depix, vggface_extractor
from .errors import ConfigError, ContractError, DataError, DepixError
from .imaging import load_png, quantize, save_png
from .metrics import Scope, aggregate, frame_metrics
from .nets import DepixNet, DepixNetConfig, DiscriminatorConfig, StnNetConfig, load_checkpoint
from .stacker import SupportWindowSpec, build_stacks

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class PathsSection:
    source: Optional[str] = None
    data_root: Optional[str] = None
    stn_ckpt: Optional[str] = None
    depix_dir: Optional[str] = None
    infer_dir: Optional[str] = None
    eval_out: Optional[str] = None
    ablate_dir: Optional[str] = None


@dataclass
class DataSection:
    lr_size: int = 16
    hr_size: int = 128
    test_fraction: float = 0.1
    crop_resolution: int = 256
    synthetic_clips: int = 0
    synthetic_frames: int = 50


@dataclass
class StnNetSection:
    base_channels: int = 32
    grid_resolution: int = 8


@dataclass
class StnTrainSection:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    lambda_recon: float = 1.0
    lambda_id: float = 0.1
    # None -> w * d
    max_gap: Optional[int] = None
    eval_every: int = 100
    val_pairs: int = 64
    patience: int = 5


@dataclass
class GenSection:
    depth: int = 5
    base_channels: int = 64
    max_channels: int = 512


@dataclass
class DepixTrainSection:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    lambda_r: float = 1.0
    lambda_p: float = 0.05
    lambda_adv: float = 0.01
    vgg19_weights: Optional[str] = None
    vggface_weights: Optional[str] = None
    extractor_width: float = 1.0
    log_every: int = 10


@dataclass
class RunConfig:
    """Every hyperparameter of every stage; serialized into each run directory."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    use_stn: bool = True
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    window: dict = field(default_factory=lambda: {"w": 2, "d": 5})
    stn_net: StnNetSection = field(default_factory=StnNetSection)
    stn_train: StnTrainSection = field(default_factory=StnTrainSection)
    gen: GenSection = field(default_factory=GenSection)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    depix_train: DepixTrainSection = field(default_factory=DepixTrainSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        cfg = cls()
        for key, value in d.items():
            cfg = cfg.set(key, value) if not isinstance(value, dict) else cfg._set_section(key, value)
        cfg.validate()
        return cfg

    def _set_section(self, name, values: dict) -> "RunConfig":
        cfg = self
        for k, v in values.items():
            cfg = cfg.set(f"{name}.{k}", v)
        return cfg

    def set(self, dotted: str, value) -> "RunConfig":
        """Return a copy with one declared key replaced; unknown keys are a config error."""
        head, _, rest = dotted.partition(".")
        names = {f.name for f in fields(self)}
        if head not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(self, head)
        if not rest:
            if dataclasses.is_dataclass(current):
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {head!r} must be a mapping")
                return self._set_section(head, value)
            return replace(self, **{head: value})
        if isinstance(current, dict):
            if rest not in current:
                raise ConfigError(f"unknown config key {dotted!r}")
            return replace(self, **{head: {**current, rest: value}})
        sub = {f.name for f in fields(current)}
        if rest not in sub:
            raise ConfigError(f"unknown config key {dotted!r}")
        if rest == "betas":
            value = tuple(value)
        return replace(self, **{head: replace(current, **{rest: value})})

    def with_overrides(self, overrides: dict) -> "RunConfig":
        cfg = self
        for k, v in overrides.items():
            cfg = cfg.set(k, v)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.window_spec()
            self.stn_config()
            self.gen_config()
        except (ContractError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if self.data.hr_size % self.data.lr_size:
            raise ConfigError("hr_size must be divisible by lr_size")
        for key in ("stn_train.lambda_recon", "stn_train.lambda_id", "depix_train.lambda_r",
                    "depix_train.lambda_p", "depix_train.lambda_adv"):
            section, name = key.split(".")
            v = getattr(getattr(self, section), name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{key} must be a finite non-negative number, got {v!r}")
        for key in ("stn_train.steps", "stn_train.batch_size", "depix_train.steps", "depix_train.batch_size"):
            section, name = key.split(".")
            v = getattr(getattr(self, section), name)
            if not (isinstance(v, int) and v > 0):
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if not 0 < self.data.test_fraction < 1:
            raise ConfigError("data.test_fraction must lie strictly between 0 and 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def window_spec(self) -> SupportWindowSpec:
        return SupportWindowSpec(int(self.window["w"]), int(self.window["d"]))

    def stn_config(self) -> StnNetConfig:
        return StnNetConfig(input_resolution=self.data.lr_size, grid_resolution=self.stn_net.grid_resolution,
                            base_channels=self.stn_net.base_channels)

    def stn_hyper(self, log_path=None) -> StnHyper:
        s = self.stn_train
        spec = self.window_spec()
        return StnHyper(steps=s.steps, batch_size=s.batch_size, lr=s.lr, lambda_recon=s.lambda_recon,
                        lambda_id=s.lambda_id, max_gap=s.max_gap or spec.max_gap, seed=self.seed,
                        eval_every=s.eval_every, val_pairs=s.val_pairs, patience=s.patience,
                        log_path=str(log_path) if log_path else None)

    def gen_config(self) -> DepixNetConfig:
        return DepixNetConfig(input_resolution=self.data.hr_size, input_channels=3 * self.window_spec().F,
                              depth=self.gen.depth, base_channels=self.gen.base_channels,
                              max_channels=self.gen.max_channels)

    def depix_hyper(self) -> DepixHyper:
        return DepixHyper(seed=self.seed, **asdict(self.depix_train))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        return RunConfig.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None


def write_provenance(run_dir, config: RunConfig, **extra) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps({"config": config.to_dict(), **extra}, indent=2, sort_keys=True, default=str))
    return path


def id_extractor(config: RunConfig):
    """Identity-similarity extractor: VGG-Face weights if configured, otherwise the random stand-in."""
    h = config.depix_train
    return vggface_extractor(h.vggface_weights, h.extractor_width)


def _check_generator(gen: DepixNet, spec: SupportWindowSpec):
    if gen.config.input_channels != 3 * spec.F:
        raise ConfigError(f"generator expects {gen.config.input_channels // 3} frames, window gives {spec.F}")


@torch.no_grad()
def predict_clip(gen: DepixNet, aligner, clip: ClipData, spec: SupportWindowSpec,
                 batch_size: int = 8) -> torch.Tensor:
    """HR prediction for every frame of ``clip`` by sliding the support window."""
    _check_generator(gen, spec)
    gen.eval()
    hr = gen.config.input_resolution
    outs = []
    n = len(clip.lr)
    for s in range(0, n, batch_size):
        centers = list(range(s, min(s + batch_size, n)))
        outs.append(gen(build_stacks(clip.lr, centers, spec, aligner, hr)))
    return torch.cat(outs)


def infer_clip(gen, aligner, clip: ClipData, spec: SupportWindowSpec, out_dir) -> list:
    """Write one predicted PNG per input frame to ``out_dir``."""
    if isinstance(gen, (str, Path)):
        gen = load_checkpoint(gen, kind="depix")
    if isinstance(aligner, (str, Path)):
        aligner = Aligner.load(aligner)
    if aligner.input_resolution != clip.lr.shape[-1]:
        raise ConfigError(f"aligner trained at {aligner.input_resolution}px, clip is {clip.lr.shape[-1]}px")
    pred = predict_clip(gen, aligner, clip, spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, p in enumerate(pred):
        path = out_dir / f"{i:05d}.png"
        save_png(p, path)
        paths.append(path)
    return paths


def _png_names(d) -> list:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    return sorted(p.name for p in d.iterdir() if p.suffix.lower() == ".png")


def evaluate_dirs(pred_dir, gt_dir, extractor=None) -> tuple:
    """Per-frame records and the dataset summary for index-aligned PNG directories."""
    names = _png_names(pred_dir)
    if names != _png_names(gt_dir):
        raise DataError(f"{pred_dir} and {gt_dir} hold different frame sets")
    if not names:
        raise DataError(f"{pred_dir} holds no frames")
    recs = [frame_metrics(load_png(Path(pred_dir) / n), load_png(Path(gt_dir) / n), extractor, n)
            for n in names]
    return recs, aggregate(recs, Scope.DATASET)


@dataclass
class AblationVariant:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class AblationPlan:
    variants: list = field(default_factory=list)
    # half-window sizes of the stack-size sweep
    f_sweep: list = field(default_factory=list)

    def __post_init__(self):
        self.variants = [v if isinstance(v, AblationVariant) else AblationVariant(**v) for v in self.variants]
        names = [v.name for v in self.variants] + [f"F={2 * w + 1}" for w in self.f_sweep]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate ablation variant names in {names}")

    @classmethod
    def default(cls) -> "AblationPlan":
        return cls([AblationVariant("full"),
                    AblationVariant("w/o STN", {"use_stn": False}),
                    AblationVariant("w/o disc.", {"depix_train.lambda_adv": 0.0})],
                   f_sweep=[0, 2, 4, 7])

    @classmethod
    def from_dict(cls, d: dict) -> "AblationPlan":
        return cls(variants=d.get("variants", []), f_sweep=d.get("f_sweep", []))

    def expanded(self) -> list:
        rows = list(self.variants)
        for w in sorted(self.f_sweep):
            rows.append(AblationVariant(f"F={2 * w + 1}", {"window.w": w}))
        return rows


TABLE_COLUMNS = ("version", "PSNR", "SSIM", "ID")


def _aligner_for(cfg: RunConfig, train_clips, cache: dict, out_dir: Path):
    if not cfg.use_stn:
        return IdentityAligner(cfg.data.lr_size, cfg.stn_net.grid_resolution)
    key = json.dumps({"net": asdict(cfg.stn_config()), "hyper": asdict(cfg.stn_hyper())}, sort_keys=True)
    if key not in cache:
        clips = {c.clip_id: c.lr for c in train_clips}
        cache[key], _ = train_stn(clips, cfg.stn_config(), cfg.stn_hyper(),
                                  out=out_dir / f"stn_{len(cache)}.pt")
    return cache[key]


def run_ablation(plan: AblationPlan, base: RunConfig, train_clips: Sequence[ClipData],
                 test_clips: Sequence[ClipData], out_dir, extractor=None) -> dict:
    """Train and evaluate each variant; returns the table rows and the ``(F, id_sim)`` series.

    A failing variant is recorded with ``status: failed`` and does not stop
    the remaining ones. Results are written as JSON and CSV to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_provenance(out_dir, base, plan=asdict(plan))
    extractor = extractor if extractor is not None else id_extractor(base)
    stn_cache = {}
    rows, series = [], []
    for variant in plan.expanded():
        row = {"version": variant.name, "overrides": variant.overrides}
        try:
            cfg = base.with_overrides(variant.overrides)
            spec = cfg.window_spec()
            aligner = _aligner_for(cfg, train_clips, stn_cache, out_dir)
            safe = "".join(ch if ch.isalnum() else "_" for ch in variant.name)
            trainer = train_depix(train_clips, aligner, spec, cfg.gen_config(), cfg.disc, cfg.depix_hyper(),
                                  out_dir=out_dir / f"variant_{safe}")
            recs = []
            for clip in test_clips:
                pred = predict_clip(trainer.gen, aligner, clip, spec)
                recs += [frame_metrics(p, g, extractor) for p, g in zip(pred, clip.gt)]
            agg = aggregate(recs, Scope.DATASET, variant.name)
            values = (agg.psnr, agg.ssim, agg.id_sim)
            if not all(math.isfinite(v) for v in values):
                raise DepixError(f"non-finite metrics {values}")
            row.update({"PSNR": agg.psnr, "SSIM": agg.ssim, "ID": agg.id_sim, "F": spec.F,
                        "count": agg.count, "status": "ok"})
            if variant.name.startswith("F=") and "window.w" in variant.overrides:
                series.append({"F": spec.F, "id_sim": agg.id_sim})
        except Exception as e:  # noqa: BLE001 - one failed arm must not abort the study
            log.exception("ablation variant %s failed", variant.name)
            row.update({"status": "failed", "error": f"{type(e).__name__}: {e}"})
        rows.append(row)
    series.sort(key=lambda r: r["F"])
    result = {"columns": list(TABLE_COLUMNS), "rows": rows, "f_series": series}
    (out_dir / "ablation.json").write_text(json.dumps(result, indent=2, default=str))
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE_COLUMNS + ("status",))
        for r in rows:
            w.writerow([r["version"], r.get("PSNR", ""), r.get("SSIM", ""), r.get("ID", ""), r["status"]])
    with open(out_dir / "f_sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("F", "id_sim"))
        for r in series:
            w.writerow((r["F"], r["id_sim"]))
    return result


def sheet_size(n_frames: int, n_rows: int, tile: int, pad: int = 2) -> tuple:
    """``(width, height)`` of a contact sheet with ``n_frames`` columns."""
    return n_frames * tile + (n_frames + 1) * pad, n_rows * tile + (n_rows + 1) * pad


def make_report(pred_dirs: Sequence, gt_dir, pixelated_dir, out_dir, frames_per_sheet: int = 6,
                pad: int = 2) -> list:
    """Contact sheets: rows are input, GT, then each prediction directory in order; columns are frames.

    ``pred_dirs`` holds directories or ``(name, directory)`` pairs.
    """
    pred_dirs = [p if isinstance(p, (tuple, list)) else (Path(p).name, p) for p in pred_dirs]
    sources = [("input", pixelated_dir), ("GT", gt_dir)] + list(pred_dirs)
    names = _png_names(gt_dir)
    for label, d in sources:
        if _png_names(d) != names:
            raise DataError(f"{label} directory {d} is not index-aligned with {gt_dir}")
    if not names:
        raise DataError(f"{gt_dir} holds no frames")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tile = load_png(Path(gt_dir) / names[0]).shape[-1]
    paths = []
    for s in range(0, len(names), frames_per_sheet):
        chunk = names[s:s + frames_per_sheet]
        w, h = sheet_size(len(chunk), len(sources), tile, pad)
        canvas = np.full((h, w, 3), 255, dtype=np.uint8)
        for r, (_, d) in enumerate(sources):
            for c, n in enumerate(chunk):
                img = quantize(load_png(Path(d) / n))
                if img.shape[:2] != (tile, tile):
                    raise DataError(f"{Path(d) / n} is not {tile}x{tile}")
                y, x = pad + r * (tile + pad), pad + c * (tile + pad)
                canvas[y:y + tile, x:x + tile] = img
        path = out_dir / f"sheet_{s // frames_per_sheet:03d}.png"
        Image.fromarray(canvas).save(path)
        paths.append(path)
    (out_dir / "rows.json").write_text(json.dumps([label for label, _ in sources]))
    return paths
