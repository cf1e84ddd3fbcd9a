"""Dataset preparation: frame ingestion, pixelation, manifests and splits.

On-disk layout under a dataset root::

    <root>/<clip_id>/hr/NNNNN.png        256x256 head crops
    <root>/<clip_id>/gt<hr>/NNNNN.png    ground truth at the working resolution
    <root>/<clip_id>/pix<lr>/NNNNN.png   pixelated input at the working resolution
    <root>/manifests.jsonl               one record per clip
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .depix_train import ClipData
from .errors import ConfigError, DataError
from .imaging import BICUBIC, box_downsample, load_png, pixelate, png_bytes, resample

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifests.jsonl"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv", ".webm"}


@dataclass
class CropSpec:
    crop_resolution: int = 256
    source: str = "precropped"
    # external-detector plug-in: HxWx3 uint8 frame -> (x0, y0, x1, y1) box
    detector: Optional[Callable] = None

    def __post_init__(self):
        if self.source not in ("precropped", "external-detector"):
            raise ConfigError(f"unknown crop source {self.source!r}")


@dataclass
class ClipManifest:
    clip_id: str
    frame_count: int
    hr_dir: str
    pix_dir: str = ""
    gt_dir: str = ""
    lr_size: int = 0
    hr_size: int = 0
    split: str = "train"

    def frame_name(self, i: int) -> str:
        return f"{i:05d}.png"

    def paths(self, root, which: str) -> list:
        d = Path(root) / getattr(self, f"{which}_dir")
        return [d / self.frame_name(i) for i in range(self.frame_count)]


def _read_source_frames(source: Path):
    """Yield HxWx3 uint8 frames from an image directory or a video file."""
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        from PIL import Image

        for p in files:
            try:
                with Image.open(p) as im:
                    yield np.asarray(im.convert("RGB"))
            except OSError as e:
                raise DataError(f"unreadable image {p}: {e}") from e
    elif source.suffix.lower() in VIDEO_SUFFIXES:
        import cv2

        cap = cv2.VideoCapture(str(source))
        if not cap.isOpened():
            raise DataError(f"unreadable video {source}")
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                yield bgr[:, :, ::-1].copy()
        finally:
            cap.release()
    else:
        raise DataError(f"unsupported source {source}")


def _crop(frame: np.ndarray, crop: CropSpec) -> torch.Tensor:
    if crop.source == "external-detector":
        if crop.detector is None:
            raise ConfigError("crop source is external-detector but no detector plug-in is configured")
        x0, y0, x1, y1 = (int(v) for v in crop.detector(frame))
        frame = frame[max(y0, 0):y1, max(x0, 0):x1]
        if frame.size == 0:
            raise DataError("detector returned an empty crop")
    x = torch.from_numpy(frame.astype(np.float32).transpose(2, 0, 1) / 255.0)
    r = crop.crop_resolution
    if x.shape[-2:] != (r, r):
        x = resample(x, r, r, BICUBIC)
    return x


def ingest(source, crop: CropSpec, out_root, clip_id: Optional[str] = None) -> ClipManifest:
    """Copy a clip's frames into ``<out_root>/<clip_id>/hr`` as square crops.

    Frames are staged in a temporary directory and moved into place only
    once every frame is written, so a failed ingestion leaves nothing behind.
    """
    source, out_root = Path(source), Path(out_root)
    if not source.exists():
        raise DataError(f"source {source} does not exist")
    clip_id = clip_id or source.stem
    final = out_root / clip_id / "hr"
    staging = out_root / f".{clip_id}.staging"
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir(parents=True)
    count = 0
    try:
        for i, frame in enumerate(_read_source_frames(source)):
            (staging / f"{i:05d}.png").write_bytes(png_bytes(_crop(frame, crop)))
            count += 1
        if count == 0:
            raise DataError(f"source {source} contains no frames")
        if final.exists():
            shutil.rmtree(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        os.replace(staging, final)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return ClipManifest(clip_id, count, f"{clip_id}/hr")


def _write_if_changed(path: Path, data: bytes) -> bool:
    if path.exists() and path.read_bytes() == data:
        return False
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return True


def generate_pixelated(manifest: ClipManifest, root, lr_size: int = 16, hr_size: int = 128) -> ClipManifest:
    """Write GT (bicubic 256 -> hr_size) and pixelated (box to lr_size, nearest to hr_size) frames."""
    if hr_size % lr_size:
        raise ConfigError(f"hr_size {hr_size} must be divisible by lr_size {lr_size}")
    root = Path(root)
    m = replace(manifest, pix_dir=f"{manifest.clip_id}/pix{lr_size}",
                gt_dir=f"{manifest.clip_id}/gt{hr_size}", lr_size=lr_size, hr_size=hr_size)
    (root / m.pix_dir).mkdir(parents=True, exist_ok=True)
    (root / m.gt_dir).mkdir(parents=True, exist_ok=True)
    for src, gt_path, pix_path in zip(m.paths(root, "hr"), m.paths(root, "gt"), m.paths(root, "pix")):
        if not src.exists():
            raise DataError(f"missing HR frame {src}")
        hr = load_png(src)
        _write_if_changed(gt_path, png_bytes(resample(hr, hr_size, hr_size, BICUBIC)))
        _write_if_changed(pix_path, png_bytes(pixelate(hr, lr_size, hr_size)))
    return m


def split_dataset(manifests: Sequence[ClipManifest], test_fraction: float = 0.1, seed: int = 0):
    """Clip-level random split; returns ``(train, test)`` lists with ``split`` set."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie strictly between 0 and 1")
    manifests = sorted(manifests, key=lambda m: m.clip_id)
    n = len(manifests)
    if n < 2:
        raise DataError("need at least two clips to split")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_ids = {manifests[i].clip_id for i in perm[:n_test]}
    train = [replace(m, split="train") for m in manifests if m.clip_id not in test_ids]
    test = [replace(m, split="test") for m in manifests if m.clip_id in test_ids]
    return train, test


def write_manifests(root, manifests: Iterable[ClipManifest]) -> Path:
    root = Path(root)
    path = root / MANIFEST_NAME
    lines = "".join(json.dumps(asdict(m), sort_keys=True) + "\n" for m in sorted(manifests, key=lambda m: m.clip_id))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(lines)
    os.replace(tmp, path)
    return path


def read_manifests(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(ClipManifest(**json.loads(line)))
    return out


def check_integrity(root, manifests: Optional[Sequence[ClipManifest]] = None) -> list:
    """Return a list of problems: missing listed files and unlisted managed files."""
    root = Path(root)
    manifests = read_manifests(root) if manifests is None else manifests
    problems = []
    for m in manifests:
        for which in ("hr", "gt", "pix"):
            if not getattr(m, f"{which}_dir"):
                continue
            listed = set(m.paths(root, which))
            for p in sorted(listed):
                if not p.exists():
                    problems.append(f"missing {p}")
            d = root / getattr(m, f"{which}_dir")
            if d.exists():
                for p in sorted(d.iterdir()):
                    if p not in listed:
                        problems.append(f"unlisted {p}")
    return problems


def load_clip(root, manifest: ClipManifest) -> ClipData:
    """Load pixelated/GT frames; LR frames are recovered by box-averaging the pixelated ones."""
    if not manifest.pix_dir:
        raise DataError(f"clip {manifest.clip_id} has no pixelated frames")
    pix = torch.stack([load_png(p) for p in manifest.paths(root, "pix")])
    gt = torch.stack([load_png(p) for p in manifest.paths(root, "gt")])
    return ClipData(manifest.clip_id, box_downsample(pix, manifest.lr_size), pix, gt)


def clip_sources(source) -> list:
    """Clip sources under a directory: image subdirectories and video files."""
    source = Path(source)
    if not source.is_dir():
        raise DataError(f"source {source} is not a directory")
    out = [p for p in sorted(source.iterdir())
           if p.is_dir() or p.suffix.lower() in VIDEO_SUFFIXES]
    if not out:
        raise DataError(f"no clips found under {source}")
    return out


def prepare_dataset(sources: Sequence[Path], out_root, lr_size: int = 16, hr_size: int = 128,
                    test_fraction: float = 0.1, seed: int = 0, crop: CropSpec = CropSpec(),
                    workers: int = 1) -> list:
    """Ingest, pixelate and split all clips, then write the manifest."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    def one(src):
        m = ingest(src, crop, out_root)
        return generate_pixelated(m, out_root, lr_size, hr_size)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        manifests = list(pool.map(one, sources))
    if len(manifests) >= 2:
        train, test = split_dataset(manifests, test_fraction, seed)
        manifests = train + test
    write_manifests(out_root, manifests)
    return manifests


def write_synthetic_sources(out_dir, n_clips: int = 4, n_frames: int = 50, size: int = 256,
                            seed: int = 0) -> list:
    """Render synthetic head clips as pre-cropped PNG directories."""
    from .synthetic import head_clip

    out_dir = Path(out_dir)
    dirs = []
    for k in range(n_clips):
        d = out_dir / f"synth{k:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(head_clip(n_frames, size, seed=seed * 1000 + k)):
            _write_if_changed(d / f"{i:05d}.png", png_bytes(torch.from_numpy(f)))
        dirs.append(d)
    return dirs
