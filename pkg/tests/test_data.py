import json

import numpy as np
import pytest
import torch
from PIL import Image

from depix import data as D
from depix.errors import ConfigError, DataError
from depix.imaging import load_png, png_bytes
from depix.synthetic import head_clip


def write_frames(d, frames):
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        (d / f"{i:05d}.png").write_bytes(png_bytes(torch.from_numpy(f)))
    return d


@pytest.fixture(scope="module")
def clip_frames():
    return head_clip(50, 256, seed=1)


def test_ingest_fifty_pngs(tmp_path, clip_frames):
    src = write_frames(tmp_path / "src" / "clipA", clip_frames)
    m = D.ingest(src, D.CropSpec(), tmp_path / "root")
    assert m.frame_count == 50 and m.clip_id == "clipA"
    assert len(list((tmp_path / "root" / "clipA" / "hr").iterdir())) == 50


def test_synthetic_clip_roundtrips_losslessly(tmp_path, clip_frames):
    src = write_frames(tmp_path / "src" / "c", clip_frames[:5])
    D.ingest(src, D.CropSpec(), tmp_path / "root")
    for i in range(5):
        a = np.asarray(Image.open(src / f"{i:05d}.png"))
        b = np.asarray(Image.open(tmp_path / "root" / "c" / "hr" / f"{i:05d}.png"))
        assert np.array_equal(a, b)


def test_ingest_resizes_to_crop_resolution(tmp_path, clip_frames):
    src = write_frames(tmp_path / "src" / "c", head_clip(2, 96, seed=2))
    D.ingest(src, D.CropSpec(), tmp_path / "root")
    assert load_png(tmp_path / "root" / "c" / "hr" / "00000.png").shape == (3, 256, 256)


def test_empty_directory_leaves_nothing(tmp_path):
    (tmp_path / "src" / "empty").mkdir(parents=True)
    root = tmp_path / "root"
    with pytest.raises(DataError):
        D.ingest(tmp_path / "src" / "empty", D.CropSpec(), root)
    assert not (root / "empty").exists()
    assert not any(root.iterdir())


def test_external_detector_is_a_plugin(tmp_path, clip_frames):
    src = write_frames(tmp_path / "src" / "c", clip_frames[:2])
    with pytest.raises(ConfigError):
        D.ingest(src, D.CropSpec(source="external-detector"), tmp_path / "r1")
    crop = D.CropSpec(source="external-detector", detector=lambda f: (32, 32, 224, 224))
    m = D.ingest(src, crop, tmp_path / "r2")
    assert m.frame_count == 2


def test_video_ingestion(tmp_path, clip_frames):
    import cv2

    path = tmp_path / "clip.avi"
    vw = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 25, (256, 256))
    for f in clip_frames[:6]:
        vw.write((f.transpose(1, 2, 0)[:, :, ::-1] * 255).astype(np.uint8))
    vw.release()
    m = D.ingest(path, D.CropSpec(), tmp_path / "root")
    assert m.frame_count == 6 and m.clip_id == "clip"


@pytest.mark.parametrize("lr,block", [(16, 8), (8, 16)])
def test_pixelated_frames_have_constant_blocks(tmp_path, clip_frames, lr, block):
    src = write_frames(tmp_path / "src" / "c", clip_frames[:3])
    m = D.generate_pixelated(D.ingest(src, D.CropSpec(), tmp_path), tmp_path, lr, 128)
    assert m.pix_dir == f"c/pix{lr}" and m.gt_dir == "c/gt128"
    for p in m.paths(tmp_path, "pix"):
        a = np.asarray(Image.open(p)).reshape(lr, block, lr, block, 3)
        assert (a == a[:, :1, :, :1]).all()
    assert load_png(m.paths(tmp_path, "gt")[0]).shape == (3, 128, 128)


def test_pixelation_is_idempotent_on_disk(tmp_path, clip_frames):
    src = write_frames(tmp_path / "src" / "c", clip_frames[:3])
    m = D.generate_pixelated(D.ingest(src, D.CropSpec(), tmp_path), tmp_path, 16, 128)
    before = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in m.paths(tmp_path, "pix")}
    D.generate_pixelated(m, tmp_path, 16, 128)
    for p, (data, mtime) in before.items():
        assert p.read_bytes() == data and p.stat().st_mtime_ns == mtime


def test_pixelation_rejects_incompatible_sizes(tmp_path):
    with pytest.raises(ConfigError):
        D.generate_pixelated(D.ClipManifest("c", 1, "c/hr"), tmp_path, 12, 128)


def _manifests(n):
    return [D.ClipManifest(f"clip{k:02d}", 10, f"clip{k:02d}/hr") for k in range(n)]


def test_split_ten_clips():
    train, test = D.split_dataset(_manifests(10), 0.1, seed=0)
    assert len(train) == 9 and len(test) == 1
    assert {m.split for m in train} == {"train"} and test[0].split == "test"


def test_split_half_of_four_is_disjoint():
    train, test = D.split_dataset(_manifests(4), 0.5, seed=3)
    a, b = {m.clip_id for m in train}, {m.clip_id for m in test}
    assert len(a) == len(b) == 2 and not a & b and a | b == {m.clip_id for m in _manifests(4)}


def test_split_is_seeded_and_order_independent():
    ms = _manifests(20)
    s1 = D.split_dataset(ms, 0.25, seed=5)
    s2 = D.split_dataset(list(reversed(ms)), 0.25, seed=5)
    assert s1 == s2
    assert D.split_dataset(ms, 0.25, seed=6) != s1


def test_split_validation():
    with pytest.raises(ConfigError):
        D.split_dataset(_manifests(4), 1.0)
    with pytest.raises(DataError):
        D.split_dataset(_manifests(1), 0.5)


def test_manifest_roundtrip_and_integrity(tmp_path, clip_frames):
    src_root = tmp_path / "src"
    for k in range(3):
        write_frames(src_root / f"c{k}", clip_frames[k:k + 2])
    root = tmp_path / "root"
    ms = D.prepare_dataset(D.clip_sources(src_root), root, 16, 128, 0.34, seed=1)
    assert D.read_manifests(root) == sorted(ms, key=lambda m: m.clip_id)
    lines = (root / D.MANIFEST_NAME).read_text().splitlines()
    assert all(json.loads(line)["hr_dir"].startswith(json.loads(line)["clip_id"]) for line in lines)
    assert D.check_integrity(root) == []
    (root / "c0" / "pix16" / "00001.png").unlink()
    (root / "c1" / "gt128" / "stray.png").write_bytes(b"")
    problems = D.check_integrity(root)
    assert any("missing" in p and "00001.png" in p for p in problems)
    assert any("unlisted" in p and "stray.png" in p for p in problems)


def test_prepare_is_deterministic(tmp_path, clip_frames):
    for k in range(4):
        write_frames(tmp_path / "src" / f"c{k}", clip_frames[k:k + 2])
    srcs = D.clip_sources(tmp_path / "src")
    D.prepare_dataset(srcs, tmp_path / "a", seed=9, test_fraction=0.5)
    D.prepare_dataset(srcs, tmp_path / "b", seed=9, test_fraction=0.5, workers=3)
    assert (tmp_path / "a" / D.MANIFEST_NAME).read_bytes() == (tmp_path / "b" / D.MANIFEST_NAME).read_bytes()
    for p in (tmp_path / "a").rglob("*.png"):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_load_clip_recovers_lr_frames(tmp_path, clip_frames):
    write_frames(tmp_path / "src" / "c", clip_frames[:4])
    m, = D.prepare_dataset(D.clip_sources(tmp_path / "src"), tmp_path / "root")
    clip = D.load_clip(tmp_path / "root", m)
    assert clip.lr.shape == (4, 3, 16, 16) and clip.pixelated.shape == clip.gt.shape == (4, 3, 128, 128)
    # the LR frame is exactly one value per pixelation block
    assert torch.equal(clip.pixelated[:, :, ::8, ::8], clip.lr)


def test_missing_sources():
    with pytest.raises(DataError):
        D.clip_sources("/nonexistent/path")
    with pytest.raises(DataError):
        D.read_manifests("/nonexistent/path")
