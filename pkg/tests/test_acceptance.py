"""Acceptance suite: one test (or group) per criterion, tolerances as stated.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run. The two training
criteria (7 and 8) take a few minutes on CPU.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from oracles import brute_force_ssim, l1_after_warp_gradients

from depix import cli
from depix import data as D
from depix.alignment import PairSampler, StnHyper, alignment_errors, train_stn
from depix.depix_train import (ClipData, DepixHyper, DepixTrainer, adversarial_losses, evaluate_set, stack_clips,
                               train_depix, vggface_extractor)
from depix.imaging import (BICUBIC, box_downsample, identity_coords, pixel_centers, pixelate, png_bytes, resample,
                           upsample_grid, warp)
from depix.metrics import identity_similarity, psnr, ssim
from depix.nets import DepixNet, DepixNetConfig, DiscriminatorConfig, PatchDiscriminator
from depix.stacker import SupportWindowSpec, build_stack, window_indices
from depix.alignment import IdentityAligner
from depix.synthetic import head_clip, translated_clip

criterion = pytest.mark.criterion


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.fixture(scope="module")
def overfit_clip():
    hr = torch.from_numpy(head_clip(50, 256, seed=0))
    pix = pixelate(hr, 16, 128)
    return ClipData("overfit", box_downsample(pix, 16), pix, resample(hr, 128, 128, BICUBIC))


# -- 1 -----------------------------------------------------------------------

@criterion(1, "warp with the identity grid reproduces the frame (8/16/128 px, <1e-6, <1 s)")
def test_warp_identity():
    start = time.perf_counter()
    worst = 0.0
    for n in (8, 16, 128):
        frames = rand(100, 3, n, n, seed=n)
        grid = identity_coords(n).expand(100, -1, -1, -1)
        worst = max(worst, (warp(frames, grid) - frames).abs().max().item())
    elapsed = time.perf_counter() - start
    assert worst < 1e-6
    assert elapsed < 1.0, f"{elapsed:.2f} s"


# -- 2 -----------------------------------------------------------------------

@criterion(2, "L1-after-warp gradients match central differences (20 seeds, rel err <1e-2, <10 s)")
def test_warp_gradients():
    start = time.perf_counter()
    errors = [l1_after_warp_gradients(seed) for seed in range(20)]
    elapsed = time.perf_counter() - start
    worst = max(max(e) for e in errors)
    assert worst < 1e-2, f"max relative error {worst:.3g}"
    assert elapsed < 10.0, f"{elapsed:.2f} s"


# -- 3 -----------------------------------------------------------------------

@criterion(3, "grid upsampling 8->128 exact on identity/affine fields; same size is bit-identical")
def test_grid_upsampling():
    ident = upsample_grid(identity_coords(8, torch.float64), 128)
    assert (ident - identity_coords(128, torch.float64)).abs().max().item() < 1e-6

    a = np.array([[0.9, 0.15], [-0.1, 1.05]])
    b = np.array([0.03, -0.07])

    def affine(n):
        c = pixel_centers(n).double()
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        pts = torch.stack([xx, yy], dim=-1)
        return pts @ torch.as_tensor(a).T + torch.as_tensor(b)

    up = upsample_grid(affine(8), 128)
    assert (up - affine(128)).abs().max().item() < 1e-6

    g = identity_coords(8) + 0.1 * rand(8, 8, 2, seed=9)
    assert torch.equal(upsample_grid(g, 8), g)


# -- 4 -----------------------------------------------------------------------

@criterion(4, "pixelation is blockwise constant (16->8x8, 8->16x16), bit-exact, idempotent")
@pytest.mark.parametrize("lr,block", [(16, 8), (8, 16)])
def test_pixelation(lr, block):
    x = rand(4, 3, 128, 128, seed=lr)
    pix = pixelate(x, lr, 128)
    blocks = pix.reshape(4, 3, lr, block, lr, block)
    assert torch.equal(blocks, blocks[:, :, :, :1, :, :1].expand_as(blocks))
    assert torch.equal(pixelate(pix, lr, 128), pix)


# -- 5 -----------------------------------------------------------------------

@criterion(5, "PSNR closed form, SSIM self/oracle, identity similarity dot-product oracle")
def test_metric_oracles():
    gt = torch.full((3, 64, 64), 0.45, dtype=torch.float64)
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)

    x = rand(3, 32, 32, seed=1, dtype=torch.float64)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    for seed in range(20):
        a = rand(3, 24, 24, seed=100 + seed, dtype=torch.float64)
        b = (a + 0.3 * (rand(3, 24, 24, seed=200 + seed, dtype=torch.float64) - 0.5)).clamp(0, 1)
        assert abs(ssim(a, b) - brute_force_ssim(a.numpy(), b.numpy())) < 1e-6

    net = vggface_extractor(None, width=0.125)
    a, b = rand(3, 64, 64, seed=2), rand(3, 64, 64, seed=3)

    def deepest(img):
        h = img.unsqueeze(0)
        for i, layer in enumerate(net.layers):
            h = layer(h)
        return h.flatten().double().numpy()

    u, v = deepest(a), deepest(b)
    want = float(u @ v / (np.sqrt(u @ u) * np.sqrt(v @ v)))
    assert abs(identity_similarity(a, b, net) - want) < 1e-6


# -- 6 -----------------------------------------------------------------------

@criterion(6, "support window indices, 15-channel stack, F in {1,5,9,15} through the generator")
def test_stack_arithmetic():
    spec = SupportWindowSpec(2, 5)
    assert window_indices(50, spec, 100) == [40, 45, 50, 55, 60]
    frames = rand(100, 3, 16, 16, seed=4)
    s = build_stack(frames, 50, spec, IdentityAligner(16))
    assert s.channels.shape == (15, 128, 128) and s.source_indices == [40, 45, 50, 55, 60]

    torch.manual_seed(0)
    for w in (0, 2, 4, 7):
        spec = SupportWindowSpec(w, 5)
        stack = build_stack(frames, 50, spec, IdentityAligner(16)).channels
        gen = DepixNet(DepixNetConfig(input_channels=3 * spec.F)).eval()
        with torch.no_grad():
            out = gen(stack.unsqueeze(0))
        assert stack.shape[0] == 3 * spec.F
        assert out.shape == (1, 3, 128, 128) and torch.isfinite(out).all()


# -- 7 -----------------------------------------------------------------------

def _translated_lr(seed):
    return box_downsample(torch.from_numpy(translated_clip(24, 64, seed=seed, quantum=4)), 16)


@criterion(7, "STN post-warp L1 <= 0.3 x identity baseline on held-out pairs (<=2000 steps, <15 min)")
@pytest.mark.slow
def test_stn_learns_translations():
    train = {f"train{s}": _translated_lr(s) for s in range(16)}
    val = {f"val{s}": _translated_lr(100 + s) for s in range(4)}
    test = {f"test{s}": _translated_lr(200 + s) for s in range(6)}
    start = time.perf_counter()
    aligner, history = train_stn(train, hyper=StnHyper(steps=2000, eval_every=100, patience=50), val_clips=val)
    elapsed = time.perf_counter() - start
    pairs = PairSampler({k: len(v) for k, v in test.items()}, 10, seed=7).sample(256)
    warped, plain = alignment_errors(aligner, test, pairs)
    print(f"\nSTN: post-warp L1 {warped:.4f}, identity L1 {plain:.4f}, ratio {warped / plain:.3f}, "
          f"{len(history)} steps, {elapsed:.0f} s")
    assert len(history) <= 2000
    assert warped <= 0.3 * plain
    assert elapsed < 15 * 60


# -- 8 -----------------------------------------------------------------------

@criterion(8, "end-to-end overfit of one 50-frame clip: L1 < 0.05 and PSNR > 25 dB (<30 min)")
@pytest.mark.slow
def test_overfit_one_clip(overfit_clip, tmp_path):
    start = time.perf_counter()
    aligner, _ = train_stn({overfit_clip.clip_id: overfit_clip.lr}, hyper=StnHyper(steps=300, eval_every=100))
    spec = SupportWindowSpec(2, 5)
    hyper = DepixHyper(steps=300, lambda_adv=0.0, extractor_width=0.125, log_every=50)
    trainer = train_depix([overfit_clip], aligner, spec, DepixNetConfig(input_channels=15, base_channels=16),
                          hyper=hyper, out_dir=tmp_path)
    result = evaluate_set(trainer, stack_clips([overfit_clip], spec, aligner))
    elapsed = time.perf_counter() - start
    print(f"\noverfit: L1 {result['l1']:.4f}, PSNR {result['psnr']:.2f} dB, {elapsed:.0f} s")
    assert result["l1"] < 0.05
    assert result["psnr"] > 25.0
    assert elapsed < 30 * 60


# -- 9 -----------------------------------------------------------------------

@criterion(9, "ablate emits the {full, w/o STN, w/o disc.} table and an F in {1,5} series, no NaN")
def test_ablation_harness(overfit_clip, tmp_path):
    src = tmp_path / "src" / "overfit"
    src.mkdir(parents=True)
    for i, f in enumerate(head_clip(50, 256, seed=0)):
        (src / f"{i:05d}.png").write_bytes(png_bytes(torch.from_numpy(f)))
    root = tmp_path / "data"
    m = D.generate_pixelated(D.ingest(src, D.CropSpec(), root), root, 16, 128)
    D.write_manifests(root, [m])

    config = {
        "stn_net": {"base_channels": 8}, "stn_train": {"steps": 40, "eval_every": 20},
        "gen": {"base_channels": 16}, "disc": {"base_channels": 16},
        "depix_train": {"steps": 40, "batch_size": 8, "extractor_width": 0.0625},
    }
    plan = {"variants": [{"name": "full"},
                         {"name": "w/o STN", "overrides": {"use_stn": False}},
                         {"name": "w/o disc.", "overrides": {"depix_train.lambda_adv": 0.0}}],
            "f_sweep": [0, 2]}
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    out = tmp_path / "ablate"
    assert cli.main(["ablate", "--config", str(tmp_path / "cfg.json"), "--manifest", str(root),
                     "--plan", str(tmp_path / "plan.json"), "--out", str(out)]) == 0

    result = json.loads((out / "ablation.json").read_text())
    assert result["columns"] == ["version", "PSNR", "SSIM", "ID"]
    rows = {r["version"]: r for r in result["rows"]}
    table = [rows[name] for name in ("full", "w/o STN", "w/o disc.")]
    for row in table:
        assert row["status"] == "ok"
        assert all(math.isfinite(row[c]) for c in ("PSNR", "SSIM", "ID"))
    series = result["f_series"]
    assert [p["F"] for p in series] == [1, 5]
    assert all(math.isfinite(p["id_sim"]) for p in series)


# -- 10 ----------------------------------------------------------------------

@criterion(10, "zero-logit discriminator gives ln 2; D and G steps leave the other network bit-identical")
def test_gan_mechanics():
    disc = PatchDiscriminator(DiscriminatorConfig(base_channels=8)).double()
    last = disc.model[-1]
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    pix, pred, gt = (rand(2, 3, 128, 128, seed=s, dtype=torch.float64) for s in range(3))
    gen_loss, disc_loss = adversarial_losses(disc, pix, pred, gt)
    assert abs(gen_loss.item() - math.log(2)) < 1e-9
    assert abs(disc_loss.item() - math.log(2)) < 1e-9

    trainer = DepixTrainer(DepixNetConfig(input_channels=15, base_channels=8, max_channels=32),
                           DiscriminatorConfig(base_channels=8), DepixHyper(lambda_p=0.0, seed=0))
    stacks, pix, gt = rand(2, 15, 128, 128, seed=5), rand(2, 3, 128, 128, seed=6), rand(2, 3, 128, 128, seed=7)

    def snapshot(net):
        return [p.detach().clone() for p in net.parameters()]

    g0 = snapshot(trainer.gen)
    trainer.discriminator_step(stacks, pix, gt)
    assert all(torch.equal(a, b) for a, b in zip(g0, trainer.gen.parameters()))
    d0 = snapshot(trainer.disc)
    trainer.generator_step(stacks, pix, gt)
    assert all(torch.equal(a, b) for a, b in zip(d0, trainer.disc.parameters()))


# -- 11 ----------------------------------------------------------------------

def _pipeline_run(run_dir, monkeypatch):
    run_dir.mkdir()
    monkeypatch.chdir(run_dir)
    cfg = {
        "seed": 3,
        "paths": {"source": "synthetic", "data_root": "data", "stn_ckpt": "runs/stn.pt", "depix_dir": "runs/depix",
                  "infer_dir": "runs/infer"},
        "data": {"synthetic_clips": 4, "synthetic_frames": 6, "test_fraction": 0.5},
        "stn_net": {"base_channels": 8}, "stn_train": {"steps": 3, "eval_every": 1},
        "gen": {"base_channels": 8, "max_channels": 32}, "disc": {"base_channels": 8},
        "depix_train": {"steps": 3, "batch_size": 4, "extractor_width": 0.0625},
    }
    (run_dir / "cfg.json").write_text(json.dumps(cfg))
    for cmd in ("prepare-data", "train-stn", "train-depix", "infer"):
        assert cli.main([cmd, "--config", "cfg.json"]) == 0, cmd


def _png_bytes_under(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*.png"))}


@criterion(11, "same seed and config give bit-identical manifests, splits and inference outputs")
def test_determinism(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline_run(a, monkeypatch)
    _pipeline_run(b, monkeypatch)
    manifest = D.MANIFEST_NAME
    assert (a / "data" / manifest).read_bytes() == (b / "data" / manifest).read_bytes()
    splits = [{m.clip_id: m.split for m in D.read_manifests(d / "data")} for d in (a, b)]
    assert splits[0] == splits[1] and set(splits[0].values()) == {"train", "test"}
    data_a, data_b = _png_bytes_under(a / "data"), _png_bytes_under(b / "data")
    assert data_a.keys() == data_b.keys() and data_a == data_b
    out_a, out_b = _png_bytes_under(a / "runs" / "infer"), _png_bytes_under(b / "runs" / "infer")
    assert len(out_a) == 12 and out_a == out_b
