"""Overfit the de-pixelization network to one synthetic clip.

A sanity run of the full chain on a single talking-head clip: pixelate to
16x16, align with a freshly trained STN, train the generator without the
adversarial term, then write predictions and a contact sheet comparing
input, ground truth, the bicubic upsample and the network output.

    python demos/overfit_clip.py --steps 300 --out demo_overfit
"""
import argparse
import logging
from pathlib import Path

import torch

from depix.alignment import StnHyper, train_stn
from depix.depix_train import ClipData, DepixHyper, evaluate_set, stack_clips, train_depix
from depix.imaging import BICUBIC, box_downsample, pixelate, resample, save_png
from depix.nets import DepixNetConfig
from depix.pipeline import make_report, predict_clip
from depix.stacker import SupportWindowSpec
from depix.synthetic import head_clip


def write_frames(frames, d):
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(f, d / f"{i:05d}.png")
    return d


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--base-channels", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("demo_overfit"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    hr = torch.from_numpy(head_clip(50, 256, seed=args.seed))
    pix = pixelate(hr, 16, 128)
    clip = ClipData("demo", box_downsample(pix, 16), pix, resample(hr, 128, 128, BICUBIC))

    aligner, _ = train_stn({clip.clip_id: clip.lr}, hyper=StnHyper(steps=300, eval_every=100))
    spec = SupportWindowSpec(2, 5)
    hyper = DepixHyper(steps=args.steps, lambda_adv=0.0, extractor_width=0.125, seed=args.seed)
    trainer = train_depix([clip], aligner, spec, DepixNetConfig(input_channels=15, base_channels=args.base_channels),
                          hyper=hyper, out_dir=args.out / "model")
    print("train-set metrics:", evaluate_set(trainer, stack_clips([clip], spec, aligner)))

    pred = predict_clip(trainer.gen, aligner, clip, spec)
    bicubic = resample(clip.lr, 128, 128, BICUBIC).clamp(0, 1)
    dirs = {name: write_frames(x, args.out / name)
            for name, x in (("pix", clip.pixelated), ("gt", clip.gt), ("bicubic", bicubic), ("ours", pred))}
    sheets = make_report([("bicubic", dirs["bicubic"]), ("ours", dirs["ours"])], dirs["gt"], dirs["pix"],
                         args.out / "report", frames_per_sheet=6)
    print(f"contact sheets: {', '.join(str(p) for p in sheets)}")


if __name__ == "__main__":
    main()
