"""Training the alignment STN on same-clip frame pairs."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import ContractError, DataError, NumericError
from .imaging import identity_coords, warp_with_grid
from .nets import StnNet, StnNetConfig, load_checkpoint, save_checkpoint, state_checksum

log = logging.getLogger(__name__)


@dataclass
class StnLossReport:
    recon: float
    identity_reg: float
    total: float
    weights: tuple = (1.0, 0.1)


def stn_reconstruction_loss(frame_a: torch.Tensor, frame_b: torch.Tensor,
                            grid: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between ``frame_a`` and ``frame_b`` warped by ``grid``.

    ``grid`` may be coarser than the frames; it is bilinearly upsampled first.
    """
    if frame_a.shape != frame_b.shape:
        raise ContractError(f"frame shapes differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}")
    return (frame_a - warp_with_grid(frame_b, grid)).abs().mean()


def stn_identity_loss(grid: torch.Tensor) -> torch.Tensor:
    """Mean absolute coordinate deviation from the identity grid."""
    ident = identity_coords(grid.shape[-2], dtype=grid.dtype, device=grid.device)
    return (grid - ident).abs().mean()


def stn_losses(frame_a, frame_b, grid, lambda_recon: float = 1.0, lambda_id: float = 0.1):
    recon = stn_reconstruction_loss(frame_a, frame_b, grid)
    reg = stn_identity_loss(grid)
    total = lambda_recon * recon + lambda_id * reg
    report = StnLossReport(recon.item(), reg.item(), total.item(), (lambda_recon, lambda_id))
    return total, report


class PairSampler:
    """Draws ``(clip_id, index_a, index_b)`` with ``1 <= |a - b| <= max_gap`` inside one clip."""

    def __init__(self, clip_lengths: Mapping[str, int], max_gap: int, seed: int = 0):
        if max_gap < 1:
            raise ContractError("max_gap must be >= 1")
        self.clips = [(cid, n) for cid, n in sorted(clip_lengths.items()) if n >= 2]
        if not self.clips:
            raise DataError("no clip has at least two frames to pair")
        self.max_gap = max_gap
        self.rng = np.random.default_rng(seed)
        lengths = np.array([n for _, n in self.clips], dtype=np.float64)
        self.p = lengths / lengths.sum()

    def sample(self, n: int) -> list:
        out = []
        while len(out) < n:
            cid, length = self.clips[self.rng.choice(len(self.clips), p=self.p)]
            a = int(self.rng.integers(length))
            gap = int(self.rng.integers(1, self.max_gap + 1)) * (1 if self.rng.random() < 0.5 else -1)
            b = a + gap
            if 0 <= b < length:
                out.append((cid, a, b))
        return out


def _gather(clips, pairs):
    a = torch.stack([clips[c][i] for c, i, _ in pairs])
    b = torch.stack([clips[c][j] for c, _, j in pairs])
    return a, b


@dataclass
class StnHyper:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    lambda_recon: float = 1.0
    lambda_id: float = 0.1
    max_gap: int = 10
    seed: int = 0
    eval_every: int = 100
    val_pairs: int = 64
    patience: int = 5
    log_path: Optional[str] = None


class Aligner:
    """Frozen STN used to predict ``g_{B->A}`` at inference time."""

    def __init__(self, net: StnNet):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.input_resolution = net.config.input_resolution
        self.checksum = state_checksum(net)

    @torch.no_grad()
    def __call__(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        return self.net(frame_a, frame_b)

    @classmethod
    def load(cls, path) -> "Aligner":
        return cls(load_checkpoint(path, kind="stn"))


class IdentityAligner:
    """Predicts no motion; builds the unaligned stacks of the "w/o STN" arm."""

    checksum = "identity"

    def __init__(self, input_resolution: int, grid_resolution: int = 8):
        self.input_resolution = input_resolution
        self.grid_resolution = grid_resolution

    def __call__(self, frame_a, frame_b):
        g = identity_coords(self.grid_resolution, dtype=frame_a.dtype)
        return g.expand(frame_a.shape[0], -1, -1, -1).clone()


@torch.no_grad()
def alignment_errors(aligner, clips: Mapping[str, torch.Tensor], pairs) -> tuple:
    """Mean post-warp L1 and mean identity-warp L1 over ``pairs``."""
    a, b = _gather(clips, pairs)
    grid = aligner(a, b)
    warped = (a - warp_with_grid(b, grid)).abs().mean().item()
    plain = (a - b).abs().mean().item()
    return warped, plain


def train_stn(clips: Mapping[str, torch.Tensor], config: StnNetConfig = StnNetConfig(),
              hyper: StnHyper = StnHyper(), val_clips: Mapping[str, torch.Tensor] = None,
              out: Optional[Path] = None):
    """Fit an STN on LR frames.

    ``clips`` maps clip ids to ``(T, 3, r, r)`` tensors at the STN input
    resolution. Validation pairs come from ``val_clips`` when given,
    otherwise from a fixed sample of the training clips. Returns the frozen
    best-on-validation :class:`Aligner` and the list of log records.
    """
    if not clips:
        raise DataError("empty manifest: no clips to train the STN on")
    r = config.input_resolution
    for cid, frames in clips.items():
        if frames.shape[-2:] != (r, r):
            raise ContractError(f"clip {cid} frames are {tuple(frames.shape[-2:])}, STN expects {r}x{r}")
    torch.manual_seed(hyper.seed)
    net = StnNet(config)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    sampler = PairSampler({c: len(f) for c, f in clips.items()}, hyper.max_gap, hyper.seed)
    val_source = val_clips if val_clips else clips
    val_sampler = PairSampler({c: len(f) for c, f in val_source.items()}, hyper.max_gap, hyper.seed + 1)
    val = val_sampler.sample(hyper.val_pairs)
    log_file = open(hyper.log_path, "a") if hyper.log_path else None

    history = []
    best = (float("inf"), copy.deepcopy(net.state_dict()), 0)
    stale = 0
    try:
        for step in range(1, hyper.steps + 1):
            net.train()
            a, b = _gather(clips, sampler.sample(hyper.batch_size))
            grid = net(a, b)
            total, rep = stn_losses(a, b, grid, hyper.lambda_recon, hyper.lambda_id)
            if not torch.isfinite(total):
                raise NumericError(f"STN loss became {total.item()} at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            rec = {"step": step, "recon": rep.recon, "identity_reg": rep.identity_reg, "total": rep.total}
            if step % hyper.eval_every == 0 or step == hyper.steps:
                net.eval()
                with torch.no_grad():
                    va, vb = _gather(val_source, val)
                    vloss, _ = stn_losses(va, vb, net(va, vb), hyper.lambda_recon, hyper.lambda_id)
                rec["val_total"] = float(vloss)
                if rec["val_total"] < best[0]:
                    best = (rec["val_total"], copy.deepcopy(net.state_dict()), step)
                    stale = 0
                else:
                    stale += 1
                log.info("stn step %d total %.5f val %.5f", step, rep.total, rec["val_total"])
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if stale >= hyper.patience:
                log.info("early stop at step %d (best step %d)", step, best[2])
                break
    finally:
        if log_file:
            log_file.close()
    net.load_state_dict(best[1])
    if out is not None:
        save_checkpoint(net, out, best_step=best[2], best_val=best[0], hyper=asdict(hyper))
    return Aligner(net), history
