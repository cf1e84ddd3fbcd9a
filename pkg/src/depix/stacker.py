"""Aligned, channel-concatenated support stacks around a center frame."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .errors import ContractError, DataError
from .imaging import BICUBIC, resample, upsample_grid, warp


@dataclass(frozen=True)
class SupportWindowSpec:
    """``2w + 1`` frames spaced ``d`` apart, centered on the current frame."""

    w: int = 2
    d: int = 5

    def __post_init__(self):
        if self.w < 0:
            raise ContractError("w must be >= 0")
        if self.d < 1:
            raise ContractError("d must be >= 1")

    @property
    def F(self) -> int:
        return 2 * self.w + 1

    @property
    def max_gap(self) -> int:
        return max(self.w * self.d, 1)


@dataclass
class FrameStack:
    center_index: int
    channels: torch.Tensor
    source_indices: list
    clip_id: str = ""

    def unpack(self) -> list:
        """``(frame index, 3 x H x W block)`` pairs in window order."""
        blocks = self.channels.reshape(-1, 3, *self.channels.shape[-2:])
        return [(idx, blocks[k]) for k, idx in enumerate(self.source_indices)]


def window_indices(c: int, spec: SupportWindowSpec, clip_len: int) -> list:
    """Frame indices ``c + d*j`` for ``j = -w..w``, clamped into the clip."""
    if not 0 <= c < clip_len:
        raise ContractError(f"center {c} outside clip of length {clip_len}")
    return [min(max(c + spec.d * j, 0), clip_len - 1) for j in range(-spec.w, spec.w + 1)]


def build_stacks(lr_frames: torch.Tensor, centers: Sequence[int], spec: SupportWindowSpec,
                 aligner, hr_size: int = 128, batch_size: int = 64) -> torch.Tensor:
    """Batched stack construction for one clip.

    ``lr_frames`` is ``(T, 3, r, r)`` at the aligner's input resolution.
    Returns ``(len(centers), 3F, hr_size, hr_size)``. Each support frame is
    bicubic-upsampled and warped by ``g_{j->c}`` (predicted at LR, upsampled
    to HR); positions whose index equals the center keep the plain upsample.
    """
    T = lr_frames.shape[0]
    if lr_frames.shape[-1] != aligner.input_resolution:
        raise ContractError(
            f"aligner expects {aligner.input_resolution}px frames, clip has {lr_frames.shape[-1]}px")
    with torch.no_grad():
        hr = resample(lr_frames, hr_size, hr_size, BICUBIC)
        windows = [window_indices(c, spec, T) for c in centers]
        out = hr.new_empty(len(centers), 3 * spec.F, hr_size, hr_size)
        jobs = [(n, k, c, j) for n, (c, win) in enumerate(zip(centers, windows))
                for k, j in enumerate(win)]
        for n, k, c, j in jobs:
            if j == c:
                out[n, 3 * k:3 * k + 3] = hr[c]
        moving = [job for job in jobs if job[3] != job[2]]
        for s in range(0, len(moving), batch_size):
            chunk = moving[s:s + batch_size]
            cs = torch.tensor([c for _, _, c, _ in chunk])
            js = torch.tensor([j for _, _, _, j in chunk])
            grids = upsample_grid(aligner(lr_frames[cs], lr_frames[js]), hr_size)
            warped = warp(hr[js], grids).clamp(0, 1)
            for (n, k, _, _), img in zip(chunk, warped):
                out[n, 3 * k:3 * k + 3] = img
    return out


def build_stack(lr_frames: torch.Tensor, c: int, spec: SupportWindowSpec, aligner,
                hr_size: int = 128, clip_id: str = "") -> FrameStack:
    if lr_frames is None or len(lr_frames) == 0:
        raise DataError("clip has no frames")
    channels = build_stacks(lr_frames, [c], spec, aligner, hr_size)[0]
    return FrameStack(c, channels, window_indices(c, spec, len(lr_frames)), clip_id)


class StackCache:
    """On-disk cache of stacks keyed by ``(clip_id, c, w, d, aligner checksum)``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, clip_id, c, spec, checksum) -> Path:
        key = f"{clip_id}|{c}|{spec.w}|{spec.d}|{checksum}"
        return self.root / (hashlib.sha1(key.encode()).hexdigest() + ".pt")

    def get(self, clip_id, c, spec, checksum) -> Optional[torch.Tensor]:
        p = self._path(clip_id, c, spec, checksum)
        return torch.load(p) if p.exists() else None

    def put(self, clip_id, c, spec, checksum, stack: torch.Tensor):
        p = self._path(clip_id, c, spec, checksum)
        tmp = p.with_suffix(".tmp")
        torch.save(stack.clone(), tmp)
        os.replace(tmp, p)

    def stacks(self, clip_id, lr_frames, centers, spec, aligner, hr_size=128) -> torch.Tensor:
        got = {c: self.get(clip_id, c, spec, aligner.checksum) for c in centers}
        missing = [c for c, s in got.items() if s is None]
        if missing:
            fresh = build_stacks(lr_frames, missing, spec, aligner, hr_size)
            for c, s in zip(missing, fresh):
                self.put(clip_id, c, spec, aligner.checksum, s)
                got[c] = s
        return torch.stack([got[c] for c in centers])
