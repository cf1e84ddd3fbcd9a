"""Procedural test clips: a cartoon "head" moving over a smooth background.

These stand in for cropped face videos when no real data is available.
Everything is a deterministic function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class HeadStyle:
    skin: tuple
    hair: tuple
    background_a: tuple
    background_b: tuple
    radius: float
    eye_gap: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "HeadStyle":
        return cls(
            skin=tuple(rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])),
            hair=tuple(rng.uniform(0.05, 0.35, 3)),
            background_a=tuple(rng.uniform(0.1, 0.9, 3)),
            background_b=tuple(rng.uniform(0.1, 0.9, 3)),
            radius=float(rng.uniform(0.28, 0.36)),
            eye_gap=float(rng.uniform(0.32, 0.42)),
        )


def _soft(sd: np.ndarray, softness: float) -> np.ndarray:
    # signed distance (negative inside) -> coverage in [0, 1]
    return 1.0 / (1.0 + np.exp(np.clip(sd / softness, -50, 50)))


def _ellipse_sd(xx, yy, cx, cy, rx, ry):
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return (d - 1.0) * min(rx, ry)


def render_head(size: int, style: HeadStyle, cx: float = 0.5, cy: float = 0.5,
                mouth_open: float = 0.3, blink: float = 0.0) -> np.ndarray:
    """Render one ``3 x size x size`` float32 frame; geometry is in unit coordinates."""
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    soft = 0.6 / size
    bg_a = np.asarray(style.background_a)[:, None, None]
    bg_b = np.asarray(style.background_b)[:, None, None]
    img = bg_a * (1 - xx) + bg_b * xx
    img = img * (0.9 + 0.1 * np.cos(3 * np.pi * yy))

    def paint(img, coverage, color):
        c = np.asarray(color)[:, None, None]
        return img * (1 - coverage) + c * coverage

    r = style.radius
    img = paint(img, _soft(_ellipse_sd(xx, yy, cx, cy - 0.06, r * 1.02, r * 0.95), soft), style.hair)
    face = _soft(_ellipse_sd(xx, yy, cx, cy + 0.02, r * 0.85, r), soft)
    shade = 0.85 + 0.15 * np.clip(1 - ((xx - cx) ** 2 + (yy - cy) ** 2) / r ** 2, 0, 1)
    img = img * (1 - face) + (np.asarray(style.skin)[:, None, None] * shade) * face
    ex = style.eye_gap * r
    eye_ry = max(r * 0.1 * (1 - 0.9 * blink), 1.5 / size)
    for sx in (-1, 1):
        img = paint(img, _soft(_ellipse_sd(xx, yy, cx + sx * ex, cy - 0.1 * r * 1.5, r * 0.16, r * 0.1), soft),
                    (0.95, 0.95, 0.95))
        img = paint(img, _soft(_ellipse_sd(xx, yy, cx + sx * ex, cy - 0.15 * r, r * 0.08, eye_ry), soft),
                    (0.1, 0.1, 0.15))
        img = paint(img, _soft(_ellipse_sd(xx, yy, cx + sx * ex, cy - 0.42 * r, r * 0.22, r * 0.05), soft),
                    style.hair)
    img = paint(img, _soft(_ellipse_sd(xx, yy, cx, cy + 0.15 * r, r * 0.08, r * 0.2), soft),
                tuple(np.asarray(style.skin) * 0.8))
    img = paint(img, _soft(_ellipse_sd(xx, yy, cx, cy + 0.55 * r, r * 0.35, r * (0.04 + 0.16 * mouth_open)), soft),
                (0.45, 0.1, 0.12))
    return np.clip(img, 0, 1).astype(np.float32)


def head_clip(n_frames: int = 50, size: int = 256, seed: int = 0, amplitude: float = 0.06) -> np.ndarray:
    """A talking-head-like clip: smooth drift, mouth motion and blinks.

    ``amplitude`` is the peak head displacement in unit coordinates.
    Returns ``(n_frames, 3, size, size)`` float32.
    """
    rng = np.random.default_rng(seed)
    style = HeadStyle.random(rng)
    freq = rng.uniform(0.02, 0.06, 4)
    phase = rng.uniform(0, 2 * np.pi, 4)
    frames = []
    for k in range(n_frames):
        cx = 0.5 + amplitude * np.sin(2 * np.pi * freq[0] * k + phase[0])
        cy = 0.5 + 0.6 * amplitude * np.sin(2 * np.pi * freq[1] * k + phase[1])
        mouth = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * freq[2] * k + phase[2])
        blink = 1.0 if (k + int(phase[3] * 10)) % 23 == 0 else 0.0
        frames.append(render_head(size, style, cx, cy, mouth, blink))
    return np.stack(frames)


def translated_clip(n_frames: int = 24, size: int = 64, seed: int = 0, max_shift: float = 0.12,
                    quantum: int = 1, return_offsets: bool = False):
    """Whole-frame translated copies of one scene (random-walk offsets).

    Frames are ``size x size`` windows cut from a larger canvas at offsets
    that are multiples of ``quantum`` pixels and at most ``max_shift * size``
    (a quantum equal to the pixelation block size keeps the pixelated
    frames exact translations of each other). With ``return_offsets``
    the ``(n_frames, 2)`` array of ``(dx, dy)`` window offsets is also
    returned.
    """
    rng = np.random.default_rng(seed)
    style = HeadStyle.random(rng)
    margin = int(np.ceil(max_shift * size))
    canvas_size = size + 2 * margin
    scale = size / canvas_size
    canvas = render_head(canvas_size, replace(style, radius=style.radius * scale))
    pos = np.zeros(2)
    frames, offsets = [], []
    for _ in range(n_frames):
        pos = np.clip(pos + rng.normal(0, margin / 3, 2), -margin, margin)
        dx, dy = (int(round(v / quantum)) * quantum for v in pos)
        dx, dy = (min(max(v, -margin), margin) for v in (dx, dy))
        frames.append(canvas[:, margin + dy:margin + dy + size, margin + dx:margin + dx + size])
        offsets.append((dx, dy))
    frames = np.stack(frames)
    return (frames, np.asarray(offsets)) if return_offsets else frames
