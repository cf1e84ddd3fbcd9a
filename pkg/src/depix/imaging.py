"""Image math: resampling, pixelation, warp grids and backward warping.

Conventions used throughout the package:

* images are float tensors in ``[0, 1]`` laid out ``(..., 3, H, W)``;
  :class:`Frame` is the ``H x W x 3`` container used for I/O and metadata.
* warp grids are ``(..., G, G, 2)`` tensors of normalized sampling
  coordinates in ``[-1, 1]`` with channel order ``(x, y)``.
* pixel ``i`` of an axis with ``n`` pixels has its center at
  ``(2 i + 1) / n - 1`` ("align corners" off).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ContractError, InvalidInputError, ConfigError

BICUBIC_A = -0.75


@dataclass
class Frame:
    """A single RGB image with clip bookkeeping.

    ``pixels`` is an ``H x W x 3`` float tensor with values in ``[0, 1]``.
    """

    pixels: torch.Tensor
    clip_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        p = torch.as_tensor(self.pixels)
        if not p.is_floating_point():
            p = p.float()
        if p.ndim != 3 or p.shape[-1] != 3:
            raise ContractError(f"Frame pixels must be HxWx3, got {tuple(p.shape)}")
        if p.shape[0] == 0 or p.shape[1] == 0:
            raise ContractError("Frame must have positive height and width")
        if not torch.isfinite(p).all():
            raise InvalidInputError("Frame contains non-finite pixels")
        if p.min() < 0 or p.max() > 1:
            raise InvalidInputError("Frame pixels must lie in [0, 1]")
        if self.frame_index < 0:
            raise ContractError("frame_index must be >= 0")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def chw(self) -> torch.Tensor:
        return self.pixels.permute(2, 0, 1)

    @classmethod
    def from_chw(cls, x: torch.Tensor, clip_id: str = "", frame_index: int = 0) -> "Frame":
        return cls(x.permute(1, 2, 0), clip_id=clip_id, frame_index=frame_index)

    def replace(self, pixels_chw: torch.Tensor) -> "Frame":
        return Frame.from_chw(pixels_chw, self.clip_id, self.frame_index)


@dataclass
class WarpGrid:
    """A ``G x G x 2`` field of normalized ``(x, y)`` sampling coordinates."""

    coords: torch.Tensor

    def __post_init__(self):
        c = torch.as_tensor(self.coords)
        if c.ndim != 3 or c.shape[-1] != 2 or c.shape[0] != c.shape[1]:
            raise ContractError(f"WarpGrid coords must be GxGx2, got {tuple(c.shape)}")
        if c.shape[0] < 2:
            raise ContractError("WarpGrid resolution must be >= 2")
        if not torch.isfinite(c).all():
            raise InvalidInputError("WarpGrid contains non-finite coordinates")
        self.coords = c

    @property
    def resolution(self) -> int:
        return self.coords.shape[0]


class KernelKind(str, enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"
    BOX = "box"


@dataclass(frozen=True)
class ResampleKernel:
    kind: KernelKind = KernelKind.BICUBIC
    bicubic_a: float = field(default=BICUBIC_A)

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind is not KernelKind.BICUBIC and self.bicubic_a != BICUBIC_A:
            raise ConfigError("bicubic_a only applies to the bicubic kernel")


NEAREST = ResampleKernel(KernelKind.NEAREST)
BILINEAR = ResampleKernel(KernelKind.BILINEAR)
BICUBIC = ResampleKernel(KernelKind.BICUBIC)
BOX = ResampleKernel(KernelKind.BOX)

ImageLike = Union[Frame, torch.Tensor]
GridLike = Union[WarpGrid, torch.Tensor]


def _unwrap_image(x: ImageLike):
    if isinstance(x, Frame):
        return x.chw(), x.replace
    return x, lambda y: y


def _unwrap_grid(g: GridLike):
    if isinstance(g, WarpGrid):
        return g.coords, WarpGrid
    return g, lambda y: y


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel with sharpness ``a``."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _box_weights(src: int, dst: int) -> np.ndarray:
    # exact area overlap between output cells and input pixels
    scale = src / dst
    lo = np.arange(dst)[:, None] * scale
    hi = lo + scale
    j = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0, None)
    return overlap / scale


def resample_weights(src: int, dst: int, kernel: ResampleKernel = BICUBIC) -> np.ndarray:
    """Dense ``dst x src`` matrix mapping one image axis to a new length.

    Filter kernels are stretched by ``src / dst`` when downsampling
    (antialiased), taps falling outside the image are dropped and each row
    is renormalized to sum to one.
    """
    if src < 1 or dst < 1:
        raise ContractError("axis lengths must be >= 1")
    kind = kernel.kind
    if kind is KernelKind.BOX:
        return _box_weights(src, dst)
    scale = src / dst
    centers = (np.arange(dst) + 0.5) * scale
    if kind is KernelKind.NEAREST:
        idx = np.minimum(np.floor(centers).astype(np.int64), src - 1)
        w = np.zeros((dst, src))
        w[np.arange(dst), idx] = 1.0
        return w
    stretch = max(scale, 1.0)
    x = ((np.arange(src) + 0.5)[None, :] - centers[:, None]) / stretch
    if kind is KernelKind.BILINEAR:
        w = np.clip(1.0 - np.abs(x), 0.0, None)
    else:
        w = cubic_kernel(x, kernel.bicubic_a)
    return w / w.sum(axis=1, keepdims=True)


def _apply_separable(x: torch.Tensor, wy: np.ndarray, wx: np.ndarray) -> torch.Tensor:
    ty = torch.as_tensor(wy, dtype=x.dtype, device=x.device)
    tx = torch.as_tensor(wx, dtype=x.dtype, device=x.device)
    return ty @ x @ tx.T


def _check_finite(x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise InvalidInputError("image contains non-finite values")


def resample(frame: ImageLike, target_h: int, target_w: int,
             kernel: ResampleKernel = BICUBIC) -> ImageLike:
    """Resize an image to ``target_h x target_w``; output is clamped to [0, 1]."""
    if target_h < 1 or target_w < 1:
        raise ContractError("target size must be >= 1")
    x, wrap = _unwrap_image(frame)
    _check_finite(x)
    h, w = x.shape[-2:]
    if kernel.kind is KernelKind.NEAREST:
        # pure gather, exact copies of input values
        iy = torch.as_tensor(resample_weights(h, target_h, kernel).argmax(1), device=x.device)
        ix = torch.as_tensor(resample_weights(w, target_w, kernel).argmax(1), device=x.device)
        out = x.index_select(-2, iy).index_select(-1, ix)
    else:
        out = _apply_separable(x, resample_weights(h, target_h, kernel),
                               resample_weights(w, target_w, kernel))
    return wrap(out.clamp(0.0, 1.0))


def box_downsample(x: torch.Tensor, size: int) -> torch.Tensor:
    """Area-average ``(..., H, W)`` down to ``size x size`` with float64 accumulation.

    Accumulating in double keeps the mean of a constant float32 block equal
    to that constant bit-for-bit.
    """
    h, w = x.shape[-2:]
    if size > min(h, w):
        raise ConfigError(f"lr_size {size} exceeds frame resolution {h}x{w}")
    out = _apply_separable(x.double(), _box_weights(h, size), _box_weights(w, size))
    return out.to(x.dtype).clamp(0.0, 1.0)


def pixelate(frame: ImageLike, lr_size: int, hr_size: int) -> ImageLike:
    """Box-average down to ``lr_size`` then enlarge each cell to a constant block."""
    if lr_size < 1:
        raise ConfigError("lr_size must be >= 1")
    if hr_size % lr_size:
        raise ConfigError(f"hr_size {hr_size} must be divisible by lr_size {lr_size}")
    x, wrap = _unwrap_image(frame)
    _check_finite(x)
    lr = box_downsample(x, lr_size)
    return wrap(nearest_blocks(lr, hr_size // lr_size))


def nearest_blocks(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Integer-factor nearest upsampling by block replication."""
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def pixel_centers(n: int) -> torch.Tensor:
    return (2 * torch.arange(n, dtype=torch.float64) + 1) / n - 1


def identity_coords(resolution: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Raw ``(G, G, 2)`` identity coordinates."""
    c = pixel_centers(resolution)
    ys, xs = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([xs, ys], dim=-1).to(dtype=dtype, device=device)


def identity_grid(resolution: int) -> WarpGrid:
    if resolution < 2:
        raise ContractError("grid resolution must be >= 2")
    return WarpGrid(identity_coords(resolution))


def translation_coords(resolution: int, dx: float, dy: float, dtype=torch.float32) -> torch.Tensor:
    """Grid that samples ``dx``/``dy`` pixels to the right/down of each output pixel."""
    g = identity_coords(resolution, dtype=torch.float64)
    g[..., 0] += 2.0 * dx / resolution
    g[..., 1] += 2.0 * dy / resolution
    return g.to(dtype)


def grid_interp_weights(src: int, dst: int) -> np.ndarray:
    """Bilinear weights between cell centers, extrapolating linearly past the edge cells.

    Linear extrapolation (instead of clamping) makes the upsampling exact on
    affine coordinate fields, so an upsampled identity grid is again an
    identity grid at the new resolution.
    """
    s = (np.arange(dst) + 0.5) * src / dst - 0.5
    i0 = np.clip(np.floor(s).astype(np.int64), 0, src - 2)
    t = s - i0
    w = np.zeros((dst, src))
    w[np.arange(dst), i0] = 1.0 - t
    w[np.arange(dst), i0 + 1] = t
    return w


def upsample_grid(grid: GridLike, target: int) -> GridLike:
    """Bilinearly upsample a ``(..., G, G, 2)`` grid to ``target x target``."""
    g, wrap = _unwrap_grid(grid)
    src = g.shape[-2]
    if target < src:
        raise ContractError(f"target {target} is below grid resolution {src}")
    if target == src:
        return wrap(g.clone())
    w = torch.as_tensor(grid_interp_weights(src, target), dtype=g.dtype, device=g.device)
    # channels-first so the separable product acts on the two spatial axes
    gc = g.movedim(-1, -3)
    out = w @ gc @ w.T
    return wrap(out.movedim(-3, -1))


def warp(frame: ImageLike, grid: GridLike) -> ImageLike:
    """Backward-warp: output pixel ``p`` samples the input at ``grid[p]``.

    Bilinear interpolation with clamp-to-edge borders; differentiable with
    respect to both the image and the grid.
    """
    x, wrap = _unwrap_image(frame)
    g, _ = _unwrap_grid(grid)
    if g.shape[-3:-1] != x.shape[-2:]:
        raise ContractError(
            f"grid resolution {tuple(g.shape[-3:-1])} does not match image {tuple(x.shape[-2:])}")
    batched = x.ndim == 4
    xb = x if batched else x.unsqueeze(0)
    gb = g if g.ndim == 4 else g.unsqueeze(0).expand(xb.shape[0], -1, -1, -1)
    out = F.grid_sample(xb, gb.to(xb.dtype), mode="bilinear", padding_mode="border",
                        align_corners=False)
    return wrap(out if batched else out[0])


def warp_with_grid(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Upsample ``grid`` to the image resolution (if needed) and warp."""
    size = image.shape[-1]
    return warp(image, upsample_grid(grid, size))


def quantize(x: torch.Tensor) -> np.ndarray:
    """Float ``[0, 1]`` CHW tensor -> uint8 HWC array, round half up."""
    a = x.detach().cpu().double().clamp(0, 1).numpy()
    return np.floor(a * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(x: ImageLike, path: Union[str, Path]):
    t, _ = _unwrap_image(x)
    Image.fromarray(quantize(t), mode="RGB").save(path, format="PNG")


def load_png(path: Union[str, Path]) -> torch.Tensor:
    """Load an 8-bit image as a float32 CHW tensor in [0, 1]."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(a.transpose(2, 0, 1).copy())


def load_frame(path: Union[str, Path], clip_id: str = "", frame_index: int = 0) -> Frame:
    return Frame.from_chw(load_png(path), clip_id, frame_index)


def png_bytes(x: torch.Tensor) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(quantize(x), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def is_power_of_two(n: int) -> bool:
    return n > 0 and math.log2(n).is_integer()
