"""Alignment STN, de-pixelization U-Net and PatchGAN discriminator."""

from __future__ import annotations

import hashlib
import io
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError
from .imaging import identity_coords

CHECKPOINT_FORMAT = "depix-checkpoint"
CHECKPOINT_VERSION = 1


def _log2(n: int, what: str) -> int:
    k = math.log2(n) if n > 0 else -1
    if k != int(k):
        raise ConfigError(f"{what} must be a power of two, got {n}")
    return int(k)


@dataclass(frozen=True)
class StnNetConfig:
    input_resolution: int = 16
    input_channels: int = 6
    grid_resolution: int = 8
    base_channels: int = 32

    def __post_init__(self):
        if self.input_channels != 6:
            raise ConfigError("STN takes two RGB frames (6 channels)")
        _log2(self.input_resolution, "input_resolution")
        _log2(self.grid_resolution, "grid_resolution")
        if not 4 <= self.grid_resolution <= self.input_resolution:
            raise ConfigError("grid_resolution must lie in [4, input_resolution]")


@dataclass(frozen=True)
class DepixNetConfig:
    input_resolution: int = 128
    input_channels: int = 15
    output_channels: int = 3
    depth: int = 5
    base_channels: int = 64
    max_channels: int = 512
    skip_connections: bool = True

    def __post_init__(self):
        if self.input_channels % 3:
            raise ConfigError("input_channels must be a multiple of 3")
        if self.output_channels != 3:
            raise ConfigError("output must be a single RGB frame")
        if not self.skip_connections:
            raise ConfigError("the de-pixelization U-Net always uses skip connections")
        if self.input_resolution >> self.depth < 1 or self.input_resolution % (1 << self.depth):
            raise ConfigError("input_resolution must be divisible by 2**depth")

    @property
    def frames(self) -> int:
        return self.input_channels // 3


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_channels: int = 6
    num_layers: int = 3
    base_channels: int = 64


def _down(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(),
    )


def _conv3(cin, cout, act=None):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        act or nn.LeakyReLU(0.2),
    )


class StnNet(nn.Module):
    """U-Net predicting a free-form warp grid ``g_{B->A}`` from a frame pair.

    The head is zero-initialized and added to the identity grid, so an
    untrained net returns the identity warp.
    """

    def __init__(self, config: StnNetConfig = StnNetConfig()):
        super().__init__()
        self.config = config
        b = config.base_channels
        bottleneck = min(4, config.grid_resolution)
        n_down = _log2(config.input_resolution, "") - _log2(bottleneck, "")
        n_up = _log2(config.grid_resolution, "") - _log2(bottleneck, "")

        self.stem = _conv3(6, b)
        chans = [b]
        downs = []
        for _ in range(n_down):
            downs.append(_down(chans[-1], min(chans[-1] * 2, 256)))
            chans.append(min(chans[-1] * 2, 256))
        self.downs = nn.ModuleList(downs)
        self.bottleneck = _conv3(chans[-1], chans[-1])
        ups, fuse = [], []
        c = chans[-1]
        for k in range(n_up):
            skip = chans[-2 - k]
            ups.append(_up(c, skip))
            fuse.append(_conv3(2 * skip, skip))
            c = skip
        self.ups = nn.ModuleList(ups)
        self.fuse = nn.ModuleList(fuse)
        self.head = nn.Conv2d(c, 2, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("identity", identity_coords(config.grid_resolution), persistent=False)

    def forward(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        """``(N, 3, r, r)`` pair -> ``(N, G, G, 2)`` grid warping ``frame_b`` onto ``frame_a``."""
        r = self.config.input_resolution
        if frame_a.shape[-2:] != (r, r) or frame_b.shape[-2:] != (r, r):
            raise ContractError(
                f"STN expects {r}x{r} frames, got {tuple(frame_a.shape[-2:])} / {tuple(frame_b.shape[-2:])}")
        h = self.stem(torch.cat([frame_a, frame_b], dim=1))
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.bottleneck(h)
        for k, (up, fuse) in enumerate(zip(self.ups, self.fuse)):
            h = fuse(torch.cat([up(h), skips[-2 - k]], dim=1))
        residual = self.head(h).permute(0, 2, 3, 1)
        return self.identity.to(residual.dtype) + residual


class DepixNet(nn.Module):
    """Stacked-frame U-Net producing the HR center frame."""

    def __init__(self, config: DepixNetConfig = DepixNetConfig()):
        super().__init__()
        self.config = config
        widths = [min(config.base_channels * 2 ** k, config.max_channels) for k in range(config.depth)]
        self.widths = widths
        cin = config.input_channels
        self.encoders = nn.ModuleList()
        for k, c in enumerate(widths):
            self.encoders.append(_down(cin, c, norm=k > 0))
            cin = c
        self.decoders = nn.ModuleList()
        for k in range(config.depth - 1, 0, -1):
            c_in = widths[k] if k == config.depth - 1 else 2 * widths[k]
            self.decoders.append(_up(c_in, widths[k - 1]))
        self.final_up = _up(2 * widths[0], widths[0])
        # full-resolution skip from the input stack
        self.out = nn.Sequential(
            nn.Conv2d(widths[0] + config.input_channels, config.output_channels, 3, 1, 1),
            nn.Sigmoid(),
        )

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if stack.shape[1] != cfg.input_channels:
            raise ContractError(f"expected {cfg.input_channels} channels, got {stack.shape[1]}")
        if stack.shape[-2:] != (cfg.input_resolution, cfg.input_resolution):
            raise ContractError(f"expected {cfg.input_resolution}px input, got {tuple(stack.shape[-2:])}")
        feats = []
        h = stack
        for enc in self.encoders:
            h = enc(h)
            feats.append(h)
        for i, dec in enumerate(self.decoders):
            h = dec(h)
            h = torch.cat([h, feats[-2 - i]], dim=1)
        h = self.final_up(h)
        return self.out(torch.cat([h, stack], dim=1))


class PatchDiscriminator(nn.Module):
    """PatchGAN over (pixelated, candidate) pairs; emits a map of logits."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        b = config.base_channels
        layers = [nn.Conv2d(config.input_channels, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        c = b
        for k in range(1, config.num_layers):
            nc = b * min(2 ** k, 8)
            layers += [nn.Conv2d(c, nc, 4, 2, 1, bias=False), nn.InstanceNorm2d(nc, affine=True),
                       nn.LeakyReLU(0.2)]
            c = nc
        nc = b * min(2 ** config.num_layers, 8)
        layers += [nn.Conv2d(c, nc, 4, 1, 1, bias=False), nn.InstanceNorm2d(nc, affine=True),
                   nn.LeakyReLU(0.2), nn.Conv2d(nc, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    @staticmethod
    def output_size(input_size: int, num_layers: int = 3) -> int:
        n = input_size
        for _ in range(num_layers):
            n = (n + 2 - 4) // 2 + 1
        for _ in range(2):
            n = (n + 2 - 4) // 1 + 1
        return n

    def forward(self, pixelated: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if pixelated.shape != candidate.shape:
            raise ContractError(
                f"pixelated {tuple(pixelated.shape)} and candidate {tuple(candidate.shape)} differ")
        return self.model(torch.cat([pixelated, candidate], dim=1))


_KINDS = {
    "stn": (StnNet, StnNetConfig),
    "depix": (DepixNet, DepixNetConfig),
    "disc": (PatchDiscriminator, DiscriminatorConfig),
}


def _kind_of(net: nn.Module) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(net, cls):
            return kind
    raise ConfigError(f"unsupported network type {type(net).__name__}")


def state_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(net: nn.Module, path: Union[str, Path], **meta) -> Path:
    """Write a self-describing checkpoint atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _kind_of(net),
        "config": asdict(net.config),
        "state_dict": net.state_dict(),
        "checksum": state_checksum(net),
        "meta": meta,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path], kind: str = None, expected_config=None) -> nn.Module:
    """Rebuild a net from a checkpoint.

    If ``expected_config`` is given, the stored config must match it exactly.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a depix checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload['version']}")
    if kind is not None and payload["kind"] != kind:
        raise ConfigError(f"{path} holds a {payload['kind']!r} net, expected {kind!r}")
    cls, cfg_cls = _KINDS[payload["kind"]]
    config = cfg_cls(**payload["config"])
    if expected_config is not None and expected_config != config:
        raise ConfigError(f"checkpoint config {config} does not match {expected_config}")
    net = cls(config)
    net.load_state_dict(payload["state_dict"])
    net.checkpoint_meta = payload.get("meta", {})
    net.eval()
    return net
