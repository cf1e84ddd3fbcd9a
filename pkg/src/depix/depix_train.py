"""Training the stacked-frame de-pixelizer against ground truth.

Generator objective: ``lambda_r * L1 + lambda_p * perceptual + lambda_adv * adversarial``,
with strict 1:1 alternation between PatchGAN and generator updates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DataError, NumericError
from .metrics import aggregate, frame_metrics
from .nets import (DepixNet, DepixNetConfig, DiscriminatorConfig, PatchDiscriminator,
                   save_checkpoint)
from .stacker import SupportWindowSpec, build_stacks

log = logging.getLogger(__name__)

VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
             512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
             512, 512, 512, "M", 512, 512, 512, "M"]
VGG19_TAPS = (1, 6, 11, 20, 29)
VGGFACE_TAPS = (1, 6, 11, 18, 25)

_NORMALIZATION = {
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    # VGG-Face expects mean-subtracted 0..255 input
    "vggface": ((129.186 / 255, 104.762 / 255, 93.594 / 255), (1 / 255, 1 / 255, 1 / 255)),
}


def vgg_layers(cfg, width: float = 1.0, upto: int = None) -> nn.Sequential:
    """VGG feature stack with torchvision's layer indexing (conv, ReLU, pool)."""
    layers, cin = [], 3
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            c = max(1, int(round(v * width)))
            layers += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU()]
            cin = c
        if upto is not None and len(layers) > upto:
            break
    return nn.Sequential(*layers[:None if upto is None else upto + 1])


class FeatureExtractor(nn.Module):
    """Frozen network exposing activations at fixed layer indices.

    ``identity_tap`` selects the activations used for identity similarity
    (defaults to the deepest tap).
    """

    def __init__(self, name: str, layers: nn.Sequential, tap_layers: Sequence[int],
                 normalization: Optional[str] = None, pretrained: bool = False,
                 identity_tap: Optional[int] = None):
        super().__init__()
        self.name = name
        self.layers = layers
        self.tap_layers = tuple(tap_layers)
        self.pretrained = pretrained
        self.identity_tap = self.tap_layers[-1] if identity_tap is None else identity_tap
        if normalization is not None:
            mean, std = _NORMALIZATION[normalization]
            self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        else:
            self.mean = self.std = None
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def _taps(self, x, wanted):
        if self.mean is not None:
            x = (x - self.mean) / self.std
        out, last = [], max(wanted)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in wanted:
                out.append(x)
            if i == last:
                break
        if len(out) != len(wanted):
            raise ConfigError(f"{self.name}: tap layers {wanted} exceed network depth {len(self.layers)}")
        return out

    def forward(self, x: torch.Tensor) -> list:
        return self._taps(x, self.tap_layers)

    def identity_features(self, x: torch.Tensor) -> torch.Tensor:
        return self._taps(x, (self.identity_tap,))[0].flatten(1)


def _load_vgg_weights(layers: nn.Sequential, path: Path, name: str):
    if not Path(path).exists():
        raise ConfigError(f"{name} weights not found at {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
    own = layers.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise ConfigError(f"{name} weights at {path} lack layers {missing[:4]}")
    layers.load_state_dict({k: state[k] for k in own})


def _random_init(layers: nn.Sequential, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for m in layers:
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * 9
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()


def _vgg_extractor(name, cfg, taps, weights, normalization, width, seed):
    if weights is not None:
        layers = vgg_layers(cfg, 1.0, upto=max(taps))
        _load_vgg_weights(layers, weights, name)
        return FeatureExtractor(name, layers, taps, normalization, pretrained=True)
    layers = vgg_layers(cfg, width, upto=max(taps))
    _random_init(layers, seed)
    log.warning("%s: no pretrained weights given, using fixed-seed random substitute (width %.3g)",
                name, width)
    return FeatureExtractor(f"{name}-random", layers, taps, None, pretrained=False)


def vgg19_extractor(weights=None, width: float = 1.0, seed: int = 19) -> FeatureExtractor:
    return _vgg_extractor("vgg19", VGG19_CFG, VGG19_TAPS, weights, "imagenet", width, seed)


def vggface_extractor(weights=None, width: float = 1.0, seed: int = 25) -> FeatureExtractor:
    return _vgg_extractor("vggface", VGG16_CFG, VGGFACE_TAPS, weights, "vggface", width, seed)


def pixel_extractor() -> FeatureExtractor:
    """Degenerate extractor whose only feature map is the image itself."""
    return FeatureExtractor("pixels", nn.Sequential(nn.Identity()), (0,))


def reconstruction_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractors) -> torch.Tensor:
    """Sum over extractors and tap layers of mean absolute feature differences."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    total = pred.new_zeros(())
    for ex in extractors:
        for fp, fg in zip(ex(pred), ex(gt)):
            total = total + (fp - fg).abs().mean()
    return total


def _bce(logits: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def discriminator_loss(disc, pixelated, pred, gt) -> torch.Tensor:
    """Ground truth labeled real, generator output labeled fake; ``pred`` is detached."""
    return 0.5 * (_bce(disc(pixelated, gt), True) + _bce(disc(pixelated, pred.detach()), False))


def generator_adversarial_loss(disc, pixelated, pred) -> torch.Tensor:
    """Non-saturating generator loss; gradients reach ``pred`` only."""
    flags = [p.requires_grad for p in disc.parameters()]
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        return _bce(disc(pixelated, pred), True)
    finally:
        for p, f in zip(disc.parameters(), flags):
            p.requires_grad_(f)


def adversarial_losses(disc, pixelated, pred, gt):
    """``(adv_gen, adv_disc)`` over the patch logit map."""
    return generator_adversarial_loss(disc, pixelated, pred), discriminator_loss(disc, pixelated, pred, gt)


@dataclass
class DepixLossReport:
    recon: float
    perceptual: float
    adv_gen: float
    adv_disc: float
    weights: tuple = (1.0, 0.05, 0.01)

    @property
    def total(self) -> float:
        wr, wp, wa = self.weights
        return wr * self.recon + wp * self.perceptual + wa * self.adv_gen


@dataclass
class DepixHyper:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    lambda_r: float = 1.0
    lambda_p: float = 0.05
    lambda_adv: float = 0.01
    seed: int = 0
    vgg19_weights: Optional[str] = None
    vggface_weights: Optional[str] = None
    # channel multiplier of the random-weight extractors used when no weights are given
    extractor_width: float = 1.0
    log_every: int = 10


@dataclass
class ClipData:
    """One clip's training tensors: LR frames for the aligner, pixelated and GT at HR."""

    clip_id: str
    lr: torch.Tensor
    pixelated: torch.Tensor
    gt: torch.Tensor

    def __post_init__(self):
        if not (len(self.lr) == len(self.pixelated) == len(self.gt)):
            raise DataError(f"clip {self.clip_id}: LR, pixelated and GT frame counts differ")


@dataclass
class StackedSet:
    stacks: torch.Tensor
    pixelated: torch.Tensor
    gt: torch.Tensor
    keys: list = field(default_factory=list)

    def __len__(self):
        return len(self.stacks)


def stack_clips(clips: Sequence[ClipData], spec: SupportWindowSpec, aligner, cache=None) -> StackedSet:
    stacks, pix, gt, keys = [], [], [], []
    for clip in clips:
        centers = list(range(len(clip.lr)))
        hr = clip.gt.shape[-1]
        if cache is not None:
            s = cache.stacks(clip.clip_id, clip.lr, centers, spec, aligner, hr)
        else:
            s = build_stacks(clip.lr, centers, spec, aligner, hr)
        stacks.append(s)
        pix.append(clip.pixelated)
        gt.append(clip.gt)
        keys += [(clip.clip_id, c) for c in centers]
    if not stacks:
        raise DataError("no clips to stack")
    return StackedSet(torch.cat(stacks), torch.cat(pix), torch.cat(gt), keys)


def default_extractors(hyper: DepixHyper) -> list:
    return [vgg19_extractor(hyper.vgg19_weights, hyper.extractor_width),
            vggface_extractor(hyper.vggface_weights, hyper.extractor_width)]


class DepixTrainer:
    """Holds generator, discriminator, optimizers and the loss configuration."""

    def __init__(self, gen_config: DepixNetConfig, disc_config: DiscriminatorConfig = DiscriminatorConfig(),
                 hyper: DepixHyper = DepixHyper(), extractors=None):
        torch.manual_seed(hyper.seed)
        self.hyper = hyper
        self.gen = DepixNet(gen_config)
        self.disc = PatchDiscriminator(disc_config) if hyper.lambda_adv > 0 else None
        self.extractors = default_extractors(hyper) if extractors is None and hyper.lambda_p > 0 else (extractors or [])
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=hyper.lr, betas=tuple(hyper.betas))
        self.opt_d = (torch.optim.Adam(self.disc.parameters(), lr=hyper.lr, betas=tuple(hyper.betas))
                      if self.disc is not None else None)

    @property
    def weights(self):
        h = self.hyper
        return (h.lambda_r, h.lambda_p, h.lambda_adv)

    def discriminator_step(self, stacks, pixelated, gt) -> float:
        with torch.no_grad():
            pred = self.gen(stacks)
        loss = discriminator_loss(self.disc, pixelated, pred, gt)
        self.opt_d.zero_grad()
        loss.backward()
        self.opt_d.step()
        return loss.item()

    def generator_step(self, stacks, pixelated, gt):
        h = self.hyper
        pred = self.gen(stacks)
        recon = reconstruction_loss(pred, gt)
        perc = perceptual_loss(pred, gt, self.extractors) if h.lambda_p > 0 else pred.new_zeros(())
        adv = generator_adversarial_loss(self.disc, pixelated, pred) if self.disc is not None else pred.new_zeros(())
        total = h.lambda_r * recon + h.lambda_p * perc + h.lambda_adv * adv
        if not torch.isfinite(total):
            raise NumericError(f"generator loss became {total.item()}")
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return recon.item(), perc.item(), adv.item()

    def step(self, stacks, pixelated, gt) -> DepixLossReport:
        adv_disc = float("nan")
        if self.disc is not None:
            adv_disc = self.discriminator_step(stacks, pixelated, gt)
            if not math.isfinite(adv_disc):
                raise NumericError(f"discriminator loss became {adv_disc}")
        recon, perc, adv = self.generator_step(stacks, pixelated, gt)
        return DepixLossReport(recon, perc, adv, adv_disc if self.disc is not None else 0.0, self.weights)

    @torch.no_grad()
    def predict(self, stacks: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
        self.gen.eval()
        out = torch.cat([self.gen(stacks[i:i + batch_size]) for i in range(0, len(stacks), batch_size)])
        self.gen.train()
        return out


def evaluate_set(trainer: DepixTrainer, data: StackedSet, id_extractor=None) -> dict:
    pred = trainer.predict(data.stacks)
    recs = [frame_metrics(p, g, id_extractor) for p, g in zip(pred, data.gt)]
    agg = aggregate(recs)
    return {"psnr": agg.psnr, "ssim": agg.ssim, "id_sim": agg.id_sim,
            "l1": float((pred - data.gt).abs().mean())}


def train_depix(train_clips: Sequence[ClipData], aligner, spec: SupportWindowSpec,
                gen_config: Optional[DepixNetConfig] = None,
                disc_config: DiscriminatorConfig = DiscriminatorConfig(),
                hyper: DepixHyper = DepixHyper(), val_clips: Sequence[ClipData] = (),
                out_dir: Optional[Path] = None, extractors=None, cache=None) -> DepixTrainer:
    """Train the generator on stacks built by the frozen ``aligner``.

    Writes ``generator.pt``, ``discriminator.pt`` and ``train_log.jsonl`` to
    ``out_dir`` after every epoch; on a NaN loss the previous checkpoint is
    left in place and :class:`NumericError` propagates.
    """
    train = stack_clips(train_clips, spec, aligner, cache)
    val = stack_clips(val_clips, spec, aligner, cache) if val_clips else None
    if gen_config is None:
        gen_config = DepixNetConfig(input_channels=3 * spec.F)
    if gen_config.input_channels != 3 * spec.F:
        raise ConfigError(f"generator takes {gen_config.input_channels} channels, window gives {3 * spec.F}")
    trainer = DepixTrainer(gen_config, disc_config, hyper, extractors)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    rng = np.random.default_rng(hyper.seed)
    n = len(train)
    bs = min(hyper.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    step = 0
    epoch = 0
    try:
        while step < hyper.steps:
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                if step >= hyper.steps:
                    break
                idx = torch.as_tensor(order[b * bs:(b + 1) * bs])
                rep = trainer.step(train.stacks[idx], train.pixelated[idx], train.gt[idx])
                step += 1
                if log_file and (step % hyper.log_every == 0 or step == 1):
                    log_file.write(json.dumps({"step": step, "epoch": epoch, **asdict(rep),
                                               "total": rep.total}) + "\n")
            epoch += 1
            rec = {"epoch": epoch, "step": step}
            if val is not None:
                rec["val"] = evaluate_set(trainer, val)
                log.info("epoch %d step %d val psnr %.2f", epoch, step, rec["val"]["psnr"])
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if out_dir is not None:
                save_checkpoint(trainer.gen, out_dir / "generator.pt", step=step, spec=asdict(spec))
                if trainer.disc is not None:
                    save_checkpoint(trainer.disc, out_dir / "discriminator.pt", step=step)
    finally:
        if log_file:
            log_file.close()
    trainer.gen.eval()
    return trainer
