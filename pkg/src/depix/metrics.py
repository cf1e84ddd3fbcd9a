"""PSNR, SSIM and deep-feature identity similarity."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .errors import ContractError, UndefinedSimilarityError

PSNR_CAP_DB = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(pred, gt):
    a, b = _as_array(pred), _as_array(gt)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 100 dB."""
    a, b = _check_pair(pred, gt)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def luminance(x: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of a ``3 x H x W`` image."""
    w = np.asarray(LUMA_WEIGHTS)
    return np.tensordot(w, x, axes=(0, 0))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim_map(pred, gt) -> np.ndarray:
    """Local SSIM on luminance over every fully-contained 11x11 Gaussian window."""
    a, b = _check_pair(pred, gt)
    if a.ndim == 3:
        a, b = luminance(a), luminance(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(f"image {a.shape} is smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, gt) -> float:
    return float(ssim_map(pred, gt).mean())


def cosine_similarity(u, v) -> float:
    u = _as_array(u).ravel()
    v = _as_array(v).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero-norm feature vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def identity_similarity(pred, gt, extractor) -> float:
    """Cosine similarity of the extractor's identity features for two frames."""
    pred = torch.as_tensor(pred, dtype=torch.float32)
    gt = torch.as_tensor(gt, dtype=torch.float32)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    with torch.no_grad():
        fp = extractor.identity_features(pred.unsqueeze(0))
        fg = extractor.identity_features(gt.unsqueeze(0))
    return cosine_similarity(fp.double(), fg.double())


class Scope(str, enum.Enum):
    FRAME = "frame"
    CLIP = "clip"
    DATASET = "dataset"


@dataclass
class MetricsRecord:
    psnr: float
    ssim: float
    id_sim: float
    scope: Scope = Scope.FRAME
    count: int = 1
    name: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scope"] = Scope(self.scope).value
        return d


def frame_metrics(pred, gt, extractor=None, name: str = "") -> MetricsRecord:
    id_sim = identity_similarity(pred, gt, extractor) if extractor is not None else float("nan")
    return MetricsRecord(psnr(pred, gt), ssim(pred, gt), id_sim, Scope.FRAME, 1, name)


def aggregate(records: Iterable[MetricsRecord], scope: Scope = Scope.DATASET, name: str = "") -> MetricsRecord:
    """Arithmetic mean of frame-level records."""
    records = list(records)
    if not records:
        raise ContractError("cannot aggregate zero metric records")
    n = sum(r.count for r in records)
    mean = lambda attr: float(sum(getattr(r, attr) * r.count for r in records) / n)
    return MetricsRecord(mean("psnr"), mean("ssim"), mean("id_sim"), Scope(scope), n, name)
