"""Face video de-pixelization: frame alignment, support-window stacking and a stack-to-image generator."""

from .errors import (ConfigError, ContractError, DataError, DepixError, InvalidInputError, NumericError,
                     UndefinedSimilarityError)
from .imaging import (BICUBIC, BILINEAR, BOX, NEAREST, Frame, ResampleKernel, WarpGrid, identity_grid,
                      pixelate, resample, upsample_grid, warp)
from .nets import (DepixNet, DepixNetConfig, DiscriminatorConfig, PatchDiscriminator, StnNet, StnNetConfig,
                   load_checkpoint, save_checkpoint)
from .alignment import Aligner, IdentityAligner, StnHyper, train_stn
from .stacker import FrameStack, SupportWindowSpec, build_stack, build_stacks
from .metrics import MetricsRecord, Scope, aggregate, psnr, ssim
from .depix_train import ClipData, DepixHyper, DepixTrainer, train_depix
from .pipeline import AblationPlan, RunConfig, infer_clip, run_ablation

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DepixError",
    "InvalidInputError",
    "NumericError",
    "UndefinedSimilarityError",
    "BICUBIC",
    "BILINEAR",
    "BOX",
    "NEAREST",
    "Frame",
    "ResampleKernel",
    "WarpGrid",
    "identity_grid",
    "pixelate",
    "resample",
    "upsample_grid",
    "warp",
    "DepixNet",
    "DepixNetConfig",
    "DiscriminatorConfig",
    "PatchDiscriminator",
    "StnNet",
    "StnNetConfig",
    "load_checkpoint",
    "save_checkpoint",
    "Aligner",
    "IdentityAligner",
    "StnHyper",
    "train_stn",
    "FrameStack",
    "SupportWindowSpec",
    "build_stack",
    "build_stacks",
    "MetricsRecord",
    "Scope",
    "aggregate",
    "psnr",
    "ssim",
    "ClipData",
    "DepixHyper",
    "DepixTrainer",
    "train_depix",
    "AblationPlan",
    "RunConfig",
    "infer_clip",
    "run_ablation",
]
