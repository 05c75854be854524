"""Learned smartphone ISP toolkit: numpy NN core, ISP networks, metrics and profiling."""

from .losses import LossSpec, ScoreInputs, mai_score, psnr, ssim
from .models import ModelGraph, build_csanet, build_smallnet, build_tuned_unet, load_checkpoint, save_checkpoint
from .tensor import Tensor

__all__ = [
    "LossSpec", "ModelGraph", "ScoreInputs", "Tensor",
    "build_csanet", "build_smallnet", "build_tuned_unet",
    "load_checkpoint", "mai_score", "psnr", "save_checkpoint", "ssim",
]
__version__ = "0.1.0"
