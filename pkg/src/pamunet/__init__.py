"""Lightweight attention U-Net for binary segmentation, built on a small
reverse-mode autodiff engine, with a deterministic trainer, overlap metrics,
analytic FLOPs accounting and CKA representation analysis."""

from pamunet.tensor import Tensor, backward, no_grad, using_dtype
from pamunet.model import PAMUNet, PAMUNetConfig, build, predict_mask
from pamunet.train import (TrainConfig, evaluate, load_checkpoint,
                           run_training, save_checkpoint)

__all__ = [
    "Tensor", "backward", "no_grad", "using_dtype",
    "PAMUNet", "PAMUNetConfig", "build", "predict_mask",
    "TrainConfig", "run_training", "evaluate", "save_checkpoint", "load_checkpoint",
]
__version__ = "0.1.0"
