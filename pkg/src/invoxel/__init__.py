"""Sparse-view radiance fields with an in-voxel transformer and a voxel
contrastive loss, on a small numpy autodiff core."""
from ._accel import backend
from .trainer import TrainConfig, init_state, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = ["TrainConfig", "backend", "init_state", "load_checkpoint", "save_checkpoint",
           "train", "train_step", "__version__"]
