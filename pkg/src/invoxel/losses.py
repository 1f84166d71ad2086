"""Photometric MSE, the voxel contrastive loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

_MASKED = -1e9


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    tau: float = 0.1
    contrastive_enabled: bool = True
    normalize_mse: bool = True
    normalize_contrast: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"contrastive weight must be >= 0, got {self.lam}")


def mse_loss(pred: Tensor, gt, normalize: bool = True) -> Tensor:
    """Sum of squared color errors; divided by the ray count if ``normalize``."""
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mse_loss: prediction {pred.shape} vs ground truth {gt.shape}")
    diff = pred - Tensor(gt)
    loss = dc.sum(diff * diff)
    if normalize:
        n_rays = int(np.prod(pred.shape[:-1]))
        loss = dc.scale(loss, 1.0 / max(n_rays, 1))
    return loss


def pick_positives(V: int, R: int, rng: np.random.Generator) -> np.ndarray:
    """For each anchor ``(i, j)``, a uniformly random ``k != j`` within voxel ``i``."""
    k = rng.integers(0, R - 1, size=(V, R))
    return k + (k >= np.arange(R)[None, :])


def contrastive_loss(features: Tensor, cfg: LossConfig, rng: np.random.Generator,
                     positives: np.ndarray | None = None) -> Tensor:
    """Voxel contrastive loss over region features of shape ``(V, R, D)``.

    Each anchor is pulled toward one random feature of its own voxel and
    pushed from every feature of the other voxels, with cosine similarity
    scaled by ``1/tau``. Sums over all anchors (divided by ``V*R`` when
    ``cfg.normalize_contrast``).
    """
    if features.ndim != 3:
        raise ValueError(f"contrastive_loss: expected (V, R, D) features, got {features.shape}")
    V, R, D = features.shape
    if R < 2:
        raise ValueError(f"contrastive_loss: need R >= 2 rays per voxel for a positive, got R={R}")
    if V < 2:
        raise ValueError(f"contrastive_loss: need V >= 2 voxels for negatives, got V={V}")
    if positives is None:
        positives = pick_positives(V, R, rng)
    n = V * R
    voxel = np.repeat(np.arange(V), R)
    pos_idx = (voxel * R + positives.reshape(-1))
    onehot = np.zeros((n, n))
    onehot[np.arange(n), pos_idx] = 1.0
    keep = (voxel[:, None] != voxel[None, :]) | (onehot > 0)
    # logits reach 1/tau, so float32 cosines would already be off by ~1e-6;
    # the n x n block is small enough to do in float64
    with dc.default_dtype(np.float64):
        flat = dc.reshape(dc.cast(features), (n, D))
        sim = dc.cosine_similarity(dc.reshape(flat, (n, 1, D)), dc.reshape(flat, (1, n, D)),
                                   axis=-1)
        logits = dc.scale(sim, 1.0 / cfg.tau)
        s_pos = dc.sum(logits * Tensor(onehot), axis=-1)
        lse = dc.logsumexp(logits + Tensor(np.where(keep, 0.0, _MASKED)), axis=-1)
        loss = dc.sum(lse - s_pos)
        if cfg.normalize_contrast:
            loss = dc.scale(loss, 1.0 / n)
    return dc.cast(loss)


def total_loss(mse: Tensor, contrast: Tensor | None, cfg: LossConfig) -> Tensor:
    if contrast is None or not cfg.contrastive_enabled or cfg.lam == 0:
        return mse
    return mse + dc.scale(contrast, cfg.lam)
