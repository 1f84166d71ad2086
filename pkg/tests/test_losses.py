import math

import numpy as np
import pytest

from invoxel import diffcore as dc
from invoxel.diffcore import Tensor
from invoxel.losses import LossConfig, contrastive_loss, mse_loss, pick_positives, total_loss


def _reference_contrast(f, pos, tau):
    """Per-anchor loops over the explicit InfoNCE sum."""
    V, R, _ = f.shape
    unit = f / np.linalg.norm(f, axis=-1, keepdims=True)
    total = 0.0
    for i in range(V):
        for j in range(R):
            a = unit[i, j]
            s_pos = a @ unit[i, pos[i, j]] / tau
            terms = [s_pos] + [a @ unit[k, m] / tau for k in range(V) if k != i for m in range(R)]
            total += -s_pos + math.log(sum(math.exp(x) for x in terms))
    return total


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
def test_identical_features_closed_form(tau):
    f = Tensor(np.ones((2, 2, 8)))
    cfg = LossConfig(tau=tau, normalize_contrast=False)
    loss = contrastive_loss(f, cfg, np.random.default_rng(0)).item()
    assert loss == pytest.approx(4 * math.log(3), abs=1e-6)


@pytest.mark.parametrize("normalize", [True, False])
def test_matches_explicit_sum(rng, normalize):
    with dc.default_dtype(np.float64):
        f = rng.standard_normal((4, 3, 5))
        pos = pick_positives(4, 3, rng)
        cfg = LossConfig(tau=0.2, normalize_contrast=normalize)
        got = contrastive_loss(Tensor(f), cfg, None, positives=pos).item()
    want = _reference_contrast(f, pos, 0.2) / (12 if normalize else 1)
    assert got == pytest.approx(want, rel=1e-9)


def test_positives_are_other_rays_of_same_voxel(rng):
    pos = pick_positives(50, 4, rng)
    assert np.all(pos != np.arange(4)[None]) and pos.min() >= 0 and pos.max() < 4
    counts = np.bincount(pick_positives(2000, 3, rng)[:, 0], minlength=3)
    assert counts[0] == 0 and abs(counts[1] - counts[2]) < 200


def test_separated_voxels_score_lower_than_mixed(rng):
    cfg = LossConfig(tau=0.1)
    sep = np.zeros((2, 3, 2))
    sep[0, :, 0] = 1.0
    sep[1, :, 1] = 1.0
    mixed = rng.standard_normal((2, 3, 2))
    assert contrastive_loss(Tensor(sep), cfg, rng).item() < contrastive_loss(Tensor(mixed), cfg, rng).item()


def test_degenerate_batches_rejected(rng):
    with pytest.raises(ValueError, match="R >= 2"):
        contrastive_loss(Tensor(np.ones((3, 1, 4))), LossConfig(), rng)
    with pytest.raises(ValueError, match="V >= 2"):
        contrastive_loss(Tensor(np.ones((1, 3, 4))), LossConfig(), rng)
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)


def test_mse_normalization():
    p = Tensor(np.full((4, 3), 0.5))
    gt = np.zeros((4, 3))
    assert mse_loss(p, gt).item() == pytest.approx(0.75)
    assert mse_loss(p, gt, normalize=False).item() == pytest.approx(3.0)
    with pytest.raises(ValueError, match="mse_loss"):
        mse_loss(p, np.zeros((3, 3)))


def test_total_loss_weights_and_switches():
    m, c = Tensor(np.array(2.0)), Tensor(np.array(5.0))
    assert total_loss(m, c, LossConfig(lam=0.1)).item() == pytest.approx(2.5)
    assert total_loss(m, c, LossConfig(lam=0.0)) is m
    assert total_loss(m, c, LossConfig(contrastive_enabled=False)) is m
    assert total_loss(m, None, LossConfig()) is m
