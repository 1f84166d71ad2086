"""Image quality metrics and the JSON evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: image shapes differ, {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``-10 log10(MSE)`` for images in [0, 1]; zero error reports ``PSNR_CAP``."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable correlation keeping only fully covered windows."""
    n = len(k)
    H, W = img.shape
    rows = sum(k[i] * img[i:H - n + 1 + i] for i in range(n))
    return sum(k[j] * rows[:, j:W - n + 1 + j] for j in range(n))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM on the channel-mean grayscale, averaged over
    valid windows."""
    a, b = _pair(a, b, "ssim")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.ndim != 2:
        raise ValueError(f"ssim: expected HxW or HxWxC images, got {a.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"ssim: image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    k = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    va = _filter_valid(a * a, k) - mu_a * mu_a
    vb = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    views: list[str]
    psnr: list[float]
    ssim: list[float]
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    config_digest: str = ""
    iteration: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, pairs: dict, **kw) -> "MetricsReport":
        """From ``{view name: (prediction, ground truth)}``; views sorted by name."""
        names = sorted(pairs)
        p = [psnr(*pairs[n]) for n in names]
        s = [ssim(*pairs[n]) for n in names]
        return cls(names, p, s, float(np.mean(p)) if p else 0.0,
                   float(np.mean(s)) if s else 0.0, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))
