"""In-voxel transformer: an encoder over features of points sampled around a
ray's voxel chord, a max-pooled region feature, and a decoder that predicts
density and color for points sampled on the chord."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import EncodingSpec, Linear, positional_encode


@dataclass(frozen=True)
class TransformerConfig:
    num_blocks: int = 2
    model_dim: int = 256
    num_heads: int = 4
    S: int = 9
    P: int = 9
    radius_divisor: float = 4.0
    ff_mult: int = 2
    pos_freqs: int = 10

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.S < 1 or self.P < 1:
            raise ValueError(f"need S >= 1 and P >= 1, got S={self.S}, P={self.P}")


class LayerNorm:
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return dc.layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def parameters(self):
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o}

    def _split(self, x: Tensor) -> Tensor:
        lead, n, dm = x.shape[:-2], x.shape[-2], x.shape[-1]
        x = dc.reshape(x, lead + (n, self.heads, dm // self.heads))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return dc.transpose(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = dc.transpose(x, axes)
        return dc.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))

    def __call__(self, xq: Tensor, xkv: Tensor) -> Tensor:
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        out, _ = attention(q, k, v)
        return self.o(self._merge(out))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    Shapes ``(..., Nq, d)``, ``(..., Nk, d)``, ``(..., Nk, dv)``. Returns the
    output and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: inconsistent shapes q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    logits = dc.scale(dc.matmul(q, dc.swap_last(k)), 1.0 / np.sqrt(d))
    w = dc.softmax(logits, axis=-1)
    return dc.matmul(w, v), w


class FeedForward:
    def __init__(self, dim: int, mult: int, rng):
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def __call__(self, x):
        return self.fc2(dc.relu(self.fc1(x)))

    def parameters(self):
        return {"fc1": self.fc1, "fc2": self.fc2}


class EncoderBlock:
    def __init__(self, cfg: TransformerConfig, rng):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_mult, rng)

    def __call__(self, x):
        y = self.ln1(x)
        x = x + self.attn(y, y)
        return x + self.ff(self.ln2(x))

    def parameters(self):
        return {"ln1": self.ln1, "attn": self.attn, "ln2": self.ln2, "ff": self.ff}


class DecoderBlock:
    def __init__(self, cfg: TransformerConfig, rng):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln3 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_mult, rng)

    def __call__(self, x, h):
        y = self.ln1(x)
        x = x + self.self_attn(y, y)
        x = x + self.cross_attn(self.ln2(x), h)
        return x + self.ff(self.ln3(x))

    def parameters(self):
        return {"ln1": self.ln1, "self_attn": self.self_attn, "ln2": self.ln2,
                "cross_attn": self.cross_attn, "ln3": self.ln3, "ff": self.ff}


class CvtParams:
    """Encoder blocks, decoder embedding and blocks, and the two output heads."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator,
                 zero_heads: bool = False):
        self.cfg = cfg
        self.enc_spec = EncodingSpec(cfg.pos_freqs)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.embed = Linear(self.enc_spec.out_dim(), cfg.model_dim, rng)
        self.decoder = [DecoderBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.density_head = Linear(cfg.model_dim, 1, rng, zero=zero_heads)
        self.color_head = Linear(cfg.model_dim, 3, rng, zero=zero_heads)

    def parameters(self):
        d = {f"enc{i}": b for i, b in enumerate(self.encoder)}
        d["embed"] = self.embed
        d.update({f"dec{i}": b for i, b in enumerate(self.decoder)})
        d.update(density_head=self.density_head, color_head=self.color_head)
        return d


@dataclass
class DecodedRadiance:
    sigma_hat: Tensor      # (..., P)
    color_hat: Tensor      # (..., P, 3)
    t_values: np.ndarray   # (..., P) ascending


def encode(params: CvtParams, surround_g) -> Tensor:
    """Self-attention over the ``S`` surrounding-point features, shape kept."""
    h = dc.as_tensor(surround_g)
    if h.shape[-1] != params.cfg.model_dim:
        raise ValueError(f"encode: feature size {h.shape[-1]} != model_dim "
                         f"{params.cfg.model_dim}")
    for block in params.encoder:
        h = block(h)
    return h


def pool(h: Tensor) -> Tensor:
    """Region feature: componentwise max over the point axis."""
    return dc.max(h, axis=-2)


def decode(params: CvtParams, ray_points, h: Tensor, t_values) -> DecodedRadiance:
    """Predict density and color at ``ray_points`` (shape ``(..., P, 3)``)
    by attending to the encoded surrounding features ``h``."""
    ray_points = np.asarray(ray_points)
    t_values = np.asarray(t_values)
    lead, P = ray_points.shape[:-2], ray_points.shape[-2]
    if P == 0:
        return DecodedRadiance(Tensor(np.zeros(lead + (0,))),
                               Tensor(np.zeros(lead + (0, 3))), t_values)
    x = Tensor(positional_encode(ray_points, params.enc_spec))
    y = dc.relu(params.embed(x))
    for block in params.decoder:
        y = block(y, h)
    sigma = dc.softplus(params.density_head(y))
    sigma = dc.reshape(sigma, sigma.shape[:-1])
    color = dc.sigmoid(params.color_head(dc.relu(y)))
    return DecodedRadiance(sigma, color, t_values)
