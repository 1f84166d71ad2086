"""Positional encoding and the radiance-field MLP returning color, density and
the density-layer feature used by the transformer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class EncodingSpec:
    num_freqs: int = 10
    include_input: bool = True

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (int(self.include_input) + 2 * self.num_freqs)


def positional_encode(x, spec: EncodingSpec) -> np.ndarray:
    """``[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]``.

    Works on the last axis; frequencies are plain powers of two (radians).
    Computed in the working float dtype.
    """
    x = np.asarray(x, dtype=dc.get_dtype())
    parts = [x] if spec.include_input else []
    for k in range(spec.num_freqs):
        f = 2.0 ** k
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    if not parts:
        return np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)
    return np.concatenate(parts, axis=-1)


# --------------------------------------------------------------- layers

class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.matmul(x, self.weight) + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested ``parameters()`` dicts into dotted names, in a stable order."""
    out: dict[str, Tensor] = {}
    for name, p in obj.parameters().items():
        key = f"{prefix}{name}"
        if isinstance(p, Tensor):
            out[key] = p
        else:
            out.update(named_parameters(p, key + "."))
    return out


# ---------------------------------------------------------------- field

@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 256
    skip: int = 4
    color_width: int = 128
    pos_freqs: int = 10
    dir_freqs: int = 4

    @property
    def pos_enc(self) -> EncodingSpec:
        return EncodingSpec(self.pos_freqs)

    @property
    def dir_enc(self) -> EncodingSpec:
        return EncodingSpec(self.dir_freqs)


@dataclass
class FieldOutput:
    color: Tensor    # (..., 3)
    sigma: Tensor    # (...)
    feature: Tensor  # (..., width)


class FieldParams:
    """Trunk of ``depth`` ReLU layers with the encoded position concatenated
    back in after layer ``skip``; softplus density head on the trunk output;
    color branch on ``[trunk output, encoded direction]``."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator | None = None,
                 zero: bool = False):
        self.cfg = cfg
        px = cfg.pos_enc.out_dim()
        pd = cfg.dir_enc.out_dim()
        self.trunk = []
        n_in = px
        for i in range(cfg.depth):
            self.trunk.append(Linear(n_in, cfg.width, rng, zero))
            n_in = cfg.width + (px if i == cfg.skip and i < cfg.depth - 1 else 0)
        self.density = Linear(n_in, 1, rng, zero)
        self.color_hidden = Linear(n_in + pd, cfg.color_width, rng, zero)
        self.color_out = Linear(cfg.color_width, 3, rng, zero)
        self.feature_dim = n_in

    def parameters(self):
        d = {f"trunk{i}": layer for i, layer in enumerate(self.trunk)}
        d.update(density=self.density, color_hidden=self.color_hidden,
                 color_out=self.color_out)
        return d


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"field_forward: non-finite {name}")


def field_features(params: FieldParams, x) -> Tensor:
    """Trunk activation ``g`` at positions ``x`` (no view direction involved)."""
    x = np.asarray(x)
    _check_finite("position", x)
    enc = Tensor(positional_encode(x, params.cfg.pos_enc))
    h = enc
    for i, layer in enumerate(params.trunk):
        h = dc.relu(layer(h))
        if i == params.cfg.skip and i != len(params.trunk) - 1:
            h = dc.concat([enc, h], axis=-1)
    return h


def field_forward(params: FieldParams, x, d) -> FieldOutput:
    """Evaluate the field at positions ``x`` viewed along unit directions ``d``.

    ``x`` has shape ``(..., 3)``; ``d`` is ``(..., 3)`` with matching leading
    dims.
    """
    x = np.asarray(x)
    d = np.asarray(d)
    _check_finite("direction", d)
    g = field_features(params, x)
    sigma = dc.softplus(params.density(g))
    sigma = dc.reshape(sigma, sigma.shape[:-1])
    denc = np.broadcast_to(positional_encode(d, params.cfg.dir_enc),
                           x.shape[:-1] + (params.cfg.dir_enc.out_dim(),))
    h = dc.concat([g, Tensor(denc)], axis=-1)
    h = dc.relu(params.color_hidden(h))
    color = dc.sigmoid(params.color_out(h))
    return FieldOutput(color=color, sigma=sigma, feature=g)
