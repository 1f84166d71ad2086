"""Volume rendering: compositing, inverse-CDF importance sampling and the
insertion of decoder-predicted samples into a ray."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from . import diffcore as dc
from .diffcore import Tensor
from .geometry import stratified_from_uniform

DELTA_LAST = 1e10
TIE_EPS = 1e-7

UNIFORM, IMPORTANCE, DECODED = 0, 1, 2


@dataclass
class RaySampleList:
    t: np.ndarray        # (R, N) float64, ascending
    sigma: Tensor        # (R, N)
    color: Tensor        # (R, N, 3)
    source: np.ndarray   # (R, N) int8 tags


@dataclass
class RenderResult:
    color: Tensor             # (R, 3)
    acc: Tensor               # (R,)
    weights: Tensor           # (R, N)
    depth: np.ndarray         # (R,) expected t normalized by max(acc, 1e-8)
    depth_raw: np.ndarray     # (R,) sum_i w_i t_i
    transmittance: np.ndarray  # (R, N + 1); last column is T after the final sample
    t: np.ndarray             # (R, N)


# --------------------------------------------------------- weight kernel

def _weights_fwd_numpy(sigma, delta):
    tau = sigma.astype(np.float64) * delta
    excl = np.zeros((tau.shape[0], tau.shape[1] + 1))
    np.cumsum(tau, axis=1, out=excl[:, 1:])
    T = np.exp(-excl)
    w = T[:, :-1] * -np.expm1(-tau)
    return w, T


def _weights_bwd_numpy(g, w, T, delta):
    gw = g.astype(np.float64) * w
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    return delta * (T[:, 1:] * g - suffix)


@_accel.njit
def _weights_fwd_numba(sigma, delta):
    R, N = sigma.shape
    w = np.empty((R, N), np.float64)
    T = np.empty((R, N + 1), np.float64)
    for r in range(R):
        acc = 0.0
        T[r, 0] = 1.0
        for i in range(N):
            tau = np.float64(sigma[r, i]) * delta[r, i]
            w[r, i] = np.exp(-acc) * -np.expm1(-tau)
            acc += tau
            T[r, i + 1] = np.exp(-acc)
    return w, T


@_accel.njit
def _weights_bwd_numba(g, w, T, delta):
    R, N = w.shape
    out = np.empty((R, N), np.float64)
    for r in range(R):
        suffix = 0.0
        for i in range(N - 1, -1, -1):
            gi = np.float64(g[r, i])
            out[r, i] = delta[r, i] * (T[r, i + 1] * gi - suffix)
            suffix += gi * w[r, i]
    return out


def render_weights(sigma: Tensor, delta: np.ndarray, use_numba: bool | None = None):
    """Differentiable ``w_i = T_i (1 - exp(-sigma_i delta_i))`` over the last axis.

    Returns the weight tensor and the float64 transmittance array ``(R, N+1)``.
    """
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    lead = sigma.shape[:-1]
    s2 = sigma.data.reshape(-1, sigma.shape[-1])
    d2 = np.ascontiguousarray(np.broadcast_to(delta, sigma.shape), dtype=np.float64)
    d2 = d2.reshape(s2.shape)
    if use_numba:
        w, T = _weights_fwd_numba(np.ascontiguousarray(s2), d2)
    else:
        w, T = _weights_fwd_numpy(s2, d2)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(s2.shape))
        if use_numba:
            gs = _weights_bwd_numba(g2, w, T, d2)
        else:
            gs = _weights_bwd_numpy(g2, w, T, d2)
        return (gs.astype(sigma.data.dtype).reshape(sigma.shape),)

    out = dc.make_op("render_weights", (sigma,), w.astype(sigma.data.dtype).reshape(sigma.shape), bw)
    return out, T.reshape(lead + (sigma.shape[-1] + 1,))


# -------------------------------------------------------------- composite

def sample_deltas(t: np.ndarray, delta_last: float = DELTA_LAST) -> np.ndarray:
    d = np.empty_like(t, dtype=np.float64)
    d[..., :-1] = np.diff(t, axis=-1)
    d[..., -1] = delta_last
    return d


def composite(samples: RaySampleList, white_background: bool = False,
              delta_last: float = DELTA_LAST) -> RenderResult:
    """Alpha-composite the samples of each ray front to back.

    The last sample gets ``delta_last`` (effectively opaque at infinity).
    """
    if not np.all(np.isfinite(samples.sigma.data)) or not np.all(np.isfinite(samples.color.data)):
        raise ValueError("composite: non-finite density or color")
    t = np.asarray(samples.t, dtype=np.float64)
    w, T = render_weights(samples.sigma, sample_deltas(t, delta_last))
    wk = dc.reshape(w, w.shape + (1,))
    rgb = dc.sum(dc.mul(wk, samples.color), axis=-2)
    acc = dc.sum(w, axis=-1)
    if white_background:
        rgb = rgb + dc.reshape(1.0 - acc, acc.shape + (1,))
    depth_raw = (w.data * t).sum(axis=-1)
    depth = depth_raw / np.maximum(acc.data, 1e-8)
    return RenderResult(color=rgb, acc=acc, weights=w, depth=depth, depth_raw=depth_raw,
                        transmittance=T, t=t)


# -------------------------------------------------------------- sampling

def importance_sample(weights, bins, Nf: int, rng: np.random.Generator | None) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant density over ``bins``.

    ``weights`` is ``(..., N)``, ``bins`` the ``(..., N+1)`` edges. A floor of
    1e-5 is added to every weight. Rays whose weights are all zero fall back
    to stratified sampling of the whole bin range, consuming the same draws
    as :func:`stratified_sample` would. Without ``rng`` the uniforms are the
    deterministic quantiles ``(k + 0.5) / Nf``.
    Output is sorted ascending per ray.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bins = np.asarray(bins, dtype=np.float64)
    lead, N = weights.shape[:-1], weights.shape[-1]
    if bins.shape != lead + (N + 1,):
        raise ValueError(f"importance_sample: bins {bins.shape} do not match weights {weights.shape}")
    if rng is None:
        u = np.broadcast_to((np.arange(Nf) + 0.5) / Nf, lead + (Nf,)).copy()
    else:
        u = rng.random(lead + (Nf,))
    w2 = weights.reshape(-1, N)
    b2 = bins.reshape(-1, N + 1)
    u2 = u.reshape(-1, Nf)
    R = len(w2)
    pdf = w2 + 1e-5
    pdf = pdf / pdf.sum(axis=1, keepdims=True)
    cdf = np.zeros((R, N + 1))
    np.cumsum(pdf, axis=1, out=cdf[:, 1:])
    cdf[:, -1] = 1.0
    # row-offset trick: one flat searchsorted for all rays
    off = 2.0 * np.arange(R)[:, None]
    pos = np.searchsorted((cdf + off).ravel(), (u2 + off).ravel(), side="right").reshape(R, Nf)
    pos -= (np.arange(R) * (N + 1))[:, None]
    below = np.clip(pos - 1, 0, N - 1)
    rows = np.arange(R)[:, None]
    c_lo, c_hi = cdf[rows, below], cdf[rows, below + 1]
    b_lo, b_hi = b2[rows, below], b2[rows, below + 1]
    denom = np.where(c_hi - c_lo < 1e-12, 1.0, c_hi - c_lo)
    frac = np.clip((u2 - c_lo) / denom, 0.0, 1.0)
    t = np.sort(b_lo + frac * (b_hi - b_lo), axis=1)
    empty = w2.sum(axis=1) <= 0
    if empty.any():
        # same draws as stratified_sample(near, far, Nf, rng); midpoints when deterministic
        jitter = u2[empty] if rng is not None else np.full((int(empty.sum()), Nf), 0.5)
        t[empty] = stratified_from_uniform(b2[empty, 0], b2[empty, -1], jitter)
    return t.reshape(lead + (Nf,))


# -------------------------------------------------------------- insertion

def _strictly_increasing(t: np.ndarray, eps: float = TIE_EPS) -> np.ndarray:
    """Push non-increasing entries to ``previous + eps``; other entries untouched."""
    bad = np.any(np.diff(t, axis=-1) <= 0, axis=-1)
    if not bad.any():
        return t
    t = t.copy()
    for row in np.argwhere(np.atleast_1d(bad)):
        r = t[tuple(row)] if t.ndim > 1 else t
        for i in range(1, len(r)):
            if r[i] <= r[i - 1]:
                r[i] = r[i - 1] + eps
    return t


def merge_samples(a: RaySampleList, b: RaySampleList) -> RaySampleList:
    """Merge two per-ray sample lists by ``t``; on ties ``a`` comes first."""
    t = np.concatenate([a.t, b.t], axis=-1)
    order = np.argsort(t, axis=-1, kind="stable")
    t = np.take_along_axis(t, order, axis=-1)
    sigma = dc.take_along(dc.concat([a.sigma, b.sigma], axis=-1), order, axis=-1)
    color = dc.take_along(dc.concat([a.color, b.color], axis=-2), order[..., None], axis=-2)
    source = np.take_along_axis(np.concatenate([a.source, b.source], axis=-1), order, axis=-1)
    return RaySampleList(_strictly_increasing(t), sigma, color, source)


def insert_and_composite(fine: RaySampleList, decoded, white_background: bool = False) -> RenderResult:
    """Insert decoded samples (``sigma_hat``, ``color_hat``, ``t_values``) into
    the fine samples of each ray and composite the merged list."""
    if decoded.t_values.shape[-1] == 0:
        return composite(fine, white_background)
    extra = RaySampleList(np.asarray(decoded.t_values, dtype=np.float64), decoded.sigma_hat,
                          decoded.color_hat,
                          np.full(decoded.t_values.shape, DECODED, dtype=np.int8))
    return composite(merge_samples(fine, extra), white_background)
