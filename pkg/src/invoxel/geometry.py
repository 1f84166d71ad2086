"""Rays, boxes and the point samplers used along and around rays.

Geometry is computed in float64; values are cast to the tensor dtype only
when they enter the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = 1e10

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, |d| = {np.linalg.norm(d)}")
        if not 0 <= self.near < self.far:
            raise ValueError(f"need 0 <= near < far, got near={self.near}, far={self.far}")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)


@dataclass
class SegmentSamples:
    """Points ``x_in + t * (x_out - x_in)`` with ascending ``t`` in [0, 1]."""
    points: np.ndarray
    t_values: np.ndarray


def intersect_boxes(origins, dirs, near, far, box_min, box_max):
    """Slab test for many rays against boxes (all arguments broadcast).

    Returns ``(t_in, t_out, hit)``. Components of a direction equal to zero
    never divide: such a slab either contains the origin (no constraint) or
    the ray misses.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    zero = d == 0.0
    safe = np.where(zero, 1.0, d)
    with np.errstate(over="ignore"):     # denormal components: +-inf is the right answer
        t0 = (lo - o) / safe
        t1 = (hi - o) / safe
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t_in = np.maximum(tmin.max(axis=-1), near)
    t_out = np.minimum(tmax.min(axis=-1), far)
    hit = t_in < t_out
    return t_in, t_out, hit


def ray_aabb_intersect(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    """Entry/exit parameters of ``ray`` through ``box``, clamped to [near, far].

    ``None`` on a miss. When the origin is inside the box the entry clamps to
    ``ray.near``.
    """
    t_in, t_out, hit = intersect_boxes(ray.origin, ray.direction, ray.near, ray.far,
                                       box.min, box.max)
    if not hit:
        return None
    return float(t_in), float(t_out)


def sphere_sample(center, radius: float, S: int, rng: np.random.Generator) -> np.ndarray:
    """``S`` points uniform in the ball around each center.

    ``center`` may carry leading batch dimensions; the result has shape
    ``center.shape[:-1] + (S, 3)``. Uses rejection from the bounding cube.
    """
    if radius < 0:
        raise ValueError(f"sphere_sample: radius must be >= 0, got {radius}")
    if S < 1:
        raise ValueError(f"sphere_sample: S must be >= 1, got {S}")
    center = np.asarray(center, dtype=np.float64)
    lead = center.shape[:-1]
    total = int(np.prod(lead, dtype=np.int64)) * S
    out = np.empty((total, 3))
    filled = 0
    while filled < total:
        need = total - filled
        cand = rng.uniform(-1.0, 1.0, size=(2 * need + 8, 3))
        cand = cand[(cand * cand).sum(axis=1) <= 1.0][:need]
        out[filled:filled + len(cand)] = cand
        filled += len(cand)
    return center[..., None, :] + radius * out.reshape(lead + (S, 3))


def line_sample(x_in, x_out, P: int, rng: np.random.Generator) -> SegmentSamples:
    """``P`` uniform points on the segment(s) from ``x_in`` to ``x_out``, sorted."""
    x_in = np.asarray(x_in, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    lead = np.broadcast_shapes(x_in.shape, x_out.shape)[:-1]
    u = np.sort(rng.random(lead + (P,)), axis=-1)
    pts = x_in[..., None, :] + u[..., None] * (x_out - x_in)[..., None, :]
    return SegmentSamples(points=pts, t_values=u)


def stratified_sample(near, far, N: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One sample per equal-width bin of [near, far); bin midpoints if ``rng`` is None.

    ``near``/``far`` may be arrays; the result has shape ``near.shape + (N,)``.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    shape = np.broadcast_shapes(near.shape, far.shape) + (N,)
    u = np.full(shape, 0.5) if rng is None else rng.random(shape)
    w = (far - near)[..., None] / N
    return near[..., None] + (np.arange(N) + u) * w


def stratified_from_uniform(near, far, u: np.ndarray) -> np.ndarray:
    """Stratified samples from already-drawn jitter ``u`` (shape ``(..., N)``)."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    N = u.shape[-1]
    w = (far - near)[..., None] / N
    return near[..., None] + (np.arange(N) + u) * w
