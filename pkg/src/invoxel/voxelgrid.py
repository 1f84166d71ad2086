"""Uniform voxelization of the scene bound, DDA traversal and the ray index.

Voxel ids are flat: ``id = (ix * res + iy) * res + iz``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _accel
from .geometry import Ray, intersect_boxes

# chords shorter than this (scene units) are treated as corner touches
MIN_CHORD = 1e-9
INDEX_MAGIC = b"CVTIDX1"


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 64
    scene_range: float = 6.0
    origin: tuple[float, float, float] = (-3.0, -3.0, -3.0)

    def __post_init__(self):
        if int(self.resolution) < 1:
            raise ValueError(f"grid resolution must be >= 1, got {self.resolution}")
        if not self.scene_range > 0:
            raise ValueError(f"scene_range must be > 0, got {self.scene_range}")
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def voxel_size(self) -> float:
        return self.scene_range / self.resolution

    @property
    def bound_min(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def bound_max(self) -> np.ndarray:
        return self.bound_min + self.scene_range

    @property
    def num_voxels(self) -> int:
        return self.resolution ** 3

    def voxel_index(self, voxel_id):
        """Flat id(s) to integer ``(..., 3)`` cell coordinates."""
        return np.stack(np.unravel_index(np.asarray(voxel_id), (self.resolution,) * 3), axis=-1)

    def voxel_id(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.ravel_multi_index(tuple(np.moveaxis(ijk, -1, 0)), (self.resolution,) * 3)

    def voxel_bounds(self, voxel_id) -> tuple[np.ndarray, np.ndarray]:
        ijk = self.voxel_index(voxel_id)
        lo = self.bound_min + ijk * self.voxel_size
        hi = self.bound_min + (ijk + 1) * self.voxel_size
        return lo, hi


# ------------------------------------------------------------------ DDA

@_accel.njit
def _walk_numba(o, d, near, far, gmin, vs, res, vox, tin, tout, start, write):
    # slab test against the scene bound
    t0 = near
    t1 = far
    for a in range(3):
        lo = gmin[a]
        hi = gmin[a] + vs * res
        if d[a] == 0.0:
            if o[a] < lo or o[a] > hi:
                return 0
        else:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if not t0 < t1:
        return 0
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3, np.float64)
    for a in range(3):
        p = o[a] + t0 * d[a]
        c = int(math.floor((p - gmin[a]) / vs))
        if c < 0:
            c = 0
        if c > res - 1:
            c = res - 1
        idx[a] = c
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (gmin[a] + (c + 1) * vs - o[a]) / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (gmin[a] + c * vs - o[a]) / d[a]
        else:
            step[a] = 0
            tmax[a] = np.inf
    n = 0
    t_enter = t0
    while True:
        ax = 0
        if tmax[1] < tmax[ax]:
            ax = 1
        if tmax[2] < tmax[ax]:
            ax = 2
        t_exit = tmax[ax]
        if t1 < t_exit:
            t_exit = t1
        if t_exit - t_enter > 1e-9:
            if write:
                vox[start + n] = (idx[0] * res + idx[1]) * res + idx[2]
                tin[start + n] = t_enter
                tout[start + n] = t_exit
            n += 1
        if t_exit >= t1:
            break
        c = idx[ax] + step[ax]
        if c < 0 or c >= res:
            break
        idx[ax] = c
        if step[ax] > 0:
            tmax[ax] = (gmin[ax] + (c + 1) * vs - o[ax]) / d[ax]
        else:
            tmax[ax] = (gmin[ax] + c * vs - o[ax]) / d[ax]
        if t_exit > t_enter:
            t_enter = t_exit
    return n


@_accel.njit
def _dda_batch_numba(origins, dirs, near, far, gmin, vs, res):
    nr = origins.shape[0]
    counts = np.zeros(nr, np.int64)
    dummy_i = np.empty(0, np.int64)
    dummy_f = np.empty(0, np.float64)
    for r in range(nr):
        counts[r] = _walk_numba(origins[r], dirs[r], near[r], far[r], gmin, vs, res,
                                dummy_i, dummy_f, dummy_f, 0, False)
    total = counts.sum()
    ray = np.empty(total, np.int64)
    vox = np.empty(total, np.int64)
    tin = np.empty(total, np.float64)
    tout = np.empty(total, np.float64)
    pos = 0
    for r in range(nr):
        n = _walk_numba(origins[r], dirs[r], near[r], far[r], gmin, vs, res,
                        vox, tin, tout, pos, True)
        for k in range(n):
            ray[pos + k] = r
        pos += n
    return ray, vox, tin, tout


def _dda_batch_numpy(origins, dirs, near, far, gmin, vs, res):
    """Vectorized DDA: all rays advance one cell per iteration."""
    o, d = origins, dirs
    nr = len(o)
    t0, t1, hit = intersect_boxes(o, d, near, far, gmin, gmin + vs * res)
    # the slab test above treats boundaries identically to the numba walk
    rays = np.nonzero(hit)[0]
    o, d, t0, t1 = o[rays], d[rays], t0[rays], t1[rays]
    p = o + t0[:, None] * d
    idx = np.clip(np.floor((p - gmin) / vs).astype(np.int64), 0, res - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        bnd = gmin + (idx + (step > 0)) * vs
        tmax = np.where(step != 0, (bnd - o) / np.where(d == 0, 1.0, d), np.inf)
    t_enter = t0.copy()
    active = np.arange(len(rays))
    out_ray, out_vox, out_tin, out_tout, out_ord = [], [], [], [], []
    it = 0
    while active.size:
        tm = tmax[active]
        ax = np.argmin(tm, axis=1)  # first minimal axis, like the scalar walk
        t_exit = np.minimum(tm[np.arange(active.size), ax], t1[active])
        te = t_enter[active]
        keep = t_exit - te > MIN_CHORD
        if keep.any():
            a = active[keep]
            ii = idx[a]
            out_ray.append(rays[a])
            out_vox.append((ii[:, 0] * res + ii[:, 1]) * res + ii[:, 2])
            out_tin.append(te[keep])
            out_tout.append(t_exit[keep])
            out_ord.append(np.full(a.size, it))
        cont = t_exit < t1[active]
        newc = idx[active, ax] + step[active, ax]
        cont &= (newc >= 0) & (newc < res)
        a = active[cont]
        axc = ax[cont]
        idx[a, axc] = newc[cont]
        s = step[a, axc]
        bnd = gmin[axc] + (idx[a, axc] + (s > 0)) * vs
        tmax[a, axc] = (bnd - o[a, axc]) / d[a, axc]
        te_new = t_exit[cont]
        t_enter[a] = np.where(te_new > t_enter[a], te_new, t_enter[a])
        active = a
        it += 1
    if not out_ray:
        e = np.empty(0, np.int64)
        return e, e.copy(), np.empty(0), np.empty(0)
    ray = np.concatenate(out_ray)
    order = np.lexsort((np.concatenate(out_ord), ray))
    return (ray[order], np.concatenate(out_vox)[order],
            np.concatenate(out_tin)[order], np.concatenate(out_tout)[order])


def dda_batch(origins, dirs, near, far, grid: GridSpec, use_numba: bool | None = None):
    """Traverse many rays; returns flat ``(ray_idx, voxel_id, t_enter, t_exit)``.

    Entries are grouped by ray and ordered by ``t`` within a ray.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.ascontiguousarray(np.broadcast_to(np.asarray(near, np.float64), (n,)))
    far = np.ascontiguousarray(np.broadcast_to(np.asarray(far, np.float64), (n,)))
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    fn = _dda_batch_numba if use_numba else _dda_batch_numpy
    return fn(origins, dirs, near, far, grid.bound_min, float(grid.voxel_size), grid.resolution)


def dda_traverse(ray: Ray, grid: GridSpec) -> list[tuple[int, float, float]]:
    """Voxels pierced by ``ray`` in order, as ``(voxel_id, t_enter, t_exit)``.

    A ray that misses the scene bound yields an empty list.
    """
    _, vox, tin, tout = dda_batch(ray.origin[None], ray.direction[None], ray.near, ray.far, grid)
    return [(int(v), float(a), float(b)) for v, a, b in zip(vox, tin, tout)]


# ---------------------------------------------------------------- index

@dataclass
class RayTable:
    origins: np.ndarray   # (N, 3) float64
    dirs: np.ndarray      # (N, 3) float64, unit
    near: np.ndarray      # (N,)
    far: np.ndarray       # (N,)
    colors: np.ndarray    # (N, 3) float32 in [0, 1]

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def build(cls, origins, dirs, near, far, colors) -> "RayTable":
        origins = np.asarray(origins, np.float64).reshape(-1, 3)
        n = len(origins)
        return cls(origins=origins,
                   dirs=np.asarray(dirs, np.float64).reshape(-1, 3),
                   near=np.broadcast_to(np.asarray(near, np.float64), (n,)).copy(),
                   far=np.broadcast_to(np.asarray(far, np.float64), (n,)).copy(),
                   colors=np.asarray(colors, np.float32).reshape(-1, 3))


@dataclass
class VoxelRayIndex:
    """CSR map from occupied voxel to the rays crossing it.

    ``voxel_ids[k]`` owns entries ``offsets[k]:offsets[k+1]`` of ``ray_ids``,
    ``t_in`` and ``t_out``, sorted by ray id.
    """
    grid: GridSpec
    voxel_ids: np.ndarray
    offsets: np.ndarray
    ray_ids: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    rays: RayTable

    @property
    def num_voxels(self) -> int:
        return len(self.voxel_ids)

    @property
    def num_pairs(self) -> int:
        return len(self.ray_ids)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def entries(self, voxel_id: int) -> list[tuple[int, float, float]]:
        k = np.searchsorted(self.voxel_ids, voxel_id)
        if k == len(self.voxel_ids) or self.voxel_ids[k] != voxel_id:
            return []
        s, e = self.offsets[k], self.offsets[k + 1]
        return [(int(r), float(a), float(b))
                for r, a, b in zip(self.ray_ids[s:e], self.t_in[s:e], self.t_out[s:e])]

    def validate(self, check_geometry: bool = True) -> None:
        """Raise ``ValueError`` if any structural or geometric invariant fails."""
        K = len(self.voxel_ids)
        if self.offsets.shape != (K + 1,) or self.offsets[0] != 0 \
                or self.offsets[-1] != len(self.ray_ids) or np.any(np.diff(self.offsets) < 1):
            raise ValueError("index: offsets malformed or a voxel has no rays")
        if K and (np.any(np.diff(self.voxel_ids) <= 0) or self.voxel_ids[0] < 0
                  or self.voxel_ids[-1] >= self.grid.num_voxels):
            raise ValueError("index: voxel ids unsorted, duplicated or out of range")
        if len(self.ray_ids) and (self.ray_ids.min() < 0 or self.ray_ids.max() >= len(self.rays)):
            raise ValueError("index: ray id out of range")
        if np.any(self.t_out <= self.t_in):
            raise ValueError("index: empty chord stored")
        owner = np.repeat(np.arange(K), np.diff(self.offsets))
        if np.any((np.diff(self.ray_ids) <= 0) & (np.diff(owner) == 0)):
            raise ValueError("index: per-voxel ray lists must be strictly sorted by ray id")
        if check_geometry and len(self.ray_ids):
            lo, hi = self.grid.voxel_bounds(self.voxel_ids[owner])
            r = self.ray_ids
            a, b, hit = intersect_boxes(self.rays.origins[r], self.rays.dirs[r],
                                        self.rays.near[r], self.rays.far[r], lo, hi)
            if not hit.all() or np.abs(a - self.t_in).max() > 1e-5 \
                    or np.abs(b - self.t_out).max() > 1e-5:
                raise ValueError("index: stored chord disagrees with ray/voxel intersection")

    # -- persistence

    def save(self, path) -> None:
        buf = io.BytesIO()
        g = self.grid
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<i4d", g.resolution, g.scene_range, *g.origin))
        buf.write(struct.pack("<qqq", len(self.rays), len(self.voxel_ids), len(self.ray_ids)))
        for arr, dt in ((self.rays.origins, "<f8"), (self.rays.dirs, "<f8"),
                        (self.rays.near, "<f8"), (self.rays.far, "<f8"),
                        (self.rays.colors, "<f4"), (self.voxel_ids, "<i8"),
                        (self.offsets, "<i8"), (self.ray_ids, "<i8"),
                        (self.t_in, "<f8"), (self.t_out, "<f8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "VoxelRayIndex":
        raw = Path(path).read_bytes()
        if raw[:len(INDEX_MAGIC)] != INDEX_MAGIC:
            raise ValueError(f"{path}: not a voxel index file (bad magic)")
        pos = len(INDEX_MAGIC)

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(raw):
                raise ValueError(f"{path}: truncated index file")
            vals = struct.unpack_from(fmt, raw, pos)
            pos += size
            return vals

        def arr(dt, count, shape):
            nonlocal pos
            nbytes = np.dtype(dt).itemsize * count
            if pos + nbytes > len(raw):
                raise ValueError(f"{path}: truncated index file")
            a = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape)
            pos += nbytes
            return a.astype(np.dtype(dt).newbyteorder("="))

        res, rng_, ox, oy, oz = take("<i4d")
        nr, nk, nm = take("<qqq")
        grid = GridSpec(res, rng_, (ox, oy, oz))
        rays = RayTable(arr("<f8", 3 * nr, (nr, 3)), arr("<f8", 3 * nr, (nr, 3)),
                        arr("<f8", nr, (nr,)), arr("<f8", nr, (nr,)),
                        arr("<f4", 3 * nr, (nr, 3)))
        idx = cls(grid, arr("<i8", nk, (nk,)), arr("<i8", nk + 1, (nk + 1,)),
                  arr("<i8", nm, (nm,)), arr("<f8", nm, (nm,)), arr("<f8", nm, (nm,)), rays)
        if pos != len(raw):
            raise ValueError(f"{path}: trailing bytes after index payload")
        idx.validate()
        return idx


def build_ray_index(rays: RayTable, grid: GridSpec, use_numba: bool | None = None) -> VoxelRayIndex:
    """Record, for every voxel, the training rays that cross it."""
    if len(rays) == 0:
        raise ValueError("build_ray_index: no rays given")
    ray, vox, tin, tout = dda_batch(rays.origins, rays.dirs, rays.near, rays.far, grid,
                                    use_numba=use_numba)
    if len(ray) == 0:
        raise ValueError(f"build_ray_index: none of the {len(rays)} rays intersects the "
                         f"scene bound {grid.bound_min} .. {grid.bound_max}")
    order = np.lexsort((ray, vox))
    ray, vox, tin, tout = ray[order], vox[order], tin[order], tout[order]
    voxel_ids, starts = np.unique(vox, return_index=True)
    offsets = np.append(starts, len(vox)).astype(np.int64)
    return VoxelRayIndex(grid, voxel_ids.astype(np.int64), offsets, ray.astype(np.int64),
                         tin, tout, rays)


# -------------------------------------------------------------- batches

@dataclass
class VoxelRayBatch:
    voxel_ids: np.ndarray   # (V,)
    ray_ids: np.ndarray     # (V, R)
    t_in: np.ndarray        # (V, R)
    t_out: np.ndarray       # (V, R)
    origins: np.ndarray     # (V, R, 3)
    dirs: np.ndarray        # (V, R, 3)
    near: np.ndarray        # (V, R)
    far: np.ndarray         # (V, R)
    colors: np.ndarray      # (V, R, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ray_ids.shape

    @property
    def x_in(self) -> np.ndarray:
        return self.origins + self.t_in[..., None] * self.dirs

    @property
    def x_out(self) -> np.ndarray:
        return self.origins + self.t_out[..., None] * self.dirs


def sample_batch(index: VoxelRayIndex, V: int, R: int, rng: np.random.Generator,
                 weighted: bool = False) -> VoxelRayBatch:
    """Draw ``V`` voxels, then ``R`` rays from each.

    Voxels are drawn without replacement unless fewer than ``V`` exist; rays
    are drawn with replacement only when a voxel holds fewer than ``R``.
    ``weighted`` draws voxels proportionally to their ray counts.
    """
    K = index.num_voxels
    if K == 0:
        raise ValueError("sample_batch: index holds no voxels")
    if V < 1 or R < 1:
        raise ValueError(f"sample_batch: need V >= 1 and R >= 1, got V={V}, R={R}")
    counts = index.counts()
    p = counts / counts.sum() if weighted else None
    ks = rng.choice(K, size=V, replace=K < V, p=p)
    sel = np.empty((V, R), np.int64)
    for i, k in enumerate(ks):
        c = counts[k]
        sel[i] = index.offsets[k] + rng.choice(c, size=R, replace=c < R)
    rid = index.ray_ids[sel]
    rt = index.rays
    return VoxelRayBatch(voxel_ids=index.voxel_ids[ks], ray_ids=rid,
                         t_in=index.t_in[sel], t_out=index.t_out[sel],
                         origins=rt.origins[rid], dirs=rt.dirs[rid],
                         near=rt.near[rid], far=rt.far[rid], colors=rt.colors[rid])


def sample_random_rays(rays: RayTable, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ray ids for a plain uniformly random batch (no voxel grouping)."""
    return rng.choice(len(rays), size=n, replace=len(rays) < n)
