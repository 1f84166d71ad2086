"""Training loop: voxel-grouped ray batches, coarse and fine fields, the
in-voxel transformer on the fine pass, contrastive regularization, Adam."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tensor
from .field import FieldConfig, FieldParams, field_features, field_forward, named_parameters
from .geometry import line_sample, sphere_sample, stratified_sample
from .ivt import CvtParams, TransformerConfig, decode, encode, pool
from .losses import LossConfig, contrastive_loss, mse_loss, total_loss
from .rendering import (IMPORTANCE, UNIFORM, RaySampleList, composite, importance_sample,
                        insert_and_composite)
from .scenedata import Dataset, generate_toy_scene, load_dataset, toy_scene_from_dict
from .voxelgrid import (GridSpec, RayTable, VoxelRayIndex, build_ray_index, sample_batch,
                        sample_random_rays)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CVTCKPT1"
CKPT_VERSION = 1
LOSS_COLUMNS = ("iter", "mse_coarse", "mse_fine", "contrast", "total", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    V: int = 64
    R: int = 16
    iters: int = 50000
    lr0: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    cvt_enabled: bool = True
    contrastive_enabled: bool = True
    voxel_sampling_enabled: bool = True
    weighted_voxels: bool = False
    # transformer
    S: int = 9
    P: int = 9
    num_blocks: int = 2
    radius_divisor: float = 4.0
    num_heads: int = 4
    ff_mult: int = 2
    cvt_pos_freqs: int = 10
    # losses
    lam: float = 0.1
    tau: float = 0.1
    normalize_mse: bool = True
    normalize_contrast: bool = True
    # fields
    depth: int = 8
    width: int = 256
    skip: int = 4
    color_width: int = 128
    pos_freqs: int = 10
    dir_freqs: int = 4
    n_coarse: int = 64
    n_fine: int = 128
    # scene
    grid_resolution: int = 64
    scene_range: float = 6.0
    grid_origin: tuple = (-3.0, -3.0, -3.0)
    white_background: bool = False
    data: str | None = None
    train_views: int | None = None     # keep the first n training views
    toy: dict = field(default_factory=dict)
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.grid_origin = tuple(float(v) for v in self.grid_origin)
        self.validate()

    @property
    def batch_size(self) -> int:
        return self.V * self.R

    def validate(self) -> None:
        if self.V < 1 or self.R < 1:
            raise ValueError(f"V and R must be >= 1, got V={self.V}, R={self.R}")
        if self.cvt_enabled and not self.voxel_sampling_enabled:
            raise ValueError("cvt_enabled requires voxel_sampling_enabled (rays need a voxel)")
        if self.contrastive_enabled and not self.cvt_enabled:
            raise ValueError("contrastive_enabled requires cvt_enabled (region features "
                             "come from the transformer encoder)")
        if self.contrastive_enabled and (self.R < 2 or self.V < 2):
            raise ValueError(f"contrastive loss needs R >= 2 and V >= 2, got V={self.V}, R={self.R}")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} (transformer model_dim) not divisible by "
                             f"num_heads {self.num_heads}")
        if self.train_views is not None and self.train_views < 1:
            raise ValueError(f"train_views must be >= 1, got {self.train_views}")
        if self.iters < 0 or self.lr0 <= 0 or self.lr_final <= 0:
            raise ValueError("iters must be >= 0 and learning rates > 0")

    # -- derived configs
    @property
    def field_cfg(self) -> FieldConfig:
        return FieldConfig(self.depth, self.width, self.skip, self.color_width,
                           self.pos_freqs, self.dir_freqs)

    @property
    def transformer_cfg(self) -> TransformerConfig:
        return TransformerConfig(self.num_blocks, self.width, self.num_heads, self.S, self.P,
                                 self.radius_divisor, self.ff_mult, self.cvt_pos_freqs)

    @property
    def loss_cfg(self) -> LossConfig:
        return LossConfig(self.lam, self.tau, self.contrastive_enabled, self.normalize_mse,
                          self.normalize_contrast)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_resolution, self.scene_range, self.grid_origin)

    # -- serialization
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid_origin"] = list(self.grid_origin)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale settings used for the toy-scene experiments and tests."""
    base = dict(V=8, R=8, iters=5000, depth=4, width=64, skip=2, color_width=32,
                pos_freqs=6, dir_freqs=3, cvt_pos_freqs=6, n_coarse=32, n_fine=32,
                num_blocks=1, grid_resolution=32, scene_range=4.0,
                grid_origin=(-2.0, -2.0, -2.0))
    base.update(overrides)
    return TrainConfig(**base)


# ------------------------------------------------------------------ state

@dataclass
class TrainState:
    cfg: TrainConfig
    coarse: FieldParams
    fine: FieldParams
    cvt: CvtParams
    adam: AdamState
    rng: np.random.Generator
    iteration: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("coarse", self.coarse), ("fine", self.fine), ("cvt", self.cvt)):
            out.update(named_parameters(mod, prefix + "."))
        return out


def init_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    coarse = FieldParams(cfg.field_cfg, rng)
    fine = FieldParams(cfg.field_cfg, rng)
    cvt = CvtParams(cfg.transformer_cfg, rng)
    st = TrainState(cfg, coarse, fine, cvt, None, rng)
    decay = dc.exp_decay_factor(cfg.lr0, cfg.lr_final, cfg.iters)
    st.adam = dc.init_adam(list(st.named_parameters().values()), cfg.lr0, decay)
    return st


def learning_rate(cfg: TrainConfig, step: int) -> float:
    return cfg.lr0 * dc.exp_decay_factor(cfg.lr0, cfg.lr_final, cfg.iters) ** step


# ------------------------------------------------------------------ data

@dataclass
class TrainData:
    rays: RayTable
    index: VoxelRayIndex | None
    dataset: Dataset | None = None


def subset_train_views(ds: Dataset, n: int) -> Dataset:
    train = ds.indices("train")
    if not 1 <= n <= len(train):
        raise ValueError(f"train_views={n} but the dataset has {len(train)} training views")
    keep = train[:n] + ds.indices("test")
    return Dataset([ds.images[i] for i in keep], ds.poses[keep], ds.focal,
                   [ds.splits[i] for i in keep], ds.white_background, ds.near, ds.far,
                   [ds.names[i] for i in keep])


def load_training_dataset(cfg: TrainConfig) -> Dataset:
    """The configured dataset directory, or the procedural toy scene."""
    if cfg.data:
        ds = load_dataset(cfg.data, white_background=cfg.white_background)
        return subset_train_views(ds, cfg.train_views) if cfg.train_views else ds
    toy = dict(cfg.toy)
    toy.setdefault("white_background", cfg.white_background)
    if cfg.train_views:
        toy["train_views"] = cfg.train_views
    return generate_toy_scene(toy_scene_from_dict(toy))


def prepare_data(cfg: TrainConfig, dataset: Dataset | None = None) -> TrainData:
    ds = dataset if dataset is not None else load_training_dataset(cfg)
    o, d, c = ds.rays("train")
    rays = RayTable.build(o, d, ds.near, ds.far, c)
    index = build_ray_index(rays, cfg.grid) if cfg.voxel_sampling_enabled else None
    if index is not None:
        log.info("ray index: %d occupied voxels, %d ray/voxel pairs",
                 index.num_voxels, index.num_pairs)
    return TrainData(rays, index, ds)


# ------------------------------------------------------------------ step

@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    colors: np.ndarray
    t_in: np.ndarray | None = None
    t_out: np.ndarray | None = None


def draw_batch(state: TrainState, data: TrainData) -> RayBatch:
    cfg, rng = state.cfg, state.rng
    if cfg.voxel_sampling_enabled:
        b = sample_batch(data.index, cfg.V, cfg.R, rng, weighted=cfg.weighted_voxels)
        n = cfg.batch_size
        return RayBatch(b.origins.reshape(n, 3), b.dirs.reshape(n, 3), b.near.reshape(n),
                        b.far.reshape(n), b.colors.reshape(n, 3), b.t_in.reshape(n),
                        b.t_out.reshape(n))
    ids = sample_random_rays(data.rays, cfg.batch_size, rng)
    r = data.rays
    return RayBatch(r.origins[ids], r.dirs[ids], r.near[ids], r.far[ids], r.colors[ids])


def _points(o, d, t):
    return o[:, None, :] + t[..., None] * d[:, None, :]


def coarse_pass(params: FieldParams, batch: RayBatch, n: int, rng, white: bool):
    t = stratified_sample(batch.near, batch.far, n, rng)
    out = field_forward(params, _points(batch.origins, batch.dirs, t), batch.dirs[:, None, :])
    samples = RaySampleList(t, out.sigma, out.color, np.full(t.shape, UNIFORM, np.int8))
    edges = batch.near[:, None] + np.arange(n + 1) * ((batch.far - batch.near) / n)[:, None]
    return composite(samples, white), edges


def fine_samples(params: FieldParams, batch: RayBatch, t_coarse, weights, edges, n: int, rng):
    t_imp = importance_sample(weights, edges, n, rng)
    t = np.concatenate([t_coarse, t_imp], axis=-1)
    src = np.concatenate([np.full(t_coarse.shape, UNIFORM, np.int8),
                          np.full(t_imp.shape, IMPORTANCE, np.int8)], axis=-1)
    order = np.argsort(t, axis=-1, kind="stable")
    t = np.take_along_axis(t, order, -1)
    src = np.take_along_axis(src, order, -1)
    out = field_forward(params, _points(batch.origins, batch.dirs, t), batch.dirs[:, None, :])
    return RaySampleList(t, out.sigma, out.color, src)


def cvt_pass(state: TrainState, batch: RayBatch):
    """Surrounding points -> encoder -> region features; chord points -> decoder."""
    cfg, rng = state.cfg, state.rng
    tcfg = cfg.transformer_cfg
    x_in = batch.origins + batch.t_in[:, None] * batch.dirs
    x_out = batch.origins + batch.t_out[:, None] * batch.dirs
    radius = cfg.grid.voxel_size / tcfg.radius_divisor
    around = sphere_sample(0.5 * (x_in + x_out), radius, tcfg.S, rng)
    g = field_features(state.fine, around)
    h = encode(state.cvt, g)
    region = pool(h)
    seg = line_sample(x_in, x_out, tcfg.P, rng)
    t_hat = batch.t_in[:, None] + seg.t_values * (batch.t_out - batch.t_in)[:, None]
    dec = decode(state.cvt, _points(batch.origins, batch.dirs, t_hat), h, t_hat)
    return dec, region


def train_step(state: TrainState, data: TrainData) -> dict:
    """One optimization step; returns the loss report for this iteration."""
    cfg, rng = state.cfg, state.rng
    params = state.named_parameters()
    batch = draw_batch(state, data)
    white = cfg.white_background

    res_c, edges = coarse_pass(state.coarse, batch, cfg.n_coarse, rng, white)
    mse_c = mse_loss(res_c.color, batch.colors, cfg.normalize_mse)
    fine = fine_samples(state.fine, batch, res_c.t, res_c.weights.data, edges, cfg.n_fine, rng)
    contrast = None
    if cfg.cvt_enabled:
        dec, region = cvt_pass(state, batch)
        res_f = insert_and_composite(fine, dec, white)
        if cfg.contrastive_enabled:
            feats = dc.reshape(region, (cfg.V, cfg.R, region.shape[-1]))
            contrast = contrastive_loss(feats, cfg.loss_cfg, rng)
    else:
        res_f = composite(fine, white)
    mse_f = mse_loss(res_f.color, batch.colors, cfg.normalize_mse)
    total = total_loss(mse_c + mse_f, contrast, cfg.loss_cfg)

    it = state.iteration
    if not np.isfinite(total.item()):
        dc.current_graph().clear()
        raise TrainingDiverged(f"non-finite loss at iteration {it}")
    lr = state.adam.lr
    dc.backward(total)
    plist = list(params.values())
    dc.adam_step(state.adam, plist, [p.grad for p in plist])
    for p in plist:
        p.grad = None
        if not np.all(np.isfinite(p.data)):
            raise TrainingDiverged(f"non-finite parameter after iteration {it}")
    state.iteration += 1
    return {"iter": it, "mse_coarse": float(mse_c.item()), "mse_fine": float(mse_f.item()),
            "contrast": float(contrast.item()) if contrast is not None else 0.0,
            "total": float(total.item()), "lr": lr}


# ------------------------------------------------------------- rendering

@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    points: np.ndarray | None = None    # (M, 3) retained fine samples
    colors: np.ndarray | None = None
    sigmas: np.ndarray | None = None


def render_rays(state: TrainState, origins, dirs, near, far, chunk: int = 2048,
                keep_threshold: float | None = None) -> RenderOutput:
    """Deterministic coarse+fine rendering (no transformer at test time).

    With ``keep_threshold`` set, fine samples whose compositing weight is at
    least the threshold are returned as a point set.
    """
    cfg = state.cfg
    origins = np.asarray(origins, np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, np.float64), (n,))
    far = np.broadcast_to(np.asarray(far, np.float64), (n,))
    rgb, depth, acc, pts, cols, sigs = [], [], [], [], [], []
    with dc.no_grad():
        for s in range(0, n, chunk):
            b = RayBatch(origins[s:s + chunk], dirs[s:s + chunk], near[s:s + chunk],
                         far[s:s + chunk], None)
            res_c, edges = coarse_pass(state.coarse, b, cfg.n_coarse, None, cfg.white_background)
            fs = fine_samples(state.fine, b, res_c.t, res_c.weights.data, edges, cfg.n_fine, None)
            res = composite(fs, cfg.white_background)
            rgb.append(res.color.data)
            depth.append(res.depth)
            acc.append(res.acc.data)
            if keep_threshold is not None:
                keep = res.weights.data >= keep_threshold
                p = _points(b.origins, b.dirs, fs.t)
                pts.append(p[keep])
                cols.append(fs.color.data[keep])
                sigs.append(fs.sigma.data[keep])
    out = RenderOutput(np.concatenate(rgb), np.concatenate(depth), np.concatenate(acc))
    if keep_threshold is not None:
        out.points = np.concatenate(pts)
        out.colors = np.concatenate(cols)
        out.sigmas = np.concatenate(sigs)
    return out


def render_view(state: TrainState, ds: Dataset, i: int, chunk: int = 4096) -> np.ndarray:
    from .scenedata import camera_rays
    H, W = ds.hw
    o, d = camera_rays(H, W, ds.focal, ds.poses[i])
    return render_rays(state, o, d, ds.near, ds.far, chunk).rgb.reshape(H, W, 3)


# ----------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path) -> None:
    buf = io.BytesIO()
    cfg_json = state.cfg.to_json().encode()
    rng_json = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    a = state.adam
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(state.cfg.digest())
    buf.write(struct.pack("<I", len(cfg_json)) + cfg_json)
    buf.write(struct.pack("<QQ", state.iteration, a.step))
    buf.write(struct.pack("<5d", a.lr0, a.decay, a.beta1, a.beta2, a.eps))
    buf.write(struct.pack("<I", len(rng_json)) + rng_json)
    params = state.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for k, (name, p) in enumerate(params.items()):
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        for arr in (p.data, a.m[k], a.v[k]):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect: TrainConfig | None = None) -> TrainState:
    """Restore a state written by :func:`save_checkpoint`.

    ``expect`` (optional) must match the stored config digest.
    """
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = unpack("<I")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    digest = take(32)
    (n,) = unpack("<I")
    try:
        cfg = TrainConfig.from_dict(json.loads(take(n).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt config block ({exc})") from None
    if cfg.digest() != digest:
        raise ValueError(f"{path}: config digest mismatch (corrupt config block)")
    if expect is not None and expect.digest() != digest:
        raise ValueError(f"{path}: checkpoint was written for a different config")
    iteration, step = unpack("<QQ")
    lr0, decay, b1, b2, eps = unpack("<5d")
    (n,) = unpack("<I")
    rng_state = json.loads(take(n).decode())
    state = init_state(cfg)
    params = state.named_parameters()
    (count,) = unpack("<I")
    if count != len(params):
        raise ValueError(f"{path}: {count} parameter blobs, config implies {len(params)}")
    m, v = [], []
    for name, p in params.items():
        (ln,) = unpack("<H")
        stored = take(ln).decode()
        if stored != name:
            raise ValueError(f"{path}: expected parameter {name!r}, found {stored!r}")
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I") if ndim else ()
        if tuple(shape) != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {shape}, expected {p.shape}")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        blobs = [np.frombuffer(take(size), dtype="<f4").reshape(shape).astype(np.float32)
                 for _ in range(3)]
        p.data = blobs[0]
        m.append(blobs[1])
        v.append(blobs[2])
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    state.adam = AdamState(lr0=lr0, decay=decay, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = rng_state
    state.iteration = iteration
    return state


# -------------------------------------------------------------- driver

def write_loss_rows(path, rows, append: bool = False) -> None:
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in LOSS_COLUMNS[1:]])


def train(cfg: TrainConfig, out_dir=None, data: TrainData | None = None,
          state: TrainState | None = None, iters: int | None = None,
          progress=None) -> tuple[TrainState, list[dict]]:
    """Run training until ``iters`` (default ``cfg.iters``) total iterations.

    Writes ``losses.csv`` and checkpoints into ``out_dir`` when given.
    """
    data = data or prepare_data(cfg)
    state = state or init_state(cfg)
    stop = cfg.iters if iters is None else iters
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    while state.iteration < stop:
        rep = train_step(state, data)
        rows.append(rep)
        if progress:
            progress(rep)
        if cfg.log_every and rep["iter"] % cfg.log_every == 0:
            log.info("iter %d total %.5f mse_f %.5f contrast %.4f lr %.2e", rep["iter"],
                     rep["total"], rep["mse_fine"], rep["contrast"], rep["lr"])
        if out and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, out / f"ckpt_{state.iteration:06d}.bin")
    if out:
        write_loss_rows(out / "losses.csv", rows, append=state.iteration > len(rows))
        save_checkpoint(state, out / "final.bin")
    return state, rows
