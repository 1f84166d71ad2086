"""Datasets in the NeRF-synthetic ``transforms_*.json`` layout, camera rays,
and a procedural toy scene whose images come from an analytic quadrature
renderer."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _accel


@dataclass
class Dataset:
    images: list[np.ndarray]          # H x W x 3 float32 in [0, 1]
    poses: np.ndarray                 # (n, 4, 4) camera-to-world
    focal: float
    splits: list[str]                 # "train" / "test" per frame
    white_background: bool = False
    near: float = 2.0
    far: float = 6.0
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images:
            shapes = {im.shape for im in self.images}
            if len(shapes) != 1:
                raise ValueError(f"dataset images differ in shape: {sorted(shapes)}")
        for i, pose in enumerate(self.poses):
            check_rigid(pose, f"frame {i}")
        if not self.names:
            self.names = [f"{s}_{i:03d}" for i, s in enumerate(self.splits)]

    @property
    def hw(self) -> tuple[int, int]:
        return self.images[0].shape[:2]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def rays(self, split: str):
        """Stacked ``(origins, dirs, colors)`` for every pixel of ``split``."""
        H, W = self.hw
        os_, ds, cs = [], [], []
        for i in self.indices(split):
            o, d = camera_rays(H, W, self.focal, self.poses[i])
            os_.append(o)
            ds.append(d)
            cs.append(self.images[i].reshape(-1, 3))
        return np.concatenate(os_), np.concatenate(ds), np.concatenate(cs).astype(np.float32)


def check_rigid(pose, where: str = "pose") -> None:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"{where}: transform must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-4:
        raise ValueError(f"{where}: rotation block is not orthonormal")
    if np.abs(pose[3] - [0, 0, 0, 1]).max() > 1e-6:
        raise ValueError(f"{where}: last row must be [0, 0, 0, 1]")


def focal_from_fov(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def camera_rays(H: int, W: int, focal: float, pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel rays (row-major, ``H*W``) for an OpenGL-style camera looking down -z."""
    pose = np.asarray(pose, dtype=np.float64)
    u, v = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    cam = np.stack([(u + 0.5 - W / 2) / focal, -(v + 0.5 - H / 2) / focal, -np.ones_like(u)], -1)
    d = cam.reshape(-1, 3) @ pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose[:3, 3], d.shape).copy()
    return o, d


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, cam_up, -fwd, eye
    return pose


# ------------------------------------------------------------------- I/O

def _read_png(path: Path, white_background: bool) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"),
                         dtype=np.float32) / 255.0
    if arr.shape[-1] == 4:
        rgb, a = arr[..., :3], arr[..., 3:]
        arr = rgb * a + (1.0 - a) if white_background else rgb
    return arr


def load_dataset(path, white_background: bool = False) -> Dataset:
    """Read ``transforms_train.json`` / ``transforms_test.json`` and their PNGs."""
    root = Path(path)
    images, poses, splits, names = [], [], [], []
    angle = None
    near, far = 2.0, 6.0
    for split in ("train", "test"):
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.is_file():
            raise FileNotFoundError(f"{meta_path}: missing transforms file")
        try:
            meta = json.loads(meta_path.read_text())
            a = float(meta["camera_angle_x"])
            frames = meta["frames"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{meta_path}: malformed transforms JSON ({exc})") from None
        if angle is None:
            angle = a
        near = float(meta.get("near", near))
        far = float(meta.get("far", far))
        for k, fr in enumerate(frames):
            try:
                rel = fr["file_path"]
                pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{meta_path}: frame {k} malformed ({exc})") from None
            check_rigid(pose, f"{meta_path} frame {k}")
            img_path = root / rel
            if img_path.suffix == "":
                img_path = img_path.with_suffix(".png")
            if not img_path.is_file():
                raise FileNotFoundError(f"{img_path}: image referenced by {meta_path} not found")
            images.append(_read_png(img_path, white_background))
            poses.append(pose)
            splits.append(split)
            names.append(Path(rel).stem)
    W = images[0].shape[1] if images else 1
    return Dataset(images, np.asarray(poses).reshape(-1, 4, 4), focal_from_fov(W, angle), splits,
                   white_background, near, far, names)


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` in the transforms-JSON layout (8-bit RGB PNGs)."""
    root = Path(path)
    H, W = ds.hw
    angle = 2.0 * np.arctan(0.5 * W / ds.focal)
    for split in ("train", "test"):
        frames = []
        for i in ds.indices(split):
            rel = f"./{split}/{ds.names[i]}"
            save_png(root / f"{rel}.png", ds.images[i])
            frames.append({"file_path": rel, "transform_matrix": ds.poses[i].tolist()})
        meta = {"camera_angle_x": float(angle), "near": ds.near, "far": ds.far, "frames": frames}
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ------------------------------------------------------------ toy scene

SPHERE, BOX = 0, 1


@dataclass(frozen=True)
class Primitive:
    kind: str                          # "sphere" or "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]   # radius (first entry) or box half-extents
    sigma: float
    color: tuple[float, float, float]


def default_primitives() -> tuple[Primitive, ...]:
    return (
        Primitive("sphere", (0.0, 0.0, 0.0), (0.55, 0, 0), 30.0, (0.9, 0.25, 0.2)),
        Primitive("box", (0.55, 0.45, -0.35), (0.25, 0.25, 0.3), 30.0, (0.2, 0.7, 0.3)),
        Primitive("sphere", (-0.45, -0.5, 0.35), (0.3, 0, 0), 30.0, (0.25, 0.35, 0.9)),
        Primitive("box", (0.0, 0.0, -0.75), (0.9, 0.9, 0.08), 20.0, (0.85, 0.8, 0.55)),
    )


@dataclass(frozen=True)
class ToyScene:
    primitives: tuple[Primitive, ...] = field(default_factory=default_primitives)
    edge: float = 0.04                 # width of the linear density ramp at surfaces
    ring_radius: float = 3.2
    ring_height: float = 1.2
    train_views: int = 3
    test_views: int = 16
    train_arc: float = 360.0           # degrees covered by the training cameras
    camera_angle_x: float = 0.75
    H: int = 64
    W: int = 64
    near: float = 1.5
    far: float = 5.0
    white_background: bool = False
    seed: int = 0

    def arrays(self):
        kinds = np.array([SPHERE if p.kind == "sphere" else BOX for p in self.primitives],
                         dtype=np.int64)
        if any(p.kind not in ("sphere", "box") for p in self.primitives):
            raise ValueError("toy primitives must be 'sphere' or 'box'")
        n = len(self.primitives)
        centers = np.array([p.center for p in self.primitives], np.float64).reshape(n, 3)
        sizes = np.array([p.size for p in self.primitives], np.float64).reshape(n, 3)
        sigmas = np.array([p.sigma for p in self.primitives], np.float64)
        colors = np.array([p.color for p in self.primitives], np.float64).reshape(n, 3)
        if np.any(sigmas < 0) or np.any((colors < 0) | (colors > 1)):
            raise ValueError("toy primitives need sigma >= 0 and colors in [0, 1]")
        return kinds, centers, sizes, sigmas, colors


def _occupancy_numpy(x, kinds, centers, sizes, edge):
    """(..., K) soft occupancy in [0, 1] of each primitive."""
    rel = x[..., None, :] - centers
    sph = np.linalg.norm(rel, axis=-1) - sizes[:, 0]
    q = np.abs(rel) - sizes
    box = np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
    sdf = np.where(kinds == SPHERE, sph, box)
    if edge > 0:
        return np.clip(0.5 - sdf / edge, 0.0, 1.0)
    return (sdf <= 0).astype(np.float64)


def toy_fields(scene: ToyScene, x) -> tuple[np.ndarray, np.ndarray]:
    """Analytic density and color at points ``x`` (shape ``(..., 3)``)."""
    kinds, centers, sizes, sigmas, colors = scene.arrays()
    x = np.asarray(x, dtype=np.float64)
    occ = _occupancy_numpy(x, kinds, centers, sizes, scene.edge) * sigmas
    sigma = occ.sum(axis=-1)
    color = (occ @ colors) / np.maximum(sigma, 1e-12)[..., None]
    return sigma, np.where(sigma[..., None] > 0, color, 0.0)


@_accel.njit
def _quadrature_numba(origins, dirs, near, far, steps, kinds, centers, sizes, sigmas, colors,
                      edge):
    R = origins.shape[0]
    K = kinds.shape[0]
    out = np.zeros((R, 4))
    for r in range(R):
        dt = (far[r] - near[r]) / steps
        log_t = 0.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for i in range(steps):
            t = near[r] + (i + 0.5) * dt
            px = origins[r, 0] + t * dirs[r, 0]
            py = origins[r, 1] + t * dirs[r, 1]
            pz = origins[r, 2] + t * dirs[r, 2]
            sig = 0.0
            sr = 0.0
            sg = 0.0
            sb = 0.0
            for k in range(K):
                rx = px - centers[k, 0]
                ry = py - centers[k, 1]
                rz = pz - centers[k, 2]
                if kinds[k] == 0:
                    sdf = np.sqrt(rx * rx + ry * ry + rz * rz) - sizes[k, 0]
                else:
                    qx = abs(rx) - sizes[k, 0]
                    qy = abs(ry) - sizes[k, 1]
                    qz = abs(rz) - sizes[k, 2]
                    ox = max(qx, 0.0)
                    oy = max(qy, 0.0)
                    oz = max(qz, 0.0)
                    sdf = np.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
                if edge > 0:
                    occ = min(max(0.5 - sdf / edge, 0.0), 1.0)
                else:
                    occ = 1.0 if sdf <= 0 else 0.0
                s = occ * sigmas[k]
                sig += s
                sr += s * colors[k, 0]
                sg += s * colors[k, 1]
                sb += s * colors[k, 2]
            if sig > 0:
                w = np.exp(-log_t) * -np.expm1(-sig * dt)
                cr += w * sr / sig
                cg += w * sg / sig
                cb += w * sb / sig
                log_t += sig * dt
        out[r, 0] = cr
        out[r, 1] = cg
        out[r, 2] = cb
        out[r, 3] = 1.0 - np.exp(-log_t)
    return out


def _quadrature_numpy(origins, dirs, near, far, steps, kinds, centers, sizes, sigmas, colors,
                      edge, chunk=64):
    out = np.zeros((len(origins), 4))
    for s in range(0, len(origins), chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        nr, fr = near[s:s + chunk], far[s:s + chunk]
        dt = (fr - nr) / steps
        t = nr[:, None] + (np.arange(steps) + 0.5) * dt[:, None]
        x = o[:, None, :] + t[..., None] * d[:, None, :]
        occ = _occupancy_numpy(x, kinds, centers, sizes, edge) * sigmas
        sig = occ.sum(-1)
        col = (occ @ colors) / np.maximum(sig, 1e-300)[..., None]
        tau = sig * dt[:, None]
        excl = np.cumsum(tau, axis=1) - tau
        w = np.exp(-excl) * -np.expm1(-tau)
        out[s:s + chunk, :3] = (w[..., None] * col).sum(1)
        out[s:s + chunk, 3] = 1.0 - np.exp(-tau.sum(1))
    return out


def render_oracle(scene: ToyScene, origins, dirs, near=None, far=None, steps: int = 4096,
                  use_numba: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint-rule quadrature of the compositing integral of the analytic
    fields. Returns ``(rgb, acc)`` per ray."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.ascontiguousarray(np.broadcast_to(scene.near if near is None else near, (n,)),
                                dtype=np.float64)
    far = np.ascontiguousarray(np.broadcast_to(scene.far if far is None else far, (n,)),
                               dtype=np.float64)
    args = (origins, dirs, near, far, int(steps)) + scene.arrays() + (float(scene.edge),)
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    out = _quadrature_numba(*args) if use_numba else _quadrature_numpy(*args)
    rgb, acc = out[:, :3], out[:, 3]
    if scene.white_background:
        rgb = rgb + (1.0 - acc)[:, None]
    return rgb, acc


def toy_cameras(scene: ToyScene) -> tuple[np.ndarray, list[str]]:
    """Training cameras spread over ``train_arc``; test cameras evenly on the
    full ring, offset so none coincides with a training view."""
    def ring(az_deg):
        a = np.deg2rad(az_deg)
        eye = np.array([scene.ring_radius * np.cos(a), scene.ring_radius * np.sin(a),
                        scene.ring_height])
        return look_at(eye)

    n_tr = scene.train_views
    if scene.train_arc >= 360.0:
        train_az = np.arange(n_tr) * 360.0 / n_tr
    else:
        train_az = np.linspace(-scene.train_arc / 2, scene.train_arc / 2, n_tr) if n_tr > 1 \
            else np.zeros(1)
    test_az = (np.arange(scene.test_views) + 0.5) * 360.0 / max(scene.test_views, 1) + 7.0
    poses = [ring(a) for a in train_az] + [ring(a) for a in test_az]
    splits = ["train"] * n_tr + ["test"] * scene.test_views
    return np.asarray(poses), splits


def generate_toy_scene(scene: ToyScene | None = None, n_views: int | None = None,
                       H: int | None = None, W: int | None = None,
                       steps: int = 4096) -> Dataset:
    """Render the toy scene's train and test views with the quadrature oracle.

    ``n_views``/``H``/``W`` override the scene's training view count and
    resolution.
    """
    scene = scene or ToyScene()
    kw = {}
    if n_views is not None:
        if n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {n_views}")
        kw["train_views"] = n_views
    if H is not None:
        kw["H"] = H
    if W is not None:
        kw["W"] = W
    if kw:
        from dataclasses import replace
        scene = replace(scene, **kw)
    poses, splits = toy_cameras(scene)
    focal = focal_from_fov(scene.W, scene.camera_angle_x)
    images = []
    for pose in poses:
        o, d = camera_rays(scene.H, scene.W, focal, pose)
        rgb, _ = render_oracle(scene, o, d, steps=steps)
        images.append(rgb.reshape(scene.H, scene.W, 3).astype(np.float32))
    return Dataset(images, poses, focal, splits, scene.white_background, scene.near, scene.far)


def toy_scene_from_dict(d: dict | None) -> ToyScene:
    d = dict(d or {})
    if "primitives" in d:
        d["primitives"] = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]),
                                          float(p["sigma"]), tuple(p["color"]))
                                for p in d["primitives"])
    unknown = set(d) - set(ToyScene.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown toy scene keys: {sorted(unknown)}")
    return ToyScene(**d)
