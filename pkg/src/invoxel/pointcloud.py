"""Dump the fine-pass samples that carry visible weight as an ASCII PLY."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PLY_PROPERTIES = ("x", "y", "z", "r", "g", "b", "sigma")
DEFAULT_THRESHOLD = 1e-3


def _check_target(path) -> Path:
    path = Path(path)
    if path.is_dir() or not path.parent.is_dir():
        raise ValueError(f"{path}: not a writable file location")
    return path


def write_ply(path, points, colors, sigmas) -> None:
    """Vertices as ``float x y z r g b sigma`` (colors in [0, 1])."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
    if not (len(points) == len(colors) == len(sigmas)):
        raise ValueError(f"write_ply: {len(points)} points, {len(colors)} colors, "
                         f"{len(sigmas)} densities")
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    path = _check_target(path)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        if len(points):
            np.savetxt(fh, np.hstack([points, colors, sigmas]), fmt="%.9g")


def read_ply(path) -> dict[str, np.ndarray]:
    """Minimal reader for the files :func:`write_ply` produces."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: missing 'ply' magic")
        props, count = [], None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: no vertex element")
        data = np.loadtxt(fh, ndmin=2) if count else np.zeros((0, len(props)))
    if data.shape != (count, len(props)):
        raise ValueError(f"{path}: expected {count}x{len(props)} values, got {data.shape}")
    return {p: data[:, i] for i, p in enumerate(props)}


def export_field_pointcloud(state, rays, path, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Render ``rays`` (a ``RayTable`` or ``(origins, dirs, near, far)``) and
    write every fine sample with compositing weight >= ``threshold``.

    Returns the number of vertices written.
    """
    from .trainer import render_rays
    _check_target(path)
    if hasattr(rays, "origins"):
        rays = (rays.origins, rays.dirs, rays.near, rays.far)
    out = render_rays(state, *rays, keep_threshold=threshold)
    write_ply(path, out.points, out.colors, out.sigmas)
    log.info("point cloud: kept %d samples (weight >= %g) -> %s", len(out.points), threshold, path)
    return len(out.points)
