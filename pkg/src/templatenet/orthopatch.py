"""Depth images to metric orthographic surface-normal patches (orthoPatches)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

DEFAULT_SCALE = 0.005  # meters per orthoPatch pixel
DEFAULT_PATCH = 128
DEFAULT_MAX_DEPTH_JUMP = 0.05


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass
class DepthImage:
    """Per-pixel depth ``Z`` in meters along the optical axis; 0 marks missing data."""

    depth: np.ndarray  # (height, width)
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2 or min(self.depth.shape) < 2:
            raise ValueError(f"depth image must be 2-D with both dimensions >= 2, got {self.depth.shape}")
        if (self.depth < 0).any():
            raise ValueError("depth values must be >= 0")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass
class OrthoPatch:
    """Orthographic normal map.

    ``normals`` is ``(3, H, W)`` with each channel in ``[0, 1]`` and exact zeros
    where there is no surface. ``depth`` keeps the z-buffer winner per cell (0
    where empty). ``origin`` is the (X, Y) world position of cell (0, 0)'s center.
    """

    normals: np.ndarray
    scale: float
    origin: tuple
    depth: np.ndarray | None = None

    @property
    def shape(self):
        return self.normals.shape[1:]

    def cell_center(self, row, col):
        return (self.origin[0] + col * self.scale, self.origin[1] + row * self.scale)

    def foreground_mask(self):
        return (self.normals != 0).any(axis=0)


def organized_points(d: DepthImage):
    """``(H, W, 3)`` camera-frame points; rows/cols with zero depth give zero points."""
    k = d.intrinsics
    v, u = np.mgrid[0:d.height, 0:d.width].astype(np.float64)
    z = d.depth
    return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)


def backproject(d: DepthImage):
    """Point cloud ``(N, 3)`` of all pixels with positive depth, in row-major pixel order."""
    pts = organized_points(d)
    return pts[d.depth > 0]


def estimate_normals(d: DepthImage, max_depth_jump=DEFAULT_MAX_DEPTH_JUMP):
    """Per-pixel unit normals from central-difference tangents on the organized cloud.

    Normals face the camera (``n_z <= 0``). Pixels whose own depth or any of the
    four neighbours is missing, or sits across a depth jump larger than
    ``max_depth_jump``, get a zero normal.
    """
    k = d.intrinsics
    z = d.depth
    h, w = z.shape
    normals = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return normals
    c = z[1:-1, 1:-1]
    left, right = z[1:-1, :-2], z[1:-1, 2:]
    up, down = z[:-2, 1:-1], z[2:, 1:-1]
    valid = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    if max_depth_jump is not None:
        for nb in (left, right, up, down):
            valid &= np.abs(nb - c) <= max_depth_jump
    # X = (u - cx) Z / fx, Y = (v - cy) Z / fy
    u = (np.arange(1, w - 1) - k.cx)[None, :]
    v = (np.arange(1, h - 1) - k.cy)[:, None]
    # horizontal tangent: P(u+1) - P(u-1)
    ax = ((u + 1) * right - (u - 1) * left) / k.fx
    ay = v * (right - left) / k.fy
    az = right - left
    # vertical tangent: P(v+1) - P(v-1)
    bx = u * (down - up) / k.fx
    by = ((v + 1) * down - (v - 1) * up) / k.fy
    bz = down - up
    n = np.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)
    norm = np.sqrt((n * n).sum(axis=-1))
    valid &= norm > 0
    scale = np.where(valid, 1.0 / np.where(valid, norm, 1.0), 0.0)
    scale = np.where(n[..., 2] > 0, -scale, scale)
    normals[1:-1, 1:-1] = n * scale[..., None]
    return normals


def normals_to_channels(normals):
    """Map unit normals to ``[0, 1]`` via ``(n + 1) / 2``; zero normals stay exactly 0."""
    normals = np.asarray(normals)
    defined = (normals != 0).any(axis=-1, keepdims=True)
    return np.where(defined, (normals + 1.0) * 0.5, 0.0)


def orthoproject(points, channels, scale=DEFAULT_SCALE, shape=(DEFAULT_PATCH, DEFAULT_PATCH), center=(0.0, 0.0)):
    """Bin points onto an orthographic grid looking down the optical axis.

    Cell ``(r, c)`` covers ``X in [cx + (c - W/2) s, cx + (c - W/2 + 1) s)`` (and
    likewise in Y), so a point exactly at ``center`` lands in cell
    ``(H // 2, W // 2)``. The point with the smallest Z wins each cell.

    Args:
        points: ``(N, 3)`` camera-frame points.
        channels: ``(N, 3)`` per-point values in ``[0, 1]`` (mapped normals).
        scale: meters per cell.
        shape: ``(H, W)``.
        center: ``(X, Y)`` of the patch center.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    hgt, wid = shape
    normals = np.zeros((3, hgt, wid))
    depth = np.zeros((hgt, wid))
    x0 = center[0] - (wid // 2) * scale
    y0 = center[1] - (hgt // 2) * scale
    origin = (x0 + 0.5 * scale, y0 + 0.5 * scale)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return OrthoPatch(normals=normals, scale=scale, origin=origin, depth=depth)
    channels = np.asarray(channels, dtype=np.float64).reshape(-1, 3)
    col = np.floor((points[:, 0] - x0) / scale).astype(np.int64)
    row = np.floor((points[:, 1] - y0) / scale).astype(np.int64)
    inside = (col >= 0) & (col < wid) & (row >= 0) & (row < hgt)
    col, row, pts, ch = col[inside], row[inside], points[inside], channels[inside]
    if col.size:
        cell = row * wid + col
        order = np.lexsort((pts[:, 2], cell))
        cell_sorted = cell[order]
        first = np.ones(cell_sorted.size, dtype=bool)
        first[1:] = cell_sorted[1:] != cell_sorted[:-1]
        win = order[first]
        normals.reshape(3, -1)[:, cell[win]] = ch[win].T
        depth.reshape(-1)[cell[win]] = pts[win, 2]
    return OrthoPatch(normals=normals, scale=scale, origin=origin, depth=depth)


def depth_to_orthopatch(d: DepthImage, center=(0.0, 0.0), scale=DEFAULT_SCALE,
                        shape=(DEFAULT_PATCH, DEFAULT_PATCH), max_depth_jump=DEFAULT_MAX_DEPTH_JUMP):
    """Full pipeline: backproject, estimate normals, orthographically project."""
    valid = d.depth > 0
    pts = organized_points(d)[valid]
    n = estimate_normals(d, max_depth_jump)[valid]
    ch = normals_to_channels(n)
    return orthoproject(pts, ch, scale=scale, shape=shape, center=center)


def save_depth(path, d: DepthImage):
    """Write ``DPT1`` (16-bit little-endian millimeters) plus a ``fx fy cx cy`` sidecar."""
    mm = np.rint(d.depth * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit millimeter range")
    with open(path, "wb") as fh:
        fh.write(f"DPT1 {d.width} {d.height}\n".encode("ascii"))
        fh.write(mm.astype("<u2").tobytes())
    k = d.intrinsics
    with open(intrinsics_path(path), "w") as fh:
        fh.write(" ".join(repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy)) + "\n")


def intrinsics_path(path):
    return os.fspath(path) + ".intrinsics"


def load_depth(path, intrinsics_file=None) -> DepthImage:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != "DPT1":
            raise ValueError(f"{path}: not a DPT1 depth file")
        w, h = int(header[1]), int(header[2])
        payload = fh.read()
    if len(payload) != 2 * w * h:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {2 * w * h}")
    depth = np.frombuffer(payload, dtype="<u2").reshape(h, w).astype(np.float64) / 1000.0
    with open(intrinsics_file or intrinsics_path(path)) as fh:
        fx, fy, cx, cy = (float(t) for t in fh.read().split())
    return DepthImage(depth=depth, intrinsics=Intrinsics(fx, fy, cx, cy))
