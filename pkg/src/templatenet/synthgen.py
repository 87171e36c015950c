"""Synthetic depth data: parametric meshes, ray-cast rendering, labeled examples.

Scenes live in the camera frame: the camera sits at the origin looking down
+Z with +Y pointing down the image. Objects rest on a finite floor quad whose
normal follows the object's tilt (pitch, roll and the fixed elevation), so
clutter always stands on the same plane as the target.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import objective
from .orthopatch import DEFAULT_PATCH, DEFAULT_SCALE, DepthImage, Intrinsics, OrthoPatch, depth_to_orthopatch
from .tensor import load_tensor, save_tensor

_EPS = 1e-9


class RenderError(RuntimeError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (T, 3) zero-based vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle vertex index out of range")
        tri = self.vertices[self.triangles]
        area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        self.triangles = self.triangles[area2 > 1e-15]
        if len(self.triangles) == 0:
            raise ValueError("mesh has no non-degenerate triangles")

    @property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def extents(self):
        lo, hi = self.bbox
        return hi - lo

    def centered(self):
        lo, hi = self.bbox
        return TriangleMesh(self.vertices - (lo + hi) / 2, self.triangles)


def merge(*meshes):
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def make_box(width=0.24, height=0.14, depth=0.16, center=(0.0, 0.0, 0.0)):
    """Axis-aligned box; ``height`` runs along Y."""
    hx, hy, hz = width / 2, height / 2, depth / 2
    v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v + np.asarray(center), tris)


def make_frustum(r_bottom=0.05, r_top=0.05, height=0.16, segments=24):
    """Capped cylinder/cone around the Y axis; the bottom cap is at +Y."""
    ang = 2 * math.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.zeros(segments), np.sin(ang)], axis=1)
    top = ring * r_top + [0.0, -height / 2, 0.0]
    bot = ring * r_bottom + [0.0, height / 2, 0.0]
    v = [top, bot, [[0.0, -height / 2, 0.0], [0.0, height / 2, 0.0]]]
    tris = []
    ct, cb = 2 * segments, 2 * segments + 1
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        if r_top > 0:
            tris.append((ct, j, i))
        tris.append((cb, segments + i, segments + j))
    return TriangleMesh(np.concatenate(v), tris)


def make_cylinder(radius=0.05, height=0.16, segments=24):
    return make_frustum(radius, radius, height, segments)


def make_capped_cone(r_bottom=0.07, r_top=0.025, height=0.15, segments=24):
    return make_frustum(r_bottom, r_top, height, segments)


def make_l_bracket(width=0.18, height=0.14, depth=0.10, thickness=0.04):
    foot = make_box(width, thickness, depth, center=(0.0, (height - thickness) / 2, 0.0))
    upright = make_box(thickness, height, depth, center=(-(width - thickness) / 2, 0.0, 0.0))
    return merge(foot, upright).centered()


def make_stepped_block(width=0.24, height=0.14, depth=0.16, step_height=0.06, step_width=0.12):
    """A box with one upper corner removed: same outer bounds as ``make_box`` by default."""
    base_h = height - step_height
    base = make_box(width, base_h, depth, center=(0.0, step_height / 2, 0.0))
    riser = make_box(width - step_width, step_height, depth,
                     center=(-step_width / 2, -(height - step_height) / 2, 0.0))
    return merge(base, riser).centered()


OBJECTS = {
    "box": make_box,
    "cylinder": make_cylinder,
    "l_bracket": make_l_bracket,
    "stepped_block": make_stepped_block,
    "capped_cone": make_capped_cone,
}


def get_object(name):
    if name in OBJECTS:
        return OBJECTS[name]()
    if os.path.exists(name):
        return load_obj(name).centered()
    raise ValueError(f"unknown object {name!r}; built-ins are {sorted(OBJECTS)} or an OBJ path")


def load_obj(path):
    """Read the ASCII OBJ subset: ``v x y z`` and triangular ``f a b c`` (1-based)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 for i in idx])
    return TriangleMesh(np.array(verts), np.array(faces))


def save_obj(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


@dataclass
class Placed:
    mesh: TriangleMesh
    rotation: np.ndarray
    translation: np.ndarray

    def world_vertices(self):
        return self.mesh.vertices @ np.asarray(self.rotation).T + np.asarray(self.translation)


@dataclass
class Camera:
    intrinsics: Intrinsics
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class SceneSpec:
    target: Placed | None
    camera: Camera
    clutter: list = field(default_factory=list)
    floor: Placed | None = None
    shift: tuple = (0, 0)


def _raycast_triangles(tris, k: Intrinsics, width, height, depth, ids, ident):
    """Möller–Trumbore against each triangle, restricted to its projected pixel bbox."""
    for v0, v1, v2 in tris:
        zs = np.array([v0[2], v1[2], v2[2]])
        if (zs <= _EPS).all():
            continue
        if (zs > _EPS).all():
            xs = np.array([v0[0], v1[0], v2[0]]) / zs * k.fx + k.cx
            ys = np.array([v0[1], v1[1], v2[1]]) / zs * k.fy + k.cy
            u0, u1 = max(int(math.floor(xs.min())), 0), min(int(math.ceil(xs.max())), width - 1)
            r0, r1 = max(int(math.floor(ys.min())), 0), min(int(math.ceil(ys.max())), height - 1)
            if u0 > u1 or r0 > r1:
                continue
        else:
            u0, u1, r0, r1 = 0, width - 1, 0, height - 1
        dx = ((np.arange(u0, u1 + 1) - k.cx) / k.fx)[None, :]
        dy = ((np.arange(r0, r1 + 1) - k.cy) / k.fy)[:, None]
        e1 = v1 - v0
        e2 = v2 - v0
        # pvec = D x e2 with D = (dx, dy, 1)
        px = dy * e2[2] - e2[1]
        py = e2[0] - dx * e2[2]
        pz = dx * e2[1] - dy * e2[0]
        det = e1[0] * px + e1[1] * py + e1[2] * pz
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -v0
        u = (tvec[0] * px + tvec[1] * py + tvec[2] * pz) * inv
        q = np.cross(tvec, e1)
        v = (dx * q[0] + dy * q[1] + q[2]) * inv
        t = float(e2 @ q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _EPS)
        if not hit.any():
            continue
        sub = depth[r0:r1 + 1, u0:u1 + 1]
        closer = hit & ((sub == 0) | (t < sub))
        sub[closer] = t[closer]
        ids[r0:r1 + 1, u0:u1 + 1][closer] = ident


def raycast(meshes, camera: Camera):
    """Depth and per-pixel mesh index (-1 for no hit) for a list of ``Placed`` meshes."""
    depth = np.zeros((camera.height, camera.width))
    ids = np.full((camera.height, camera.width), -1, dtype=np.int64)
    rc, tc = np.asarray(camera.rotation), np.asarray(camera.translation)
    for ident, placed in enumerate(meshes):
        verts = placed.world_vertices() @ rc.T + tc
        _raycast_triangles(verts[placed.mesh.triangles], camera.intrinsics, camera.width, camera.height,
                           depth, ids, ident)
    return depth, ids


def scene_meshes(scene: SceneSpec):
    meshes = []
    if scene.target is not None:
        meshes.append(scene.target)
    meshes.extend(scene.clutter)
    if scene.floor is not None:
        meshes.append(scene.floor)
    return meshes


def render_depth(scene: SceneSpec, width=None, height=None) -> DepthImage:
    """Z-buffered depth of every mesh in the scene (target, clutter, floor)."""
    cam = scene.camera
    if width is not None or height is not None:
        cam = Camera(cam.intrinsics, width or cam.width, height or cam.height, cam.rotation, cam.translation)
    depth, _ = raycast(scene_meshes(scene), cam)
    return DepthImage(depth=depth, intrinsics=cam.intrinsics)


# --------------------------------------------------------------------------- examples


@dataclass
class GenConfig:
    """Simulation settings. Angles are in degrees, lengths in meters."""

    object: str = "box"
    distractor: str = "stepped_block"
    clutter_objects: tuple = ("cylinder", "capped_cone", "l_bracket")
    clutter_min: int = 0
    clutter_max: int = 2
    distractor_in_clutter_prob: float = 0.3
    floor: bool = True
    floor_size: float = 2.5
    focal: float = 300.0
    distance_range: tuple = (0.9, 1.2)
    elevation: float = 30.0
    yaw_range: tuple = (-60.0, 60.0)
    pitch_range: tuple = (-30.0, 30.0)
    roll_range: tuple = (-10.0, 10.0)
    max_shift: int = 8
    patch: int = DEFAULT_PATCH
    scale: float = DEFAULT_SCALE
    min_visible: float = 0.6
    max_retries: int = 20
    bg_anchor_prob: float = 0.9
    bg_distractor_prob: float = 0.5
    clutter_gap: float = 0.02
    clutter_spread: float = 0.25

    def to_lines(self):
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (tuple, list)):
                val = ",".join(str(v) for v in val)
            out.append(f"{f.name} = {val}")
        return out

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        defaults = cls()
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            default = getattr(defaults, f.name)
            if isinstance(default, tuple):
                items = [s for s in str(raw).split(",") if s.strip()]
                conv = float if default and isinstance(default[0], float) else str
                kwargs[f.name] = tuple(conv(s.strip()) for s in items)
            elif isinstance(default, bool):
                kwargs[f.name] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                kwargs[f.name] = type(default)(raw)
        return cls(**kwargs)

    def pose_grid(self):
        r = math.radians
        return objective.default_pose_grid(
            yaw_range=(r(self.yaw_range[0]), r(self.yaw_range[1])),
            pitch_range=(r(self.pitch_range[0]), r(self.pitch_range[1])),
            elevation=r(self.elevation),
        )


@dataclass
class LabeledExample:
    patch: np.ndarray  # (3, H, W) float32
    label: objective.SoftLabel
    rotation: np.ndarray  # ground-truth object rotation (identity for background)
    view: tuple  # (yaw, pitch, roll) radians; zeros for background
    seed: int
    is_fg: bool
    shift: tuple = (0, 0)


def sample_view(rng, cfg: GenConfig):
    r = math.radians
    return (
        float(rng.uniform(r(cfg.yaw_range[0]), r(cfg.yaw_range[1]))),
        float(rng.uniform(r(cfg.pitch_range[0]), r(cfg.pitch_range[1]))),
        float(rng.uniform(r(cfg.roll_range[0]), r(cfg.roll_range[1]))),
    )


def _tilt(view, cfg):
    _, pitch, roll = view
    return objective.rot_z(roll) @ objective.rot_x(math.radians(cfg.elevation) + pitch)


def _footprint_radius(mesh):
    ext = mesh.extents
    return 0.5 * math.hypot(ext[0], ext[2])


def _floor_quad(foot, tilt, size):
    ex, ez = tilt[:, 0], tilt[:, 2]
    h = size / 2
    corners = np.array([foot - h * ex - h * ez, foot + h * ex - h * ez, foot + h * ex + h * ez, foot - h * ex + h * ez])
    return Placed(TriangleMesh(corners, [(0, 1, 2), (0, 2, 3)]), np.eye(3), np.zeros(3))


def _place_on_floor(mesh, tilt, yaw, floor_point):
    bottom = tilt @ np.array([0.0, mesh.bbox[1][1], 0.0])
    return Placed(mesh, tilt @ objective.rot_y(yaw), floor_point - bottom)


def _camera_for(cfg: GenConfig, half_extent, z_near):
    half = int(math.ceil(cfg.focal * half_extent / z_near)) + 2
    size = 2 * half + 1
    return Camera(Intrinsics(cfg.focal, cfg.focal, float(half), float(half)), size, size)


def _sample_clutter(rng, cfg, anchor_mesh, tilt, foot, n, allow_distractor=True):
    names = list(cfg.clutter_objects)
    out = []
    for _ in range(n):
        if allow_distractor and cfg.distractor and rng.random() < cfg.distractor_in_clutter_prob:
            name = cfg.distractor
        else:
            name = names[int(rng.integers(len(names)))]
        mesh = get_object(name)
        r_min = (_footprint_radius(anchor_mesh) if anchor_mesh is not None else 0.0) \
            + _footprint_radius(mesh) + cfg.clutter_gap
        radius = r_min + rng.uniform(0.0, cfg.clutter_spread)
        ang = rng.uniform(0.0, 2 * math.pi)
        point = foot + radius * (math.cos(ang) * tilt[:, 0] + math.sin(ang) * tilt[:, 2])
        out.append(_place_on_floor(mesh, tilt, rng.uniform(-math.pi, math.pi), point))
    return out


def _ortho(depth, cfg, center, patch):
    op = depth_to_orthopatch(depth, center=center, scale=cfg.scale, shape=(patch, patch))
    return op


def build_target_scene(mesh, view, cfg: GenConfig, distance, half_extent, rng=None, n_clutter=0,
                       allow_distractor=True):
    """Target at ``(0, 0, distance)`` resting on the floor, plus sampled clutter."""
    rot = objective.view_rotation(*view, elevation=math.radians(cfg.elevation))
    tilt = _tilt(view, cfg)
    center = np.array([0.0, 0.0, distance])
    target = Placed(mesh, rot, center)
    foot = center + tilt @ np.array([0.0, mesh.bbox[1][1], 0.0])
    clutter = _sample_clutter(rng, cfg, mesh, tilt, foot, n_clutter, allow_distractor) if n_clutter else []
    floor = _floor_quad(foot, tilt, cfg.floor_size) if cfg.floor else None
    z_near = distance - max(0.35, half_extent * 0.8)
    cam = _camera_for(cfg, half_extent, max(z_near, 0.2))
    return SceneSpec(target=target, camera=cam, clutter=clutter, floor=floor), rot


def _visible_fraction(scene: SceneSpec):
    full_depth, ids = raycast(scene_meshes(scene), scene.camera)
    alone, _ = raycast([scene.target], scene.camera)
    n_alone = int((alone > 0).sum())
    if n_alone == 0:
        return full_depth, 0.0
    return full_depth, float((ids == 0).sum()) / n_alone


def make_example(mesh, view, cfg: GenConfig, seed, grid=None) -> LabeledExample:
    """Render one foreground example for ``view`` = (yaw, pitch, roll) in radians."""
    grid = grid or cfg.pose_grid()
    rng = np.random.default_rng(seed)
    half_extent = (cfg.patch / 2 + cfg.max_shift + 2) * cfg.scale
    distance = float(rng.uniform(*cfg.distance_range))
    shift = tuple(int(s) for s in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
    for _ in range(cfg.max_retries):
        n_clutter = int(rng.integers(cfg.clutter_min, cfg.clutter_max + 1))
        scene, rot = build_target_scene(mesh, view, cfg, distance, half_extent, rng, n_clutter)
        depth_arr, frac = _visible_fraction(scene)
        if frac >= cfg.min_visible:
            break
    else:
        raise RenderError(f"target occluded in all {cfg.max_retries} clutter samples (seed {seed})")
    depth = DepthImage(depth_arr, scene.camera.intrinsics)
    center = (shift[0] * cfg.scale, shift[1] * cfg.scale)
    patch = _ortho(depth, cfg, center, cfg.patch)
    return LabeledExample(
        patch=patch.normals.astype(np.float32),
        label=objective.soft_labels(rot, grid),
        rotation=rot,
        view=tuple(view),
        seed=int(seed),
        is_fg=True,
        shift=shift,
    )


def make_background(cfg: GenConfig, seed) -> LabeledExample:
    """Clutter-only patch; with ``bg_distractor_prob`` the distractor sits at the center."""
    rng = np.random.default_rng(seed)
    half_extent = (cfg.patch / 2 + cfg.max_shift + 2) * cfg.scale
    distance = float(rng.uniform(*cfg.distance_range))
    view = sample_view(rng, cfg)
    tilt = _tilt(view, cfg)
    anchor = None
    if rng.random() < cfg.bg_anchor_prob:
        if cfg.distractor and rng.random() < cfg.bg_distractor_prob:
            name = cfg.distractor
        else:
            names = list(cfg.clutter_objects)
            name = names[int(rng.integers(len(names)))]
        anchor = get_object(name)
    center = np.array([0.0, 0.0, distance])
    if anchor is not None:
        rot = objective.view_rotation(*view, elevation=math.radians(cfg.elevation))
        placed = [Placed(anchor, rot, center)]
        foot = center + tilt @ np.array([0.0, anchor.bbox[1][1], 0.0])
    else:
        placed = []
        foot = center + tilt @ np.array([0.0, 0.08, 0.0])
    n_clutter = int(rng.integers(cfg.clutter_min, cfg.clutter_max + 1))
    placed += _sample_clutter(rng, cfg, anchor, tilt, foot, n_clutter, allow_distractor=True)
    floor = _floor_quad(foot, tilt, cfg.floor_size) if cfg.floor else None
    cam = _camera_for(cfg, half_extent, max(distance - 0.35, 0.2))
    scene = SceneSpec(target=None, camera=cam, clutter=placed, floor=floor)
    depth = render_depth(scene)
    shift = tuple(int(s) for s in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
    patch = _ortho(depth, cfg, (shift[0] * cfg.scale, shift[1] * cfg.scale), cfg.patch)
    label = objective.background_label()
    return LabeledExample(patch=patch.normals.astype(np.float32), label=label, rotation=np.eye(3),
                          view=(0.0, 0.0, 0.0), seed=int(seed), is_fg=False, shift=shift)


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    x: np.ndarray  # (N, 3, H, W) float32
    y_c: np.ndarray  # (N, 2)
    y_p: np.ndarray  # (N, 17)
    rotations: np.ndarray  # (N, 3, 3)
    records: list  # dicts: id, seed, kind, view
    config: GenConfig | None = None

    def __len__(self):
        return len(self.x)

    @property
    def is_fg(self):
        return self.y_c[:, 0] == 1.0

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y_c[idx], self.y_p[idx], self.rotations[idx],
                       [self.records[i] for i in idx], self.config)


def _gen_one(args):
    kind, view, seed, cfg = args
    if kind == "fg":
        return make_example(get_object(cfg.object), view, cfg, seed)
    return make_background(cfg, seed)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items, chunksize=8))
    return [fn(it) for it in items]


def plan_dataset(n_fg, n_bg, seed, cfg: GenConfig):
    """Deterministic (kind, view, seed) plan; shuffled fg/bg order."""
    if n_fg < 1 or n_bg < 1:
        raise ValueError("n_fg and n_bg must both be >= 1")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_fg + n_bg)
    views = [sample_view(rng, cfg) for _ in range(n_fg)] + [(0.0, 0.0, 0.0)] * n_bg
    kinds = ["fg"] * n_fg + ["bg"] * n_bg
    order = rng.permutation(n_fg + n_bg)
    return [(kinds[i], views[i], int(seeds[i])) for i in order]


def assemble(examples, plan, cfg):
    x = np.stack([e.patch for e in examples])
    y_c = np.stack([e.label.fg for e in examples])
    y_p = np.stack([e.label.pose for e in examples])
    rots = np.stack([e.rotation for e in examples])
    records = [dict(id=i, seed=s, kind=k, view=tuple(v)) for i, (k, v, s) in enumerate(plan)]
    return Dataset(x, y_c, y_p, rots, records, cfg)


def make_dataset(object_name, n_fg, bg_source=None, n_bg=None, seed=0, cfg: GenConfig | None = None, workers=1):
    """Shuffled pool of ``n_fg`` foreground and ``n_bg`` background examples.

    ``bg_source`` names the background generator; only synthetic clutter-only
    scenes (``"clutter"``) are available.
    """
    if bg_source not in (None, "clutter"):
        raise ValueError(f"unsupported background source {bg_source!r}")
    cfg = cfg or GenConfig()
    if object_name is not None and object_name != cfg.object:
        cfg = GenConfig(**{**asdict(cfg), "object": object_name})
    n_bg = n_fg if n_bg is None else n_bg
    plan = plan_dataset(n_fg, n_bg, seed, cfg)
    examples = _map(_gen_one, [(k, v, s, cfg) for k, v, s in plan], workers)
    return assemble(examples, plan, cfg)


def regenerate(records, cfg: GenConfig, workers=1):
    plan = [(r["kind"], tuple(r["view"]), int(r["seed"])) for r in records]
    examples = _map(_gen_one, [(k, v, s, cfg) for k, v, s in plan], workers)
    return assemble(examples, plan, cfg)


def save_dataset(ds: Dataset, directory):
    """One TNT1 tensor per example plus ``manifest.txt``."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"# {line}" for line in (ds.config or GenConfig()).to_lines()]
    lines.append("# id seed kind yaw pitch roll | fg bg | pose[17]")
    for rec, yc, yp in zip(ds.records, ds.y_c, ds.y_p):
        view = " ".join(repr(float(a)) for a in rec["view"])
        lab_c = " ".join(repr(float(a)) for a in yc)
        lab_p = " ".join(repr(float(a)) for a in yp)
        lines.append(f"{rec['id']} {rec['seed']} {rec['kind']} {view} | {lab_c} | {lab_p}")
    for rec, x in zip(ds.records, ds.x):
        save_tensor(os.path.join(directory, f"ex_{rec['id']:06d}.tnt"), x)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    cfg_map, records = {}, []
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if " = " in body:
                    key, val = body.split(" = ", 1)
                    cfg_map[key.strip()] = val.strip()
                continue
            if not line.strip():
                continue
            head, lab_c, lab_p = line.split("|")
            parts = head.split()
            records.append(dict(
                id=int(parts[0]), seed=int(parts[1]), kind=parts[2],
                view=tuple(float(p) for p in parts[3:6]),
                y_c=np.array([float(t) for t in lab_c.split()]),
                y_p=np.array([float(t) for t in lab_p.split()]),
            ))
    return GenConfig.from_mapping(cfg_map), records


def load_dataset(directory) -> Dataset:
    cfg, records = read_manifest(directory)
    x = np.stack([load_tensor(os.path.join(directory, f"ex_{r['id']:06d}.tnt")) for r in records])
    y_c = np.stack([r.pop("y_c") for r in records])
    y_p = np.stack([r.pop("y_p") for r in records])
    el = math.radians(cfg.elevation)
    rots = np.stack([objective.view_rotation(*r["view"], elevation=el) if r["kind"] == "fg" else np.eye(3)
                     for r in records])
    return Dataset(x, y_c, y_p, rots, records, cfg)


# --------------------------------------------------------------------------- test scenes


@dataclass
class TestScene:
    patch: OrthoPatch
    center: np.ndarray  # target center (X, Y, Z) in the camera frame
    bbox: tuple
    rotation: np.ndarray
    view: tuple
    seed: int


def make_scene(cfg: GenConfig, seed, size=256, n_clutter=2, with_distractor=True) -> TestScene:
    """Scene orthoPatch of ``size``x``size`` with the target somewhere a window can cover it.

    The target is offset from the patch center by up to ``(size - patch) / 2``
    cells; the distractor (if enabled) and ``n_clutter`` other objects stand on
    the floor around it.
    """
    rng = np.random.default_rng(seed)
    mesh = get_object(cfg.object)
    view = sample_view(rng, cfg)
    distance = float(rng.uniform(*cfg.distance_range))
    slack = (size - cfg.patch) // 2
    offset = rng.integers(-slack, slack + 1, size=2) * cfg.scale if slack > 0 else np.zeros(2)
    half_extent = (size / 2 + 2) * cfg.scale
    scene, rot = build_target_scene(mesh, view, cfg, distance, half_extent, rng, n_clutter=0)
    tilt = _tilt(view, cfg)
    foot = scene.target.translation + tilt @ np.array([0.0, mesh.bbox[1][1], 0.0])
    extra = []
    for _ in range(cfg.max_retries):
        extra = []
        if with_distractor and cfg.distractor:
            extra += _sample_clutter(rng, GenConfig(**{**asdict(cfg), "distractor_in_clutter_prob": 1.0}),
                                     mesh, tilt, foot, 1)
        extra += _sample_clutter(rng, cfg, mesh, tilt, foot, n_clutter, allow_distractor=False)
        scene.clutter = extra
        depth_arr, frac = _visible_fraction(scene)
        if frac >= cfg.min_visible:
            break
    else:
        raise RenderError(f"target occluded in all {cfg.max_retries} scene samples (seed {seed})")
    center_xy = (float(offset[0]), float(offset[1]))
    patch = _ortho(DepthImage(depth_arr, scene.camera.intrinsics), cfg, center_xy, size)
    ext = mesh.extents
    return TestScene(patch=patch, center=np.asarray(scene.target.translation, dtype=np.float64),
                     bbox=(float(ext[0]), float(ext[2]), float(ext[1])), rotation=rot, view=view, seed=int(seed))
