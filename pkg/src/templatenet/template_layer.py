"""Fixed multiplicative template layer ``z = relu(zhat * T)`` and its template bank.

Template maps are rendered surface-normal views of the object, one map per
(viewpoint, normal channel) pair. They gate the base network's feature masks
channel by channel and are never trained.

Channel convention: the maps store ``(n_x + 1) / 2``, ``(n_y + 1) / 2`` and
``(1 - n_z) / 2``, i.e. the z channel is flipped so that a surface facing the
viewer reads 1.0. The orthoPatch input keeps camera-frame ``n_z <= 0`` (a
facing surface reads 0 in its z channel); the two are related by
``t_z = 1 - c_z`` on the object's support.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, load_tensor, relu_grad, save_tensor


@dataclass(frozen=True)
class TemplateBank:
    maps: np.ndarray  # (M, h, w), M = 3 * V
    viewpoints: tuple  # ((yaw, pitch, roll), ...) radians
    source_resolution: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # float32-representable so TNT1 round trips are exact
        maps = np.array(self.maps, dtype=np.float32).astype(np.float64)
        if maps.ndim != 3:
            raise ShapeError(f"template maps must be (M, h, w), got {maps.shape}")
        if len(self.viewpoints) == 0:
            raise ValueError("template bank needs at least one viewpoint")
        if maps.shape[0] != 3 * len(self.viewpoints):
            raise ShapeError(f"M={maps.shape[0]} maps but {len(self.viewpoints)} viewpoints (expected 3 per view)")
        if maps.min() < 0 or maps.max() > 1:
            raise ValueError("template values must lie in [0, 1]")
        empty = [m for m in range(maps.shape[0]) if not maps[m].any()]
        if empty:
            raise ValueError(f"template maps {empty} are entirely zero")
        maps.flags.writeable = False
        object.__setattr__(self, "maps", maps)

    @property
    def n_maps(self):
        return self.maps.shape[0]

    @property
    def spatial(self):
        return self.maps.shape[1:]


def _maps_of(bank):
    return bank.maps if isinstance(bank, TemplateBank) else np.asarray(bank)


def apply(bank, zhat):
    """``relu(zhat * maps)``; ``zhat`` is ``(M, h, w)`` or a batch ``(N, M, h, w)``."""
    maps = _maps_of(bank)
    zhat = np.asarray(zhat)
    if zhat.shape[-3:] != maps.shape or zhat.ndim not in (3, 4):
        raise ShapeError(f"feature masks {zhat.shape} do not match template maps {maps.shape}")
    return np.maximum(zhat * maps, 0)


def backward(bank, zhat, grad_z):
    """Returns ``(grad_zhat, grad_T)``.

    ``grad_T`` is summed over the batch when ``zhat`` is batched. It is exposed
    for verification only: templates are never updated.
    """
    maps = _maps_of(bank)
    zhat = np.asarray(zhat)
    if zhat.shape[-3:] != maps.shape or zhat.shape != np.shape(grad_z):
        raise ShapeError(f"shapes zhat {zhat.shape}, grad_z {np.shape(grad_z)}, maps {maps.shape} disagree")
    gate = grad_z * relu_grad(zhat * maps)
    grad_zhat = gate * maps
    grad_t = gate * zhat
    if grad_t.ndim == 4:
        grad_t = grad_t.sum(axis=0)
    return grad_zhat, grad_t


def area_downsample(img, target):
    """Block-average a ``(..., H, W)`` array to ``(..., h, w)``; ``H, W`` must be multiples."""
    img = np.asarray(img, dtype=np.float64)
    big_h, big_w = img.shape[-2:]
    h, w = target
    if big_h % h or big_w % w:
        raise ShapeError(f"cannot area-average {big_h}x{big_w} to {h}x{w}: not an integer factor")
    fh, fw = big_h // h, big_w // w
    return img.reshape(*img.shape[:-2], h, fh, w, fw).mean(axis=(-3, -1))


def viewpoint_grid(n_yaw, n_pitch, n_roll, yaw_range=(-60.0, 60.0), pitch_range=(-30.0, 30.0),
                   roll_range=(-30.0, 30.0)):
    """Cartesian grid of viewpoints in radians, spanning each range inclusively."""

    def steps(n, lo, hi):
        if n == 1:
            return [0.0]
        return [math.radians(lo + (hi - lo) * i / (n - 1)) for i in range(n)]

    return tuple((y, p, r) for r in steps(n_roll, *roll_range)
                 for p in steps(n_pitch, *pitch_range)
                 for y in steps(n_yaw, *yaw_range))


def full_viewpoints():
    """45 views: 5 yaw x 3 pitch x 3 roll."""
    return viewpoint_grid(5, 3, 3)


def desk_viewpoints():
    """9 views: 3 yaw x 3 pitch, roll 0."""
    return viewpoint_grid(3, 3, 1)


def render_template(mesh, viewpoint, render_res, extent, offset=(0.0, 0.0), cfg=None):
    """Normal-channel image ``(3, render_res, render_res)`` of ``mesh`` alone at ``viewpoint``."""
    from . import synthgen
    from .orthopatch import DepthImage, depth_to_orthopatch

    cfg = cfg or synthgen.GenConfig()
    distance = float(np.mean(cfg.distance_range))
    half_extent = extent / 2 + 2 * cfg.scale
    scene, _ = synthgen.build_target_scene(mesh, viewpoint, synthgen.GenConfig(**{**cfg.__dict__, "floor": False}),
                                           distance, half_extent)
    depth, _ = synthgen.raycast([scene.target], scene.camera)
    patch = depth_to_orthopatch(DepthImage(depth, scene.camera.intrinsics), center=offset,
                                scale=extent / render_res, shape=(render_res, render_res))
    img = patch.normals.copy()
    support = (img != 0).any(axis=0)
    img[2] = np.where(support, 1.0 - img[2], 0.0)
    return img


def build_bank(mesh, viewpoints, render_res, target_res, extent=None, offset=(0.0, 0.0), cfg=None) -> TemplateBank:
    """Render each viewpoint, map normals to [0, 1], area-average to ``target_res``.

    Args:
        mesh: object to render.
        viewpoints: sequence of (yaw, pitch, roll) in radians.
        render_res: render size in cells; a multiple of both ``target_res`` extents.
        target_res: (h, w) of the base network's output feature maps.
        extent: metric side length covered by the template (defaults to
            ``render_res`` cells at the simulation scale).
        offset: (X, Y) of the template center relative to the object center.
    """
    from . import synthgen

    cfg = cfg or synthgen.GenConfig()
    if len(viewpoints) == 0:
        raise ValueError("no viewpoints given")
    extent = extent if extent is not None else render_res * cfg.scale
    maps = []
    for vp in viewpoints:
        img = render_template(mesh, vp, render_res, extent, offset, cfg)
        if not img.any():
            raise synthgen.RenderError(f"empty template render at viewpoint {tuple(round(math.degrees(a), 2) for a in vp)} deg")
        maps.append(area_downsample(img, target_res))
    return TemplateBank(np.concatenate(maps), tuple(tuple(v) for v in viewpoints), render_res,
                        meta={"extent": extent, "offset": tuple(offset)})


def aligned_geometry(net_config, scale):
    """``(render_res, extent, offset)`` that line template cells up with the feature grid.

    Template cell ``i`` gets the ``step x step`` block of render cells centered
    on the input pixel where feature-map cell ``i``'s receptive field is
    centered (see ``NetConfig.template_footprint``).
    """
    first, step = net_config.template_footprint()
    n = net_config.template_size
    render_res = n * step
    half = net_config.in_size // 2
    off = (-half + 0.5 + first - step / 2 + render_res / 2) * scale
    return render_res, render_res * scale, (off, off)


def bank_for_network(mesh, net_config, viewpoints=None, cfg=None) -> TemplateBank:
    """Template bank of ``mesh`` shaped and aligned for ``net_config``'s template layer."""
    from . import synthgen

    cfg = cfg or synthgen.GenConfig()
    if viewpoints is None:
        viewpoints = desk_viewpoints()
    if 3 * len(viewpoints) != net_config.n_templates:
        raise ShapeError(f"{len(viewpoints)} viewpoints give {3 * len(viewpoints)} maps, "
                         f"network expects {net_config.n_templates}")
    render_res, extent, offset = aligned_geometry(net_config, cfg.scale)
    size = net_config.template_size
    return build_bank(mesh, viewpoints, render_res, (size, size), extent, offset, cfg)


def random_bank(n_views, spatial, seed=0, zero_fraction=0.3):
    """Synthetic bank for tests and gradient checks: values in (0.05, 1] with random voids."""
    rng = np.random.default_rng(seed)
    maps = rng.uniform(0.05, 1.0, size=(3 * n_views, *spatial))
    maps[rng.random(maps.shape) < zero_fraction] = 0.0
    for m in maps:
        if not m.any():
            m.flat[0] = 0.5
    views = tuple((0.0, 0.0, 0.0) for _ in range(n_views))
    return TemplateBank(maps, views, spatial[0])


def save_bank(bank: TemplateBank, directory):
    os.makedirs(directory, exist_ok=True)
    save_tensor(os.path.join(directory, "maps.tnt"), bank.maps)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write(f"source_resolution = {bank.source_resolution}\n")
        for key, val in sorted(bank.meta.items()):
            if isinstance(val, (tuple, list)):
                val = ",".join(repr(float(v)) for v in val)
            fh.write(f"{key} = {val}\n")
        for yaw, pitch, roll in bank.viewpoints:
            fh.write(f"view {float(yaw)!r} {float(pitch)!r} {float(roll)!r}\n")


def load_bank(directory) -> TemplateBank:
    maps = load_tensor(os.path.join(directory, "maps.tnt")).astype(np.float64)
    views, meta, res = [], {}, 0
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "view":
                views.append(tuple(float(p) for p in parts[1:4]))
            elif parts[0] == "source_resolution":
                res = int(parts[2])
            elif len(parts) >= 3 and parts[1] == "=":
                val = parts[2]
                meta[parts[0]] = tuple(float(v) for v in val.split(",")) if "," in val else float(val)
    return TemplateBank(maps, tuple(views), res, meta=meta)
