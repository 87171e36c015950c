"""Pose quantization, soft pose labels and the two-headed mixed cross-entropy.

Rotation convention used throughout the package: the camera looks along +Z
with +Y pointing down the image, and an object's up axis is its local -Y.
A viewpoint ``(yaw, pitch, roll)`` maps to

    R = Rz(roll) @ Rx(elevation + pitch) @ Ry(yaw)

where ``elevation`` is a fixed tilt that lets the camera see the top of the
object. Soft labels only depend on relative rotations ``R_j @ R_i.T``, and the
Frobenius distance of those from the identity is unchanged by a common
left factor, so the elevation never affects labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

N_POSES = 16
N_POSE_CLASSES = N_POSES + 1  # 16 poses + background
BACKGROUND = N_POSES  # 0-based index of the background pose class
PROB_FLOOR = 1e-12
DEFAULT_ELEVATION = math.radians(30.0)


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def view_rotation(yaw, pitch, roll, elevation=DEFAULT_ELEVATION):
    """Object-to-camera rotation for a viewpoint given in radians."""
    return rot_z(roll) @ rot_x(elevation + pitch) @ rot_y(yaw)


def is_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        return False
    return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


def rotation_distance(r_a, r_b):
    """``||I - R_a R_b^T||_F``, the distance of the relative rotation from identity."""
    return float(np.linalg.norm(np.eye(3) - r_a @ np.asarray(r_b).T))


@dataclass(frozen=True)
class PoseGrid:
    """Quantized pose classes. ``angles[j]`` is the (yaw, pitch, roll) of class ``j``."""

    rotations: np.ndarray  # (16, 3, 3)
    angles: tuple

    def __post_init__(self):
        if self.rotations.shape != (N_POSES, 3, 3):
            raise ValueError(f"pose grid needs {N_POSES} rotations, got {self.rotations.shape}")
        for j, r in enumerate(self.rotations):
            if not is_rotation(r, tol=1e-9):
                raise ValueError(f"pose grid entry {j} is not a proper rotation")

    def distances(self, rotation):
        rel = self.rotations @ np.asarray(rotation, dtype=np.float64).T  # R_j R_i^T
        return np.linalg.norm(np.eye(3) - rel, axis=(1, 2))


def bin_centers(lo, hi, n):
    """Centers of ``n`` equal-width bins spanning ``[lo, hi]``."""
    width = (hi - lo) / n
    return [lo + width * (i + 0.5) for i in range(n)]


def default_pose_grid(yaw_range=(-math.pi / 3, math.pi / 3), pitch_range=(-math.pi / 6, math.pi / 6),
                      n_yaw=8, n_pitch=2, elevation=DEFAULT_ELEVATION):
    """8 yaw bins x 2 pitch bins over the training viewing domain, roll 0."""
    if n_yaw * n_pitch != N_POSES:
        raise ValueError(f"n_yaw * n_pitch must be {N_POSES}")
    angles = []
    for pitch in bin_centers(*pitch_range, n_pitch):
        for yaw in bin_centers(*yaw_range, n_yaw):
            angles.append((yaw, pitch, 0.0))
    rots = np.stack([view_rotation(y, p, r, elevation) for y, p, r in angles])
    return PoseGrid(rotations=rots, angles=tuple(angles))


@dataclass(frozen=True)
class SoftLabel:
    fg: np.ndarray  # (2,): [fg, bg]
    pose: np.ndarray  # (17,)

    @property
    def is_foreground(self):
        return bool(self.fg[0] == 1.0)


def pose_weights(view_rotation_matrix, grid: PoseGrid):
    """Unnormalized soft-label weights ``exp(-d_j^2)`` for the 16 pose classes."""
    d = grid.distances(view_rotation_matrix)
    return np.exp(-d * d)


def soft_labels(view_rotation_matrix, grid: PoseGrid) -> SoftLabel:
    r = np.asarray(view_rotation_matrix, dtype=np.float64)
    if not is_rotation(r, tol=1e-6):
        raise ValueError("view rotation is not a proper rotation (orthogonality violated beyond 1e-6)")
    w = pose_weights(r, grid)
    pose = np.zeros(N_POSE_CLASSES)
    pose[:N_POSES] = w / w.sum()
    return SoftLabel(fg=np.array([1.0, 0.0]), pose=pose)


def background_label() -> SoftLabel:
    pose = np.zeros(N_POSE_CLASSES)
    pose[BACKGROUND] = 1.0
    return SoftLabel(fg=np.array([0.0, 1.0]), pose=pose)


def softmax(logits, axis=-1):
    logits = np.asarray(logits)
    with np.errstate(over="ignore"):  # a gap beyond the float range just means exp(...) = 0
        shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class _ClampCounter:
    count = 0


clamp_warnings = _ClampCounter()


def _safe_log(p):
    p = np.asarray(p)
    bad = p <= 0
    if bad.any():
        clamp_warnings.count += int(bad.sum())
        log.warning("clamped %d non-positive probabilities to %g", int(bad.sum()), PROB_FLOOR)
        p = np.where(bad, PROB_FLOOR, p)
    return np.log(p)


def mixed_loss(p_c, p_p, label: SoftLabel, lam=1.0):
    """Mixed fg/bg + pose cross-entropy for one example.

    Returns ``(loss, grad_logits_c, grad_logits_p)`` where the gradients are
    taken with respect to the pre-softmax logits of each head.
    """
    p_c = np.asarray(p_c, dtype=np.float64)
    p_p = np.asarray(p_p, dtype=np.float64)
    loss = -(label.fg @ _safe_log(p_c) + lam * (label.pose @ _safe_log(p_p)))
    return float(loss), p_c - label.fg, lam * (p_p - label.pose)


def mixed_loss_batch(p_c, p_p, y_c, y_p, lam=1.0, head="mixed"):
    """Batch mean of the mixed loss and per-logit gradients of that mean.

    ``head="pose-only"`` drops the fg/bg term (the single-headed ablation).
    Returns ``(mean_loss, per_example_losses, grad_c, grad_p)``.
    """
    n = p_c.shape[0]
    ce_c = -(y_c * _safe_log(p_c)).sum(axis=1)
    ce_p = -(y_p * _safe_log(p_p)).sum(axis=1)
    if head == "mixed":
        per = ce_c + lam * ce_p
        g_c = (p_c - y_c) / n
        g_p = lam * (p_p - y_p) / n
    elif head == "pose-only":
        per = ce_p
        g_c = np.zeros_like(p_c)
        g_p = (p_p - y_p) / n
    else:
        raise ValueError(f"unknown head mode {head!r}")
    return float(per.mean()), per, g_c, g_p


def label_entropy(y_c, y_p, lam=1.0, head="mixed"):
    """Per-example entropy of the targets: the floor of the per-example mixed loss."""

    def ent(y):
        y = np.asarray(y, dtype=np.float64)
        return -(y * np.log(np.where(y > 0, y, 1.0))).sum(axis=1)

    if head == "pose-only":
        return ent(y_p)
    return ent(y_c) + lam * ent(y_p)


def fg_probability(p_p):
    """Foreground probability read off the pose head: total mass on the 16 pose classes."""
    p_p = np.asarray(p_p)
    return p_p[..., :N_POSES].sum(axis=-1)
