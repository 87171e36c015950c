"""Sliding-window detection on scene orthoPatches and L / L+P scoring."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import network, objective
from .orthopatch import OrthoPatch

WINDOW = 128
DEFAULT_STRIDE = 16
NMS_RADIUS = 64


@dataclass
class Detection:
    """One scanned window.

    ``pixel`` is the (row, col) of the window center in the scene patch,
    ``world`` its orthographic (X, Y) position. ``pose_class`` is a 0-based
    index into the pose grid.
    """

    pixel: tuple
    world: tuple
    p_fg: float
    pose_class: int
    pose_scores: np.ndarray

    def __post_init__(self):
        expected = int(np.argmax(self.pose_scores[:objective.N_POSES]))
        if self.pose_class != expected:
            raise ValueError(f"pose_class {self.pose_class} is not the argmax {expected} of the pose entries")


@dataclass
class GroundTruth:
    center: tuple  # (X, Y) or (X, Y, Z); only X, Y are compared
    bbox: tuple  # (w, d, h) meters
    rotation: np.ndarray

    def __post_init__(self):
        if len(self.bbox) != 3 or min(self.bbox) <= 0:
            raise ValueError(f"bbox extents must be three positive lengths, got {self.bbox}")


def window_origins(shape, window=WINDOW, stride=DEFAULT_STRIDE):
    h, w = shape
    if h < window or w < window:
        raise ValueError(f"scene patch {h}x{w} is smaller than the {window}x{window} window")
    if stride < 1:
        raise ValueError("stride must be positive")
    return [(r, c) for r in range(0, h - window + 1, stride) for c in range(0, w - window + 1, stride)]


def scan_windows(params, patch: OrthoPatch, stride=DEFAULT_STRIDE, head="mixed", batch_size=64):
    """Every stride-spaced window, scored; returns unsorted, un-suppressed detections."""
    origins = window_origins(patch.shape, WINDOW, stride)
    normals = np.asarray(patch.normals, dtype=params.dtype)
    dets = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = np.stack([normals[:, r:r + WINDOW, c:c + WINDOW] for r, c in chunk])
        p_c, p_p = network.predict(params, x, batch_size)
        p_fg = p_c[:, 0] if head == "mixed" else objective.fg_probability(p_p)
        for (r, c), pf, pp in zip(chunk, p_fg, p_p):
            row, col = r + WINDOW // 2, c + WINDOW // 2
            pp = np.asarray(pp, dtype=np.float64)
            dets.append(Detection(pixel=(row, col), world=patch.cell_center(row, col), p_fg=float(pf),
                                  pose_class=int(np.argmax(pp[:objective.N_POSES])), pose_scores=pp))
    return dets


def sort_detections(dets):
    return sorted(dets, key=lambda d: (-d.p_fg, d.pixel))


def nms(dets, radius=NMS_RADIUS):
    """Greedy suppression: drop any window centered closer than ``radius`` px to a kept one."""
    kept = []
    for d in sort_detections(dets):
        if all((d.pixel[0] - k.pixel[0]) ** 2 + (d.pixel[1] - k.pixel[1]) ** 2 >= radius ** 2 for k in kept):
            kept.append(d)
    return kept


def detect(params, patch: OrthoPatch, stride=DEFAULT_STRIDE, head="mixed", nms_radius=NMS_RADIUS):
    """Detections sorted by ``p_fg`` descending (ties: lower row, then column), after NMS."""
    return nms(scan_windows(params, patch, stride, head), nms_radius)


def is_localized(det: Detection, gt: GroundTruth) -> bool:
    radius = max(gt.bbox) / 3.0
    dx = det.world[0] - gt.center[0]
    dy = det.world[1] - gt.center[1]
    return bool(np.hypot(dx, dy) <= radius)


def pose_ranking(rotation, grid: objective.PoseGrid):
    """Grid indices sorted by distance to ``rotation``; ties go to the lower index.

    Distances equal to within 1e-9 count as tied, so poses that are exactly
    equidistant are not reordered by roundoff.
    """
    return np.argsort(np.round(grid.distances(rotation), 9), kind="stable")


def is_pose_correct(det: Detection, gt: GroundTruth, grid: objective.PoseGrid) -> bool:
    if not 0 <= det.pose_class < len(grid.rotations):
        raise ValueError(f"pose_class {det.pose_class} outside the grid")
    return bool(det.pose_class in pose_ranking(gt.rotation, grid)[:2])


def is_true_positive(det, gt, grid, mode="L+P"):
    if mode == "L":
        return is_localized(det, gt)
    if mode == "L+P":
        return is_localized(det, gt) and is_pose_correct(det, gt, grid)
    raise ValueError(f"unknown mode {mode!r}")


def pr_curve(detections, ground_truths, grid, mode="L+P"):
    """``[(precision, recall, threshold), ...]`` as the ``p_fg`` threshold is lowered.

    ``detections[i]`` are the detections of scene ``i``, whose single target
    is ``ground_truths[i]``. Each ground truth is matched at most once.
    """
    if not ground_truths:
        raise ValueError("need at least one ground truth")
    if len(detections) != len(ground_truths):
        raise ValueError("one detection list per ground truth is required")
    pool = sorted(((d.p_fg, i, d.pixel, d) for i, dets in enumerate(detections) for d in dets),
                  key=lambda t: (-t[0], t[1], t[2]))
    matched = set()
    tp = 0
    curve = []
    for k, (score, scene, _, det) in enumerate(pool):
        if scene not in matched and is_true_positive(det, ground_truths[scene], grid, mode):
            matched.add(scene)
            tp += 1
        last_at_threshold = k + 1 == len(pool) or pool[k + 1][0] != score
        if last_at_threshold:
            curve.append((tp / (k + 1), tp / len(ground_truths), score))
    return curve


def accuracy_table(detections, ground_truths, grid):
    """``(L, L+P)`` percentages: share of scenes whose top detection is a true positive."""
    if not ground_truths:
        raise ValueError("need at least one ground truth")
    hits_l = hits_lp = 0
    for dets, gt in zip(detections, ground_truths):
        if not dets:
            continue
        top = sort_detections(dets)[0]
        if is_localized(top, gt):
            hits_l += 1
            if is_pose_correct(top, gt, grid):
                hits_lp += 1
    n = len(ground_truths)
    return 100.0 * hits_l / n, 100.0 * hits_lp / n


def evaluate_scenes(params, scenes, grid, stride=DEFAULT_STRIDE, head="mixed"):
    """Detect on each ``synthgen.TestScene``; returns ``(detections, ground_truths, (L, L+P))``."""
    dets, gts = [], []
    for sc in scenes:
        dets.append(detect(params, sc.patch, stride, head))
        gts.append(GroundTruth(center=tuple(sc.center[:2]), bbox=sc.bbox, rotation=sc.rotation))
    return dets, gts, accuracy_table(dets, gts, grid)


def pr_csv(curve) -> str:
    out = io.StringIO()
    out.write("threshold,precision,recall\n")
    for precision, recall, threshold in curve:
        out.write(f"{threshold:.6f},{precision:.6f},{recall:.6f}\n")
    return out.getvalue()


def format_table(rows, objects):
    """Aligned text table: one row per method, an ``L`` and ``L+P`` column per object, then averages.

    ``rows`` is a list of ``(method, {object: (L, L+P)})``.
    """
    header = ["method"] + [f"{o} {k}" for o in objects for k in ("L", "L+P")] + ["avg L", "avg L+P"]
    body = []
    for method, scores in rows:
        cells = [method]
        for o in objects:
            cells += [f"{scores[o][0]:.2f}", f"{scores[o][1]:.2f}"]
        cells += [f"{np.mean([scores[o][0] for o in objects]):.2f}",
                  f"{np.mean([scores[o][1] for o in objects]):.2f}"]
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for r in [header] + body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"
