import math

import numpy as np
import pytest

from templatenet import evaluation, network, objective
from templatenet.evaluation import Detection, GroundTruth
from templatenet.orthopatch import OrthoPatch

GRID = objective.default_pose_grid()
BBOX = (0.30, 0.20, 0.10)


def det(world=(0.0, 0.0), p_fg=0.5, pose=0, pixel=(64, 64)):
    scores = np.full(17, 0.01)
    scores[pose] = 0.5
    return Detection(pixel=pixel, world=world, p_fg=p_fg, pose_class=pose, pose_scores=scores)


def gt(center=(0.0, 0.0), pose=0, bbox=BBOX):
    return GroundTruth(center=center, bbox=bbox, rotation=GRID.rotations[pose])


def patch(size):
    return OrthoPatch(normals=np.zeros((3, size, size)), scale=0.005, origin=(0.0025, 0.0025))


@pytest.fixture
def stub_predict(monkeypatch):
    """Score each window by the mean intensity of its central 32x32 block; pose class always 3."""
    def predict(params, x, batch_size=64):
        x = np.asarray(x, dtype=np.float64)
        score = x[:, 0, 48:80, 48:80].mean(axis=(1, 2))
        p_c = np.stack([score, 1 - score], axis=1)
        p_p = np.full((len(x), 17), 0.01)
        p_p[:, 3] = 0.5
        return p_c, p_p / p_p.sum(axis=1, keepdims=True)

    monkeypatch.setattr(network, "predict", predict)


class _Params:
    dtype = np.float64


def test_detection_invariants():
    with pytest.raises(ValueError, match="argmax"):
        Detection(pixel=(0, 0), world=(0, 0), p_fg=0.5, pose_class=2, pose_scores=np.eye(17)[5])
    with pytest.raises(ValueError):
        GroundTruth(center=(0, 0), bbox=(0.1, 0.0, 0.1), rotation=np.eye(3))


def test_window_counts():
    assert evaluation.window_origins((128, 128)) == [(0, 0)]
    assert len(evaluation.window_origins((192, 192), stride=32)) == 9
    with pytest.raises(ValueError, match="smaller"):
        evaluation.window_origins((127, 200))


def test_scan_single_window(stub_predict):
    dets = evaluation.scan_windows(_Params(), patch(128))
    assert len(dets) == 1
    assert dets[0].pixel == (64, 64)
    np.testing.assert_allclose(dets[0].world, (0.0025 + 64 * 0.005, 0.0025 + 64 * 0.005))
    assert dets[0].pose_class == 3


def test_scan_nine_windows_pre_nms(stub_predict):
    assert len(evaluation.scan_windows(_Params(), patch(192), stride=32)) == 9


def test_pasted_object_is_top_detection(stub_predict):
    p = patch(256)
    p.normals[:, 96 + 48:96 + 80, 32 + 48:32 + 80] = 1.0  # window with origin (96, 32)
    dets = evaluation.detect(_Params(), p, stride=16)
    assert dets[0].pixel == (96 + 64, 32 + 64)
    assert dets[0].p_fg == 1.0
    assert [d.p_fg for d in dets] == sorted((d.p_fg for d in dets), reverse=True)


def test_nms_radius():
    a = det(p_fg=0.9, pixel=(64, 64))
    b = det(p_fg=0.8, pixel=(64, 127))  # 63 px away: suppressed
    c = det(p_fg=0.7, pixel=(64, 128))  # exactly 64 px away: kept
    assert evaluation.nms([c, b, a]) == [a, c]


def test_nms_tie_breaks_by_pixel():
    a = det(p_fg=0.5, pixel=(80, 64))
    b = det(p_fg=0.5, pixel=(64, 80))
    assert evaluation.nms([a, b]) == [b]


@pytest.mark.parametrize("offset,expected", [(0.09, True), (0.11, False), (0.0, True)])
def test_localization_radius(offset, expected):
    angle = 0.7
    d = det(world=(offset * math.cos(angle), offset * math.sin(angle)))
    assert evaluation.is_localized(d, gt()) is expected


def test_localization_boundary_is_inclusive():
    r = max(BBOX) / 3
    assert evaluation.is_localized(det(world=(r, 0.0)), gt())
    assert evaluation.is_localized(det(world=(0.0, -r)), gt())
    assert not evaluation.is_localized(det(world=(np.nextafter(r, 1.0), 0.0)), gt())


def test_localization_ignores_depth():
    assert evaluation.is_localized(det(world=(0.05, 0.0)), gt(center=(0.0, 0.0, 2.0)))


def test_pose_rank_rules():
    j = 6
    g = gt(pose=j)
    ranking = evaluation.pose_ranking(GRID.rotations[j], GRID)
    assert ranking[0] == j
    assert evaluation.is_pose_correct(det(pose=j), g, GRID)
    assert evaluation.is_pose_correct(det(pose=int(ranking[1])), g, GRID)
    assert not evaluation.is_pose_correct(det(pose=int(ranking[2])), g, GRID)


def test_pose_tie_between_neighbours():
    (y0, p0, _), (y1, _, _) = GRID.angles[2], GRID.angles[3]
    rot = objective.view_rotation((y0 + y1) / 2, p0, 0.0)
    g = GroundTruth(center=(0, 0), bbox=BBOX, rotation=rot)
    assert list(evaluation.pose_ranking(rot, GRID)[:2]) == [2, 3]
    assert evaluation.is_pose_correct(det(pose=2), g, GRID)
    assert evaluation.is_pose_correct(det(pose=3), g, GRID)


def test_perfect_detector():
    gts = [gt(center=(0.1 * i, 0.0), pose=i) for i in range(5)]
    dets = [[det(world=(0.1 * i, 0.0), pose=i, p_fg=0.5 + 0.05 * i), det(world=(5.0, 5.0), p_fg=0.1)]
            for i in range(5)]
    curve = evaluation.pr_curve(dets, gts, GRID)
    for precision, recall, _ in curve:
        if recall > 0 and precision < 1:
            assert recall == 1.0  # only the trailing far-away detections are false
    assert [c for c in curve if c[2] >= 0.5] and all(c[0] == 1.0 for c in curve if c[2] >= 0.5)
    assert curve[-1][1] == 1.0
    assert evaluation.accuracy_table(dets, gts, GRID) == (100.0, 100.0)


def test_background_scored_above_target():
    gts = [gt() for _ in range(3)]
    dets = [[det(world=(1.0, 1.0), p_fg=0.9), det(world=(0.0, 0.0), p_fg=0.2)] for _ in range(3)]
    curve = evaluation.pr_curve(dets, gts, GRID)
    assert curve[0] == (0.0, 0.0, 0.9)
    assert curve[-1][:2] == (0.5, 1.0)


def test_seventy_percent():
    gts = [gt() for _ in range(10)]
    dets = [[det(world=(0.0, 0.0) if i < 7 else (1.0, 0.0))] for i in range(10)]
    assert evaluation.accuracy_table(dets, gts, GRID) == (70.0, 70.0)


def test_each_ground_truth_matched_once():
    dets = [[det(p_fg=0.9), det(p_fg=0.8, pixel=(200, 200))]]
    curve = evaluation.pr_curve(dets, [gt()], GRID)
    assert curve == [(1.0, 1.0, 0.9), (0.5, 1.0, 0.8)]


def test_pr_properties_random():
    rng = np.random.default_rng(0)
    gts = [gt(pose=int(rng.integers(16))) for _ in range(20)]
    dets = [[det(world=tuple(rng.normal(0, 0.1, 2)), pose=int(rng.integers(16)), p_fg=float(rng.random()))
             for _ in range(4)] for _ in range(20)]
    for mode in ("L", "L+P"):
        curve = evaluation.pr_curve(dets, gts, GRID, mode)
        p = np.array([c[0] for c in curve])
        r = np.array([c[1] for c in curve])
        t = np.array([c[2] for c in curve])
        assert ((0 <= p) & (p <= 1) & (0 <= r) & (r <= 1)).all()
        assert (np.diff(r) >= 0).all() and (np.diff(t) < 0).all()
    lo, lp = evaluation.accuracy_table(dets, gts, GRID)
    assert lo >= lp


def test_table_needs_ground_truth():
    with pytest.raises(ValueError):
        evaluation.accuracy_table([], [], GRID)
    with pytest.raises(ValueError):
        evaluation.pr_curve([[]], [], GRID)
    with pytest.raises(ValueError, match="mode"):
        evaluation.is_true_positive(det(), gt(), GRID, mode="P")


def test_pr_csv_and_table_format():
    text = evaluation.pr_csv([(1.0, 0.5, 0.75)])
    assert text == "threshold,precision,recall\n0.750000,1.000000,0.500000\n"
    table = evaluation.format_table([("CNN", {"box": (60.0, 40.0)}), ("templateNet", {"box": (70.0, 55.5)})],
                                    ["box"])
    lines = table.splitlines()
    assert lines[0].split() == ["method", "box", "L", "box", "L+P", "avg", "L", "avg", "L+P"]
    assert lines[2].split() == ["templateNet", "70.00", "55.50", "70.00", "55.50"]
    assert len({len(line) for line in lines}) == 1
