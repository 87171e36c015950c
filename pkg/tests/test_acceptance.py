"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional trend check (criterion 6) trains six desk-scale networks and
takes the better part of an hour on one core.
"""

import math
import os
import statistics
import time

import numpy as np
import pytest

from templatenet import cli, evaluation, network, objective, synthgen, template_layer as tl, training, viz
from templatenet.orthopatch import Intrinsics, depth_to_orthopatch

# overfit smoke run (criterion 5): full-batch steps keep the early loss curve monotone
OVERFIT = dict(n_fg=25, n_bg=25, data_seed=5, lr=0.01, batch_size=50, epochs=200)

# trend run (criterion 6)
TREND = dict(n_fg=2000, n_bg=2000, data_seed=11, scenes=20, scene_seed=1000, seeds=(0, 1, 2),
             lr=0.01, batch_size=16, epochs=20, subset_fraction=0.25, hardmine_period=5, lr_decay_epoch=15)


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line past pytest's capture; returns the verdict for the assert."""

    def emit(number, title, ok, detail, elapsed, budget):
        status = "PASS" if ok else "FAIL"
        limit = f" of {budget:g}s budget" if budget is not None else ""
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {title}: {status} ({detail}; {elapsed:.1f}s{limit})")
        return ok

    return emit


@pytest.fixture(scope="module")
def overfit_run():
    t0 = time.perf_counter()
    data = synthgen.make_dataset("box", OVERFIT["n_fg"], "clutter", OVERFIT["n_bg"], seed=OVERFIT["data_seed"])
    cfg = network.desk_config()
    bank = tl.bank_for_network(synthgen.get_object("box"), cfg)
    params = network.init_params(cfg, bank, seed=0)
    tc = training.TrainConfig(lr=OVERFIT["lr"], batch_size=OVERFIT["batch_size"], epochs=OVERFIT["epochs"],
                              subset_fraction=1.0, seed=0)
    result = training.train(params, data, tc)
    return data, bank, result, time.perf_counter() - t0


def test_criterion_1_gradient_correctness(report):
    t0 = time.perf_counter()
    rep = training.gradcheck(network.mini_config(3), trials=200, seed=0, eps=1e-6, tol=1e-5, kink=1e-4)
    elapsed = time.perf_counter() - t0
    coords_ok = all(layer.n_checked >= 200 or layer.n_checked + layer.n_skipped == _layer_size(layer.name)
                    for layer in rep.layers)
    ok = rep.passed and coords_ok and elapsed < 60
    detail = f"max rel err {rep.max_rel_err:.2e} over {sum(layer.n_checked for layer in rep.layers)} coordinates"
    assert report(1, "gradient correctness", ok, detail, elapsed, 60), "\n".join(rep.lines())


def _layer_size(name):
    cfg = network.mini_config(3)
    if name == "templates":
        return cfg.n_templates * cfg.template_size ** 2
    shapes = network.expected_shapes(cfg)
    return int(np.prod(shapes[f"{name}.W"]) + np.prod(shapes[f"{name}.b"]))


def test_criterion_2_template_contracts(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = network.desk_config()
    bank = tl.bank_for_network(synthgen.get_object("box"), cfg)
    zhat = rng.standard_normal((8, *bank.maps.shape))
    z = tl.apply(bank, zhat)
    contained = not z[:, bank.maps == 0].any()
    homogeneous = all(np.allclose(tl.apply(bank, a * zhat), a * z, rtol=1e-12, atol=0) for a in (1e-3, 0.5, 7.0))
    with_t = network.init_params(cfg, bank).n_trainable()
    without = network.init_params(network.without_templates(cfg)).n_trainable()
    elapsed = time.perf_counter() - t0
    ok = contained and homogeneous and with_t == without and elapsed < 5
    detail = f"containment {contained}, homogeneity {homogeneous}, parameters {with_t} vs {without}"
    assert report(2, "template-layer contracts", ok, detail, elapsed, 5)


def test_criterion_3_objective_oracles(report):
    t0 = time.perf_counter()
    grid = objective.default_pose_grid()
    worst = 0.0
    for lam in (0.5, 1.0, 2.0):
        for lab in (objective.soft_labels(grid.rotations[3], grid), objective.background_label()):
            loss, _, _ = objective.mixed_loss(np.full(2, 0.5), np.full(17, 1 / 17), lab, lam)
            worst = max(worst, abs(loss - (math.log(2) + lam * math.log(17))))
    argmax_ok = all(int(np.argmax(objective.soft_labels(grid.rotations[j], grid).pose)) == j for j in range(16))
    j = 9
    yawed = objective.rot_y(math.pi / 2) @ grid.rotations[j]
    e4 = abs(objective.pose_weights(yawed, grid)[j] - math.exp(-4.0))
    rng = np.random.default_rng(0)
    sums = []
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        q *= np.sign(np.linalg.det(q))
        sums.append(abs(objective.soft_labels(q, grid).pose.sum() - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and argmax_ok and e4 <= 1e-12 and max(sums) <= 1e-12 and elapsed < 1
    detail = f"uniform-loss err {worst:.1e}, e^-4 err {e4:.1e}, label sum err {max(sums):.1e}"
    assert report(3, "objective oracles", ok, detail, elapsed, 1)


def _render_mask(distance, focal=575.0):
    mesh = synthgen.get_object("box")
    size = int(math.ceil(focal * 0.5 / distance)) * 2 + 1
    cam = synthgen.Camera(Intrinsics(focal, focal, size // 2, size // 2), size, size)
    rot = objective.view_rotation(0.4, 0.3, 0.0)
    scene = synthgen.SceneSpec(target=synthgen.Placed(mesh, rot, np.array([0.0, 0.0, distance])), camera=cam)
    return depth_to_orthopatch(synthgen.render_depth(scene), scale=0.005).foreground_mask()


def test_criterion_4_orthopatch_scale_invariance(report):
    t0 = time.perf_counter()
    near, far = _render_mask(1.0), _render_mask(2.0)
    iou = (near & far).sum() / (near | far).sum()
    ratio = far.sum() / near.sum()
    elapsed = time.perf_counter() - t0
    ok = iou >= 0.9 and 0.9 <= ratio <= 1.1 and elapsed < 30
    assert report(4, "orthoPatch scale invariance", ok, f"IoU {iou:.3f}, pixel ratio {ratio:.3f}", elapsed, 30)


def test_criterion_5_overfit_smoke(overfit_run, report):
    data, _, result, elapsed = overfit_run
    fg_acc, pose_acc = training.accuracy(result.params, data)
    h = result.history
    decreasing = all(h[e + 1] < h[e] + 1e-3 for e in range(4))
    ok = fg_acc >= 0.99 and pose_acc >= 0.99 and decreasing and elapsed < 300
    detail = (f"fg acc {fg_acc:.3f}, pose acc {pose_acc:.3f}, epochs 1-5 loss "
              f"{', '.join(f'{v:.3f}' for v in h[:5])}, final {h[-1]:.3f}")
    assert report(5, "overfit smoke test", ok, detail, elapsed, 300)


def _train_and_score(data, scenes, grid, use_templates, seed):
    cfg = network.desk_config(use_templates=use_templates)
    bank = tl.bank_for_network(synthgen.get_object("box"), cfg) if use_templates else None
    params = network.init_params(cfg, bank, seed=seed)
    tc = training.TrainConfig(lr=TREND["lr"], batch_size=TREND["batch_size"], epochs=TREND["epochs"],
                              subset_fraction=TREND["subset_fraction"], hardmine_period=TREND["hardmine_period"],
                              lr_decay_epoch=TREND["lr_decay_epoch"], seed=seed)
    result = training.train(params, data, tc)
    _, _, (acc_l, acc_lp) = evaluation.evaluate_scenes(result.params, scenes, grid)
    return acc_l, acc_lp


def test_criterion_6_directional_trend(report):
    t0 = time.perf_counter()
    gen = synthgen.GenConfig(object="box", distractor="stepped_block")
    data = synthgen.make_dataset("box", TREND["n_fg"], "clutter", TREND["n_bg"], seed=TREND["data_seed"], cfg=gen,
                                 workers=os.cpu_count())
    scenes = [synthgen.make_scene(gen, TREND["scene_seed"] + i) for i in range(TREND["scenes"])]
    grid = gen.pose_grid()
    scores = {True: [], False: []}
    for seed in TREND["seeds"]:
        for use in (True, False):
            scores[use].append(_train_and_score(data, scenes, grid, use, seed))
    med_t = statistics.median(s[1] for s in scores[True])
    med_c = statistics.median(s[1] for s in scores[False])
    elapsed = time.perf_counter() - t0
    ok = med_t >= med_c and elapsed < 45 * 60
    detail = (f"median L+P templateNet {med_t:.1f}% vs CNN {med_c:.1f}%; "
              f"per-seed (L, L+P) templateNet {scores[True]}, CNN {scores[False]}")
    assert report(6, "directional regularisation trend", ok, detail, elapsed, 45 * 60)


def test_criterion_7_metric_units(report):
    t0 = time.perf_counter()
    grid = objective.default_pose_grid()
    checks = []
    for bbox in ((0.30, 0.20, 0.10), (0.12, 0.33, 0.07), (0.05, 0.05, 0.21)):
        r = max(bbox) / 3
        gt = evaluation.GroundTruth(center=(0.0, 0.0), bbox=bbox, rotation=grid.rotations[0])
        for on in ((r, 0.0), (0.0, -r)):
            off = tuple(np.nextafter(v, math.copysign(1.0, v)) if v else 0.0 for v in on)
            checks += [evaluation.is_localized(_det(on, 0), gt), not evaluation.is_localized(_det(off, 0), gt)]
    for j in range(16):
        gt = evaluation.GroundTruth(center=(0, 0), bbox=(0.3, 0.2, 0.1), rotation=grid.rotations[j])
        rank = evaluation.pose_ranking(grid.rotations[j], grid)
        checks += [evaluation.is_pose_correct(_det((0, 0), int(rank[k])), gt, grid) == (k < 2) for k in range(4)]
    rng = np.random.default_rng(0)
    for _ in range(20):
        gts = [evaluation.GroundTruth(center=(0, 0), bbox=(0.3, 0.2, 0.1), rotation=grid.rotations[rng.integers(16)])
               for _ in range(10)]
        dets = [[_det(tuple(rng.normal(0, 0.1, 2)), int(rng.integers(16)), float(rng.random())) for _ in range(3)]
                for _ in range(10)]
        acc_l, acc_lp = evaluation.accuracy_table(dets, gts, grid)
        checks.append(acc_l >= acc_lp)
        for mode in ("L", "L+P"):
            recall = [c[1] for c in evaluation.pr_curve(dets, gts, grid, mode)]
            checks.append(all(b >= a for a, b in zip(recall, recall[1:])))
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 1
    assert report(7, "evaluation metric units", ok, f"{sum(checks)}/{len(checks)} checks", elapsed, 1)


def _det(world, pose, p_fg=0.5):
    scores = np.full(17, 0.01)
    scores[pose] = 0.9
    return evaluation.Detection(pixel=(64, 64), world=world, p_fg=p_fg, pose_class=pose, pose_scores=scores)


def _files(path):
    out = {}
    for dirpath, _, names in os.walk(path):
        for name in names:
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = fh.read()
    return out


def test_criterion_8_reproducibility(tmp_path, monkeypatch, report):
    t0 = time.perf_counter()
    monkeypatch.setenv("TEMPLATENET_RUN_DIR", str(tmp_path))
    codes = []
    for tag in ("a", "b"):
        codes.append(cli.main(["gen-data", "--run", f"data_{tag}", "--n-fg", "6", "--n-bg", "6", "--seed", "3"]))
        codes.append(cli.main(["train", "--run", f"train_{tag}", "--data", str(tmp_path / f"data_{tag}" / "data"),
                               "--epochs", "3", "--batch-size", "4", "--subset-fraction", "0.5",
                               "--hardmine-period", "2", "--seed", "3"]))
        codes.append(cli.main(["eval", "--run", f"eval_{tag}", "--checkpoint",
                               str(tmp_path / f"train_{tag}" / "checkpoint"), "--n-scenes", "3", "--seed", "3"]))
    same_data = _files(tmp_path / "data_a" / "data") == _files(tmp_path / "data_b" / "data")
    same_hist = _files(tmp_path / "train_a")["loss_history.txt"] == _files(tmp_path / "train_b")["loss_history.txt"]
    same_table = all(_files(tmp_path / "eval_a")[n] == _files(tmp_path / "eval_b")[n]
                     for n in ("table.txt", "pr_L.csv", "pr_LP.csv"))
    elapsed = time.perf_counter() - t0
    ok = codes == [0] * 6 and same_data and same_hist and same_table
    detail = f"exit codes {codes}, dataset {same_data}, loss history {same_hist}, tables {same_table}"
    assert report(8, "reproducibility", ok, detail, elapsed, None)


def test_criterion_9_visualization(overfit_run, tmp_path, report):
    t0 = time.perf_counter()
    data, bank, result, _ = overfit_run
    x = data.x[int(np.flatnonzero(data.is_fg)[0])]
    path = tmp_path / "response.pgm"
    viz.dump_template_response(result.params, bank, x, path)
    viz.dump_filters(result.params, 1, tmp_path / "filters.pgm")
    viz.dump_orthopatch(x, tmp_path / "input.ppm")
    img = viz.read_pnm(path)
    valid = viz.read_pnm(tmp_path / "filters.pgm").shape == (25, 25) and viz.read_pnm(tmp_path / "input.ppm").shape \
        == (128, 128, 3)
    n = bank.spatial[0]
    valid &= img.shape == (bank.n_maps * (n + 1) + 1, 3 * (n + 1) + 1)
    violations = sum(int(viz.panel(img, m, 2, (n, n))[viz.panel(img, m, 1, (n, n)) == 0].astype(bool).sum())
                     for m in range(bank.n_maps))
    nonzero = sum(int(viz.panel(img, m, 2, (n, n)).astype(bool).sum()) for m in range(bank.n_maps))
    elapsed = time.perf_counter() - t0
    ok = valid and violations == 0
    detail = f"{bank.n_maps} rows, {nonzero} lit response pixels, {violations} outside template support"
    assert report(9, "visualization", ok, detail, elapsed, None)
