import math

import numpy as np
import pytest

from templatenet import network, objective, template_layer as tl, training
from templatenet.synthgen import Dataset
from templatenet.training import TrainConfig, TrainingDiverged


def toy_dataset(n=12, seed=0, size=16):
    """Random mini-config inputs: fg examples get a bright square, bg examples stay dim."""
    rng = np.random.default_rng(seed)
    grid = objective.default_pose_grid()
    x = rng.uniform(0, 0.2, (n, 3, size, size)).astype(np.float32)
    y_c, y_p, rots, recs = [], [], [], []
    for i in range(n):
        if i % 2 == 0:
            j = int(rng.integers(16))
            x[i, :, 4:12, 4:12] += 0.5 + 0.03 * j
            lab = objective.soft_labels(grid.rotations[j], grid)
            rots.append(grid.rotations[j])
        else:
            lab = objective.background_label()
            rots.append(np.eye(3))
        y_c.append(lab.fg)
        y_p.append(lab.pose)
        recs.append(dict(id=i, seed=i, kind="fg" if i % 2 == 0 else "bg", view=(0.0, 0.0, 0.0)))
    return Dataset(x, np.array(y_c), np.array(y_p), np.array(rots), recs)


def mini_params(seed=0):
    cfg = network.mini_config(3)
    return network.init_params(cfg, tl.random_bank(1, (cfg.template_size,) * 2, seed=seed), seed=seed)


def test_config_defaults_and_round_trip(tmp_path):
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.batch_size, cfg.epochs, cfg.hardmine_period, cfg.subset_fraction) == \
        (0.01, 0.9, 64, 50, 5, 0.25)
    custom = TrainConfig(lr=0.003, batch_size=7, head="pose-only", precision="float64", lam=0.5)
    path = tmp_path / "train.cfg"
    path.write_text("# comment\n" + custom.to_text())
    assert training.load_config(path) == custom


@pytest.mark.parametrize("kwargs", [dict(lr=-1.0), dict(hardmine_period=0), dict(subset_fraction=0.0),
                                    dict(subset_fraction=1.5), dict(batch_size=0), dict(head="pose"),
                                    dict(precision="float16")])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_parse_kv_rejects_garbage():
    with pytest.raises(ValueError, match="line 2"):
        training.parse_kv("lr = 0.1\nnonsense\n")


def test_zero_lr_leaves_params_unchanged():
    p = mini_params()
    res = training.train(p, toy_dataset(), TrainConfig(lr=0.0, epochs=3, batch_size=4, subset_fraction=1.0))
    for k, v in p.trainable.items():
        assert res.params.trainable[k].tobytes() == v.tobytes()


def test_same_seed_same_history_and_params():
    data = toy_dataset()
    cfg = TrainConfig(lr=0.01, epochs=4, batch_size=4, subset_fraction=0.5, hardmine_period=2, seed=3)
    a = training.train(mini_params(), data, cfg)
    b = training.train(mini_params(), data, cfg)
    assert a.history == b.history
    for k in a.params.trainable:
        assert a.params.trainable[k].tobytes() == b.params.trainable[k].tobytes()


def test_templates_untouched_and_input_params_not_mutated():
    p = mini_params(1)
    before = p.templates.copy()
    w_before = p.trainable["conv1.W"].copy()
    res = training.train(p, toy_dataset(), TrainConfig(lr=0.05, epochs=3, batch_size=4, subset_fraction=1.0))
    assert res.params.templates.tobytes() == before.tobytes()
    assert np.array_equal(p.trainable["conv1.W"], w_before)
    assert not np.array_equal(res.params.trainable["conv1.W"], w_before)


def test_loss_decreases_on_toy_data():
    res = training.train(mini_params(2), toy_dataset(16), TrainConfig(lr=0.03, epochs=30, batch_size=4,
                                                                      subset_fraction=1.0))
    assert res.history[-1] < res.history[0]


def test_divergence_aborts_with_batch_id():
    with pytest.raises(TrainingDiverged) as err:
        training.train(mini_params(3), toy_dataset(), TrainConfig(lr=1e8, epochs=5, batch_size=4,
                                                                  subset_fraction=1.0))
    assert "batch" in str(err.value) and err.value.batch >= 0


def test_requires_both_classes():
    data = toy_dataset()
    with pytest.raises(ValueError, match="both"):
        training.train(mini_params(), data.subset(np.arange(0, 12, 2)), TrainConfig(epochs=1))


def test_hard_mine_whole_pool():
    data = toy_dataset()
    np.testing.assert_array_equal(training.hard_mine(mini_params(), data, fraction=1.0), np.arange(len(data)))


@pytest.mark.parametrize("fraction", [0.1, 0.25, 0.5, 0.9])
def test_hard_mine_top_loss(fraction):
    data = toy_dataset(20, seed=4)
    p = mini_params(4)
    sub = training.hard_mine(p, data, fraction=fraction)
    assert len(sub) == math.ceil(fraction * len(data))
    assert len(set(sub.tolist())) == len(sub)
    losses = training.example_losses(p, data, excess=True)
    assert np.all(np.diff(losses[sub]) <= 0)
    rest = np.setdiff1d(np.arange(len(data)), sub)
    if len(rest):
        assert losses[sub].min() >= losses[rest].max()
    assert losses[sub].mean() >= losses.mean()


def test_hard_mine_rejects_subset_smaller_than_batch():
    with pytest.raises(ValueError, match="batch"):
        training.hard_mine(mini_params(), toy_dataset(), fraction=0.1, batch_size=4)


def test_accuracy_rules(monkeypatch):
    data = toy_dataset(4)  # examples 0 and 2 are foreground
    p_fg = np.array([0.9, 0.2, 0.4, 0.1])
    p_p = np.zeros((4, 17))
    rank0 = np.argsort(np.round(-data.y_p[0, :16], 12), kind="stable")
    rank2 = np.argsort(np.round(-data.y_p[2, :16], 12), kind="stable")
    p_p[0, rank0[1]] = 1.0  # second-closest pose counts
    p_p[1, objective.BACKGROUND] = 1.0
    p_p[2, rank2[-1]] = 1.0  # the farthest pose does not
    p_p[3, 0] = 1.0  # background predicted as a pose
    monkeypatch.setattr(training, "predictions", lambda params, d, head="mixed": (p_fg, p_p))
    assert training.accuracy(None, data) == (0.75, 0.5)


def test_gradcheck_passes_seed_0():
    report = training.gradcheck(trials=200, seed=0)
    assert report.passed, "\n".join(report.lines())
    names = [layer.name for layer in report.layers]
    assert names == ["conv1", "conv2", "conv3", "conv4", "conv5", "fc", "fg", "pose", "templates"]
    sizes = {name: report.layers[i] for i, name in enumerate(names)}
    assert sizes["conv4"].n_checked == 200
    assert sizes["fg"].n_checked + sizes["fg"].n_skipped == 16 * 2 + 2


def test_gradcheck_passes_seed_7():
    assert training.gradcheck(trials=200, seed=7).passed


def linear_problem():
    """Positive weights, biases and inputs: every ReLU stays active, so the net is affine up to the heads."""
    params, x, y_c, y_p = training.gradcheck_problem(seed=1)
    for name, arr in params.trainable.items():
        arr[...] = np.abs(arr) * 0.5 if name.endswith(".W") else np.abs(arr) + 0.05
    cfg = params.config
    params.attach_bank(tl.random_bank(1, (cfg.template_size,) * 2, seed=1, zero_fraction=0.0))
    return params, x, y_c, y_p


def test_gradcheck_linear_toy_is_tight():
    report = training.gradcheck(trials=50, seed=1, problem=linear_problem())
    assert all(layer.n_skipped == 0 for layer in report.layers)
    assert report.max_rel_err <= 1e-8


def test_gradcheck_catches_sign_flip():
    def flipped(params, trace, g_c, g_p):
        out = network.backward(params, trace, g_c, g_p)
        out.grads["conv4.W"] = -out.grads["conv4.W"]
        return out

    report = training.gradcheck(trials=20, seed=0, backward_fn=flipped)
    assert not report.passed
    bad = [layer for layer in report.layers if layer.max_rel_err > report.tol]
    assert [layer.name for layer in bad] == ["conv4"]
    text = "\n".join(report.lines())
    assert "worst coordinate conv4." in text and "analytic=" in text and "numeric=" in text
    assert text.endswith("FAIL (tol 1e-05)")


def test_gradcheck_requires_float64():
    params, x, y_c, y_p = training.gradcheck_problem()
    with pytest.raises(ValueError, match="64-bit"):
        training.gradcheck(problem=(params.astype("float32"), x, y_c, y_p))
