"""Minibatch SGD with momentum, periodic hard mining, and the gradient-check harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import network, objective, template_layer
from .tensor import as_dtype

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss or activations at epoch {epoch}, batch {batch} (learning rate too high?)")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    lam: float = 1.0
    hardmine_period: int = 5
    subset_fraction: float = 0.25
    seed: int = 0
    precision: str = "float32"
    lr_decay_epoch: int = 30
    lr_decay: float = 0.5
    head: str = "mixed"

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.lr_decay <= 0:
            raise ValueError("learning rate, momentum and decay must be non-negative (decay positive)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.hardmine_period < 1:
            raise ValueError("hardmine_period must be >= 1")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.head not in ("mixed", "pose-only"):
            raise ValueError(f"head must be 'mixed' or 'pose-only', got {self.head!r}")
        as_dtype(self.precision)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                kind = type(getattr(cls, f.name, None)) if hasattr(cls, f.name) else str
                kwargs[f.name] = kind(mapping[f.name]) if kind is not str else str(mapping[f.name])
        return cls(**kwargs)


def parse_kv(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path):
    with open(path) as fh:
        return TrainConfig.from_mapping(parse_kv(fh.read()))


# --------------------------------------------------------------------------- loss / gradients


def loss_and_grads(params, x, y_c, y_p, lam=1.0, head="mixed", backward_fn=None):
    """Mean mixed loss over a batch and gradients for every trainable array."""
    trace = network.forward(params, x)
    loss, per, g_c, g_p = objective.mixed_loss_batch(trace.p_c, trace.p_p, y_c, y_p, lam, head)
    grads = (backward_fn or network.backward)(params, trace, g_c, g_p)
    return loss, grads, trace


def example_losses(params, data, lam=1.0, head="mixed", batch_size=128, excess=False):
    """Per-example mixed loss; with ``excess`` minus the label entropy (a KL divergence, zero at a perfect fit)."""
    p_c, p_p = network.predict(params, data.x, batch_size)
    _, per, _, _ = objective.mixed_loss_batch(p_c.astype(np.float64), p_p.astype(np.float64), data.y_c, data.y_p,
                                              lam, head)
    if excess:
        per = per - objective.label_entropy(data.y_c, data.y_p, lam, head)
    return per


def sgd_step(params, grads, velocity, lr, momentum):
    for name, arr in params.trainable.items():
        v = velocity[name]
        v *= momentum
        v -= lr * grads[name]
        arr += v
    params.bump()


def hard_mine(params, pool, current_subset=None, fraction=0.25, lam=1.0, head="mixed", batch_size=None):
    """Indices of the ``ceil(fraction * |pool|)`` highest-loss examples, loss-descending.

    Examples are ranked by excess loss (mixed loss minus label entropy). Soft
    pose labels put a floor of about 2.4 under every foreground loss, so raw
    loss would rank a perfectly fitted foreground example above any
    background example that is not yet saturated.
    ``current_subset`` is accepted for interface symmetry; the mined subset is
    drawn from the whole pool regardless.
    """
    n = len(pool)
    k = math.ceil(fraction * n)
    if batch_size is not None and k < batch_size:
        raise ValueError(f"fraction * |pool| = {k} is smaller than the batch size {batch_size}")
    if k >= n:
        return np.arange(n)
    losses = example_losses(params, pool, lam, head, excess=True)
    order = np.argsort(-losses, kind="stable")
    return order[:k]


def predictions(params, data, head="mixed", batch_size=128):
    p_c, p_p = network.predict(params, data.x, batch_size)
    p_fg = p_c[:, 0] if head == "mixed" else objective.fg_probability(p_p)
    return p_fg, p_p


def accuracy(params, data, head="mixed"):
    """``(fg_acc, pose_acc)``.

    fg/bg is correct when ``p_fg > 0.5`` agrees with the label. The pose head
    is correct on background when it picks the background class, and on
    foreground when its argmax is one of the two highest-weighted soft-label
    poses (the closest or second closest quantized pose).
    """
    p_fg, p_p = predictions(params, data, head)
    fg = data.is_fg
    fg_acc = float(np.mean((p_fg > 0.5) == fg))
    pred = np.argmax(p_p, axis=1)
    ok = np.empty(len(data), dtype=bool)
    for i in range(len(data)):
        if fg[i]:
            top2 = np.argsort(np.round(-data.y_p[i, :objective.N_POSES], 12), kind="stable")[:2]
            ok[i] = pred[i] in top2
        else:
            ok[i] = pred[i] == objective.BACKGROUND
    return fg_acc, float(np.mean(ok))


@dataclass
class TrainResult:
    params: network.NetworkParams
    history: list  # epoch-averaged training loss
    subsets: list = field(default_factory=list)  # subset sizes per epoch


def train(params, data, cfg: TrainConfig, progress=None) -> TrainResult:
    """Train a copy of ``params``; the template maps are never touched."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.is_fg.all() or not data.is_fg.any():
        raise ValueError("training data must contain both foreground and background examples")
    p = params.astype(cfg.precision)
    dt = p.dtype
    x = data.x.astype(dt, copy=False)
    y_c = data.y_c.astype(np.float64)
    y_p = data.y_p.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    if cfg.subset_fraction < 1:
        subset = np.sort(rng.choice(n, size=math.ceil(cfg.subset_fraction * n), replace=False))
    else:
        subset = np.arange(n)
    velocity = {k: np.zeros_like(v) for k, v in p.trainable.items()}
    history, sizes = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_decay if epoch >= cfg.lr_decay_epoch else 1.0)
        if epoch > 0 and epoch % cfg.hardmine_period == 0 and cfg.subset_fraction < 1:
            subset = hard_mine(p, data, subset, cfg.subset_fraction, cfg.lam, cfg.head)
        order = subset[rng.permutation(len(subset))]
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, trace = loss_and_grads(p, x[idx], y_c[idx], y_p[idx], cfg.lam, cfg.head)
            finite = (math.isfinite(loss) and np.isfinite(trace.logits_c).all() and np.isfinite(trace.logits_p).all()
                      and all(np.isfinite(g).all() for g in grads.grads.values()))
            if not finite:
                raise TrainingDiverged(epoch, b)
            sgd_step(p, {k: g.astype(dt, copy=False) for k, g in grads.grads.items()}, velocity, lr, cfg.momentum)
            if not all(np.isfinite(v).all() for v in p.trainable.values()):
                raise TrainingDiverged(epoch, b)
            total += loss * len(idx)
        history.append(total / len(order))
        if epoch == cfg.epochs - 1:
            # the last update has not been through a forward pass yet
            with np.errstate(over="ignore", invalid="ignore"):
                tr = network.forward(p, x[idx], keep_cols=False)
            if not (np.isfinite(tr.logits_c).all() and np.isfinite(tr.logits_p).all()):
                raise TrainingDiverged(epoch, b)
        sizes.append(len(order))
        if progress is not None:
            progress(epoch, history[-1])
    return TrainResult(params=p, history=history, subsets=sizes)


# --------------------------------------------------------------------------- gradient check


@dataclass
class LayerCheck:
    name: str
    n_checked: int = 0
    n_skipped: int = 0
    max_rel_err: float = 0.0
    worst: tuple | None = None  # (coordinate, analytic, numeric)


@dataclass
class GradcheckReport:
    layers: list
    tol: float
    min_coords: int

    @property
    def passed(self):
        return all(layer.n_checked > 0 and layer.max_rel_err <= self.tol for layer in self.layers)

    @property
    def max_rel_err(self):
        return max(layer.max_rel_err for layer in self.layers)

    def lines(self):
        out = []
        for layer in self.layers:
            status = "ok" if layer.max_rel_err <= self.tol and layer.n_checked > 0 else "FAIL"
            out.append(f"{layer.name:10s} checked={layer.n_checked:4d} skipped={layer.n_skipped:4d} "
                       f"max_rel_err={layer.max_rel_err:.3e} {status}")
            if status == "FAIL" and layer.worst is not None:
                coord, a, nmr = layer.worst
                out.append(f"{'':10s} worst coordinate {coord}: analytic={a:.12e} numeric={nmr:.12e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return out


def gradcheck_problem(config=None, seed=0, batch=2, bias_scale=0.1):
    """Random 64-bit parameters, inputs and labels for a miniature templateNet."""
    config = config or network.mini_config()
    rng = np.random.default_rng(seed)
    bank = None
    if config.use_templates:
        if config.n_templates % 3:
            raise ValueError("template count must be a multiple of 3")
        bank = template_layer.random_bank(config.n_templates // 3, (config.template_size,) * 2, seed=seed)
    params = network.init_params(config, bank, seed=seed, precision="float64")
    for name, arr in params.trainable.items():
        if name.endswith(".b"):
            arr[...] = rng.uniform(-bias_scale, bias_scale, size=arr.shape)
    x = rng.uniform(0.0, 1.0, size=(batch, config.in_channels, config.in_size, config.in_size))
    grid = objective.default_pose_grid()
    y_c = np.zeros((batch, 2))
    y_p = np.zeros((batch, objective.N_POSE_CLASSES))
    for i in range(batch):
        if i % 2 == 0:
            lab = objective.soft_labels(objective.view_rotation(*rng.uniform(-0.5, 0.5, 3)), grid)
        else:
            lab = objective.background_label()
        y_c[i], y_p[i] = lab.fg, lab.pose
    return params, x, y_c, y_p


ORACLE_DTYPE = np.longdouble


def _oracle_copy(params):
    """Extended-precision copy whose template maps are a plain writable array."""
    out = params.copy()
    out.trainable = {k: v.astype(ORACLE_DTYPE) for k, v in params.trainable.items()}
    if params.templates is not None:
        maps = np.array(params.templates, dtype=ORACLE_DTYPE)
        out.templates = maps
        out._cast = {np.dtype(ORACLE_DTYPE): maps}
    return out


def gradcheck(config=None, trials=200, seed=0, eps=1e-6, tol=1e-5, kink=1e-4, lam=1.0, head="mixed",
              backward_fn=None, problem=None) -> GradcheckReport:
    """Compare 64-bit analytic gradients with central finite differences.

    Samples up to ``trials`` coordinates per layer (weights and bias together;
    every coordinate when the layer is smaller) plus the template maps.
    A coordinate is skipped when the probe crosses a ReLU kink, or moves a
    ReLU input of magnitude below ``kink`` by more than 1% of that magnitude.
    The difference quotient is evaluated in extended precision so that
    roundoff in the loss (about 1e-16 / eps in 64-bit) does not swamp small
    gradients.
    """
    params, x, y_c, y_p = problem or gradcheck_problem(config, seed)
    if params.dtype != np.float64:
        raise ValueError("gradcheck requires 64-bit parameters")
    rng = np.random.default_rng(seed + 1)
    trace = network.forward(params, x)
    _, _, g_c, g_p = objective.mixed_loss_batch(trace.p_c, trace.p_p, y_c, y_p, lam, head)
    grads = (backward_fn or network.backward)(params, trace, g_c, g_p)

    oracle = _oracle_copy(params)
    x_ext = np.asarray(x, dtype=ORACLE_DTYPE)
    eps_ext = ORACLE_DTYPE(eps)

    def evaluate():
        tr = network.forward(oracle, x_ext, keep_cols=False)
        _, per, _, _ = objective.mixed_loss_batch(tr.p_c, tr.p_p, y_c, y_p, lam, head)
        return per.mean(), tr.relu_inputs()

    _, base_relu = evaluate()

    def probe(arr, flat_index):
        orig = arr.flat[flat_index]
        arr.flat[flat_index] = orig + eps_ext
        lp, rp = evaluate()
        arr.flat[flat_index] = orig - eps_ext
        lm, rm = evaluate()
        arr.flat[flat_index] = orig
        for b, plus, minus in zip(base_relu, rp, rm):
            if ((plus > 0) != (b > 0)).any() or ((minus > 0) != (b > 0)).any():
                return None
            near = np.abs(b) < kink
            if near.any() and (np.abs(plus - minus)[near] > 0.01 * np.abs(b[near])).any():
                return None
        return float((lp - lm) / (2 * eps_ext))

    def check(name, targets):
        """``targets``: list of (label, array, analytic) tuples forming one layer."""
        result = LayerCheck(name)
        sizes = [t[1].size for t in targets]
        total = sum(sizes)
        offsets = np.cumsum([0] + sizes)
        for flat in rng.permutation(total):
            if result.n_checked >= trials:
                break
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            label, arr, analytic = targets[which]
            local = int(flat - offsets[which])
            numeric = probe(arr, local)
            if numeric is None:
                result.n_skipped += 1
                continue
            a = float(analytic.flat[local])
            rel = abs(a - numeric) / max(abs(numeric), 1e-8)
            result.n_checked += 1
            if rel >= result.max_rel_err:
                result.max_rel_err = rel
                result.worst = (f"{label}{tuple(int(i) for i in np.unravel_index(local, arr.shape))}", a, numeric)
        return result

    layers = []
    for name in network.layer_names(params.config):
        w, b = oracle.trainable[f"{name}.W"], oracle.trainable[f"{name}.b"]
        layers.append(check(name, [(f"{name}.W", w, grads.grads[f"{name}.W"]),
                                   (f"{name}.b", b, grads.grads[f"{name}.b"])]))
    if params.config.use_templates:
        layers.append(check("templates", [("T", oracle.templates, grads.template_grad)]))
    return GradcheckReport(layers=layers, tol=tol, min_coords=trials)
