"""templateNet: base conv stack, fixed template layer, classification network, two heads.

Layout (default desk config)::

    x (3x128x128)
    conv1 3->16 k5 s2, relu          \
    conv2 16->32 k5 s2, relu          } base network
    conv3 32->M k3 s1, relu  = zhat  /
    z = relu(zhat * T)                  template layer (M = 3 * views, fixed)
    conv4 M->64 k3 s1, relu          \
    conv5 64->64 k3 s2, relu          } classification network
    fc -> 256, relu                   |
    fg head (2) / pose head (17)     /

Heads use the usual softmax ``p_i = exp(a_i) / sum_j exp(a_j)`` with
``a = W^T h + b``. Writing the softmax over negated logits is the same model
with ``W, b -> -W, -b``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import template_layer
from .objective import N_POSE_CLASSES, softmax
from .tensor import ShapeError, as_dtype, conv2d_backward, conv2d_forward, conv_output_size, load_tensor, relu, \
    relu_grad, save_tensor


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1

    def __str__(self):
        return f"{self.out_channels}x{self.kernel}s{self.stride}"

    @classmethod
    def parse(cls, text):
        out, rest = text.split("x")
        k, s = rest.split("s")
        return cls(int(out), int(k), int(s))


DESK_CONVS = (ConvSpec(16, 5, 2), ConvSpec(32, 5, 2), ConvSpec(27, 3, 1), ConvSpec(64, 3, 1), ConvSpec(64, 3, 2))


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    in_size: int = 128
    convs: tuple = DESK_CONVS
    template_after: int = 3
    use_templates: bool = True
    fc_width: int = 256
    n_fg: int = 2
    n_pose: int = N_POSE_CLASSES

    @property
    def n_templates(self):
        return self.convs[self.template_after - 1].out_channels

    def feature_sizes(self):
        """Spatial size after each conv layer."""
        sizes, s = [], self.in_size
        for spec in self.convs:
            s = conv_output_size(s, spec.kernel, spec.stride)
            sizes.append(s)
        return sizes

    @property
    def template_size(self):
        return self.feature_sizes()[self.template_after - 1]

    @property
    def flat_size(self):
        return self.convs[-1].out_channels * self.feature_sizes()[-1] ** 2

    def template_footprint(self):
        """``(first, step)``: input-pixel center of template-grid cell ``i`` is ``first + step * i``."""
        first, step = 0.0, 1
        for spec in self.convs[:self.template_after]:
            first += step * (spec.kernel - 1) / 2
            step *= spec.stride
        return first, step

    def to_lines(self):
        return [
            f"in_channels = {self.in_channels}",
            f"in_size = {self.in_size}",
            "convs = " + ",".join(str(c) for c in self.convs),
            f"template_after = {self.template_after}",
            f"use_templates = {self.use_templates}",
            f"fc_width = {self.fc_width}",
            f"n_fg = {self.n_fg}",
            f"n_pose = {self.n_pose}",
        ]

    @classmethod
    def from_mapping(cls, m):
        return cls(
            in_channels=int(m["in_channels"]),
            in_size=int(m["in_size"]),
            convs=tuple(ConvSpec.parse(t) for t in m["convs"].split(",")),
            template_after=int(m["template_after"]),
            use_templates=str(m["use_templates"]).lower() == "true",
            fc_width=int(m["fc_width"]),
            n_fg=int(m["n_fg"]),
            n_pose=int(m["n_pose"]),
        )

    def hash(self):
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:16]


def desk_config(n_views=9, use_templates=True):
    convs = list(DESK_CONVS)
    convs[2] = ConvSpec(3 * n_views, 3, 1)
    return NetConfig(convs=tuple(convs), use_templates=use_templates)


def mini_config(n_templates=3, use_templates=True):
    """3x16x16 input, five 3x3 convs, template layer of ``n_templates`` maps at 10x10."""
    convs = (ConvSpec(8, 3, 1), ConvSpec(8, 3, 1), ConvSpec(n_templates, 3, 1), ConvSpec(8, 3, 1), ConvSpec(8, 3, 2))
    return NetConfig(in_size=16, convs=convs, fc_width=16, use_templates=use_templates)


def layer_names(config: NetConfig):
    names = [f"conv{i}" for i in range(1, len(config.convs) + 1)]
    return names + ["fc", "fg", "pose"]


class NetworkParams:
    """Trainable arrays keyed ``<layer>.W`` / ``<layer>.b`` plus the fixed template maps.

    ``version`` increments on every in-place update so stale forward traces
    can be detected.
    """

    def __init__(self, config: NetConfig, arrays: dict, bank: template_layer.TemplateBank | None = None):
        self.config = config
        self.trainable = dict(arrays)
        self.version = 0
        self.bank = None
        self.templates = None
        self._check_shapes()
        if config.use_templates:
            if bank is None:
                raise ValueError("config uses a template layer but no template bank was given")
            self.attach_bank(bank)

    def attach_bank(self, bank):
        cfg = self.config
        expected = (cfg.n_templates, cfg.template_size, cfg.template_size)
        if bank.maps.shape != expected:
            raise ShapeError(f"template maps {bank.maps.shape} do not match base network output {expected}")
        self.bank = bank
        self.templates = bank.maps  # read-only array
        self._cast = {}

    def templates_as(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            arr = self.templates.astype(dtype)
            arr.flags.writeable = False
            self._cast[dtype] = arr
        return self._cast[dtype]

    def _check_shapes(self):
        for name, shape in expected_shapes(self.config).items():
            arr = self.trainable.get(name)
            if arr is None:
                raise ShapeError(f"missing parameter {name}")
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")

    @property
    def dtype(self):
        return self.trainable["conv1.W"].dtype

    def n_trainable(self):
        return int(sum(a.size for a in self.trainable.values()))

    def copy(self):
        out = NetworkParams.__new__(NetworkParams)
        out.config = self.config
        out.trainable = {k: v.copy() for k, v in self.trainable.items()}
        out.version = 0
        out.bank = self.bank
        out.templates = self.templates
        out._cast = getattr(self, "_cast", {})
        return out

    def astype(self, precision):
        out = self.copy()
        dt = as_dtype(precision)
        out.trainable = {k: v.astype(dt) for k, v in out.trainable.items()}
        return out

    def bump(self):
        self.version += 1


def expected_shapes(config: NetConfig):
    shapes = {}
    c_in = config.in_channels
    for i, spec in enumerate(config.convs, 1):
        shapes[f"conv{i}.W"] = (spec.out_channels, c_in, spec.kernel, spec.kernel)
        shapes[f"conv{i}.b"] = (spec.out_channels,)
        c_in = spec.out_channels
    shapes["fc.W"] = (config.flat_size, config.fc_width)
    shapes["fc.b"] = (config.fc_width,)
    shapes["fg.W"] = (config.fc_width, config.n_fg)
    shapes["fg.b"] = (config.n_fg,)
    shapes["pose.W"] = (config.fc_width, config.n_pose)
    shapes["pose.b"] = (config.n_pose,)
    return shapes


def init_params(config: NetConfig, bank=None, seed=0, precision="float32") -> NetworkParams:
    """Zero-mean uniform weights, zero biases.

    Layers feeding a ReLU use the He-scaled limit sqrt(6 / fan_in), the two
    heads 1 / sqrt(fan_in). With 1 / sqrt(fan_in) everywhere the activation
    scale shrinks about 1000x through the stack and SGD sits on the
    constant-prediction plateau for many epochs.
    """
    rng = np.random.default_rng(seed)
    dt = as_dtype(precision)
    arrays = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dt)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            gain = 1.0 if name.split(".")[0] in ("fg", "pose") else np.sqrt(6.0)
            lim = gain / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-lim, lim, size=shape).astype(dt)
    return NetworkParams(config, arrays, bank if config.use_templates else None)


@dataclass
class ForwardTrace:
    conv_inputs: list
    conv_cols: list
    conv_preacts: list
    zhat: np.ndarray
    template_preact: np.ndarray | None
    z: np.ndarray
    flat: np.ndarray
    fc_preact: np.ndarray
    hidden: np.ndarray
    logits_c: np.ndarray
    logits_p: np.ndarray
    p_c: np.ndarray
    p_p: np.ndarray
    params_key: tuple = field(repr=False, default=())

    def relu_inputs(self):
        """Every array that feeds a ReLU, in network order (kink-guard bookkeeping)."""
        out = list(self.conv_preacts)
        if self.template_preact is not None:
            out.append(self.template_preact)
        out.append(self.fc_preact)
        return out


def softmax_head(weights, bias, z):
    """Class probabilities ``softmax(z @ weights + bias)``; works on a vector or a batch."""
    return softmax(np.asarray(z) @ weights + bias)


def forward(params: NetworkParams, x, keep_cols=True) -> ForwardTrace:
    """Run the network on ``(3, H, W)`` or ``(N, 3, H, W)``; probabilities come back batched.

    ``keep_cols=False`` drops the im2col matrices (inference only; halves peak memory).
    """
    cfg = params.config
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (cfg.in_channels, cfg.in_size, cfg.in_size):
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input "
                         f"{(cfg.in_channels, cfg.in_size, cfg.in_size)}")
    p = params.trainable
    h = x
    conv_inputs, conv_cols, conv_preacts = [], [], []
    zhat = template_pre = z = None
    for i, spec in enumerate(cfg.convs, 1):
        conv_inputs.append(h)
        if keep_cols:
            a, cols = conv2d_forward(h, p[f"conv{i}.W"], p[f"conv{i}.b"], spec.stride, return_cols=True)
        else:
            a, cols = conv2d_forward(h, p[f"conv{i}.W"], p[f"conv{i}.b"], spec.stride), None
        conv_cols.append(cols)
        conv_preacts.append(a)
        h = relu(a)
        if i == cfg.template_after:
            zhat = h
            if cfg.use_templates:
                template_pre = zhat * params.templates_as(h.dtype)
                h = relu(template_pre)
            z = h
    n = x.shape[0]
    flat = h.reshape(n, -1)
    fc_pre = flat @ p["fc.W"] + p["fc.b"]
    hidden = relu(fc_pre)
    logits_c = hidden @ p["fg.W"] + p["fg.b"]
    logits_p = hidden @ p["pose.W"] + p["pose.b"]
    return ForwardTrace(
        conv_inputs=conv_inputs, conv_cols=conv_cols, conv_preacts=conv_preacts, zhat=zhat, template_preact=template_pre, z=z,
        flat=flat, fc_preact=fc_pre, hidden=hidden, logits_c=logits_c, logits_p=logits_p,
        p_c=softmax(logits_c), p_p=softmax(logits_p), params_key=(id(params), params.version),
    )


def predict(params: NetworkParams, x, batch_size=64):
    """Head probabilities ``(p_c, p_p)`` for a stack of inputs, evaluated in chunks."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    pcs, pps = [], []
    for start in range(0, len(x), batch_size):
        tr = forward(params, x[start:start + batch_size], keep_cols=False)
        pcs.append(tr.p_c)
        pps.append(tr.p_p)
    return np.concatenate(pcs), np.concatenate(pps)


@dataclass
class ParamGrads:
    grads: dict  # same keys as NetworkParams.trainable
    template_grad: np.ndarray | None  # dL/dT; never applied
    template_trainable: bool = False


def backward(params: NetworkParams, trace: ForwardTrace, grad_logits_c, grad_logits_p) -> ParamGrads:
    """Chain rule from head-logit gradients back to every trainable parameter.

    ``grad_logits_*`` are ``(N, classes)`` (or 1-D for a single example) and
    hold dL/d(logits); the template gradient is computed but flagged
    non-trainable.
    """
    if trace.params_key != (id(params), params.version):
        raise ValueError("forward trace was produced with different (or since-updated) parameters")
    cfg = params.config
    p = params.trainable
    gc = np.atleast_2d(np.asarray(grad_logits_c, dtype=params.dtype))
    gp = np.atleast_2d(np.asarray(grad_logits_p, dtype=params.dtype))
    if gc.shape != trace.logits_c.shape or gp.shape != trace.logits_p.shape:
        raise ShapeError(f"head gradient shapes {gc.shape}, {gp.shape} do not match logits "
                         f"{trace.logits_c.shape}, {trace.logits_p.shape}")
    g = {}
    g["fg.W"] = trace.hidden.T @ gc
    g["fg.b"] = gc.sum(axis=0)
    g["pose.W"] = trace.hidden.T @ gp
    g["pose.b"] = gp.sum(axis=0)
    g_hidden = gc @ p["fg.W"].T + gp @ p["pose.W"].T
    g_fc = g_hidden * relu_grad(trace.fc_preact)
    g["fc.W"] = trace.flat.T @ g_fc
    g["fc.b"] = g_fc.sum(axis=0)
    g_act = (g_fc @ p["fc.W"].T).reshape(trace.conv_preacts[-1].shape)
    grad_t = None
    for i in range(len(cfg.convs), 0, -1):
        if i == cfg.template_after and cfg.use_templates:
            g_act, grad_t = template_layer.backward(params.templates_as(g_act.dtype),
                                                    trace.zhat, g_act)
        g_pre = g_act * relu_grad(trace.conv_preacts[i - 1])
        g_in, g[f"conv{i}.W"], g[f"conv{i}.b"] = conv2d_backward(
            trace.conv_inputs[i - 1], p[f"conv{i}.W"], cfg.convs[i - 1].stride, g_pre,
            cols=trace.conv_cols[i - 1], need_input_grad=i > 1)
        g_act = g_in
    return ParamGrads(grads=g, template_grad=grad_t)


# --------------------------------------------------------------------------- checkpoints


def save_params(params: NetworkParams, directory):
    """TNT1 file per array plus ``manifest.txt`` (layer order, shapes, strides, config hash)."""
    os.makedirs(directory, exist_ok=True)
    cfg = params.config
    lines = [f"config_hash = {cfg.hash()}"] + cfg.to_lines()
    strides = {f"conv{i}": s.stride for i, s in enumerate(cfg.convs, 1)}
    for name, arr in params.trainable.items():
        layer = name.split(".")[0]
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {shape} stride={strides.get(layer, 0)}")
        save_tensor(os.path.join(directory, f"{name}.tnt"), arr)
    if params.bank is not None:
        template_layer.save_bank(params.bank, os.path.join(directory, "templates"))
        lines.append("templates = templates")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(directory, precision="float32") -> NetworkParams:
    mapping, names = {}, []
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("param "):
                names.append(line.split()[1])
            elif " = " in line:
                key, val = line.split(" = ", 1)
                mapping[key] = val
    cfg = NetConfig.from_mapping(mapping)
    if cfg.hash() != mapping.get("config_hash"):
        raise ValueError(f"{directory}: config hash mismatch (manifest {mapping.get('config_hash')}, "
                         f"computed {cfg.hash()})")
    dt = as_dtype(precision)
    arrays = {n: load_tensor(os.path.join(directory, f"{n}.tnt")).astype(dt) for n in names}
    bank = None
    if "templates" in mapping:
        bank = template_layer.load_bank(os.path.join(directory, mapping["templates"]))
    return NetworkParams(cfg, arrays, bank)


def without_templates(config: NetConfig):
    return replace(config, use_templates=False)
