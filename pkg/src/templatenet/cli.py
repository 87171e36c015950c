"""``templatenet`` command line: gen-data, gen-bank, train, gradcheck, detect, eval, viz.

Every subcommand writes into ``<root>/<run>`` where ``root`` is
``$TEMPLATENET_RUN_DIR`` (default ``./runs``) and ``run`` is ``--run``
(default: the subcommand name). The run directory gets ``config.txt`` with
every effective setting and ``VERSION``. Settings can come from ``--config``
(``key = value`` lines, keys are flag names with underscores); flags win.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure
(diverged training, failed gradient check, ...). A failed run leaves a
``.failed`` marker in its run directory.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import traceback
from dataclasses import asdict, fields

import numpy as np

from . import __version__, evaluation, network, orthopatch, synthgen, template_layer, training, viz


class UsageError(Exception):
    """Bad flags, config keys or input paths; exit code 1."""


class RunFailure(Exception):
    """The run itself failed; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- options

COMMON = {
    "run": (str, None, "run name under the run root (default: subcommand name)"),
    "config": (str, None, "key = value settings file; flags win on conflict"),
    "seed": (int, 0, "random seed"),
    "workers": (int, None, "parallel worker processes (default: available cores)"),
}

COMMANDS = {
    "gen-data": {
        "object": (str, "box", "target object name or OBJ path"),
        "n_fg": (int, 100, "foreground examples"),
        "n_bg": (int, 100, "background examples"),
    },
    "gen-bank": {
        "object": (str, "box", "object to render"),
        "templates": (int, 27, "template maps (3 per viewpoint)"),
    },
    "train": {
        "data": (str, None, "dataset directory (gen-data output)"),
        "bank": (str, None, "template bank directory; rendered from the data's object when omitted"),
        "templates": (int, 27, "template maps (3 per viewpoint)"),
        "no_template_layer": (bool, False, "plain CNN baseline without the template layer"),
        "head": (str, "mixed", "mixed | pose-only"),
        "lr": (float, 0.01, "learning rate"),
        "momentum": (float, 0.9, "SGD momentum"),
        "batch_size": (int, 64, "minibatch size"),
        "epochs": (int, 50, "training epochs"),
        "lam": (float, 1.0, "pose-loss weight"),
        "hardmine_period": (int, 5, "epochs between hard-mining passes"),
        "subset_fraction": (float, 0.25, "training subset as a fraction of the pool"),
        "precision": (str, "float32", "float32 | float64"),
        "lr_decay_epoch": (int, 30, "epoch at which the learning rate is scaled"),
        "lr_decay": (float, 0.5, "learning-rate scale factor"),
    },
    "gradcheck": {
        "trials": (int, 200, "coordinates sampled per layer"),
        "templates": (int, 3, "template maps in the miniature network"),
    },
    "detect": {
        "checkpoint": (str, None, "trained checkpoint directory"),
        "depth": (str, None, "DPT1 depth file (with .intrinsics sidecar); a synthetic scene when omitted"),
        "object": (str, "box", "target object for synthetic scenes"),
        "scene_size": (int, 256, "scene orthoPatch side in cells"),
        "stride": (int, 16, "window stride in cells"),
        "head": (str, "mixed", "mixed | pose-only"),
    },
    "eval": {
        "checkpoint": (str, None, "trained checkpoint directory"),
        "object": (str, "box", "target object"),
        "n_scenes": (int, 20, "synthetic test scenes"),
        "scene_size": (int, 256, "scene orthoPatch side in cells"),
        "stride": (int, 16, "window stride in cells"),
        "head": (str, "mixed", "mixed | pose-only"),
        "method": (str, "templateNet", "row label in the accuracy table"),
    },
    "viz": {
        "checkpoint": (str, None, "trained checkpoint directory"),
        "layer": (int, 1, "conv layer whose filters are tiled"),
        "per_channel": (bool, False, "one tile per input channel instead of the channel mean"),
        "data": (str, None, "dataset to take the response input from (first foreground example)"),
        "object": (str, "box", "object for a generated response input when --data is omitted"),
        "channels": (str, None, "comma-separated template channels (default: all)"),
    },
}


PATH_KEYS = ("data", "bank", "checkpoint", "depth")


def build_parser():
    parser = _Parser(prog="templatenet", description="templateNet toolkit")
    parser.add_argument("--version", action="version", version=f"templatenet {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for key, (kind, _, help_text) in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_text)
            else:
                p.add_argument(flag, dest=key, type=kind, default=None, help=help_text)
    return parser


def _coerce(kind, key, raw):
    if kind is bool:
        low = str(raw).strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}")


def resolve(command, ns):
    """Effective settings: defaults, then ``--config`` file, then explicit flags.

    Config keys that belong to the simulation (``GenConfig``) are kept in
    ``settings["gen"]``.
    """
    spec = {**COMMON, **COMMANDS[command]}
    settings = {k: default for k, (_, default, _) in spec.items()}
    gen = {}
    if ns.config is not None:
        if not os.path.isfile(ns.config):
            raise UsageError(f"config file not found: {ns.config}")
        with open(ns.config) as fh:
            try:
                mapping = training.parse_kv(fh.read())
            except ValueError as exc:
                raise UsageError(f"{ns.config}: {exc}")
        gen_keys = {f.name for f in fields(synthgen.GenConfig)}
        for key, raw in mapping.items():
            if key in spec and key != "config":
                settings[key] = _coerce(spec[key][0], key, raw)
            elif key in gen_keys:
                gen[key] = raw
            elif key == "command":
                continue
            else:
                raise UsageError(f"{ns.config}: unknown key {key!r} for {command}")
    for key in spec:
        val = getattr(ns, key, None)
        if val is not None:
            settings[key] = val
    for key in PATH_KEYS:
        if settings.get(key) is not None:
            settings[key] = os.path.abspath(settings[key])
    if settings["workers"] is None:
        settings["workers"] = os.cpu_count() or 1
    if settings["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    try:
        settings["gen"] = synthgen.GenConfig.from_mapping(gen)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad simulation setting: {exc}")
    if "object" in settings and settings["object"] is not None:
        try:
            synthgen.get_object(settings["object"])
        except (KeyError, ValueError, OSError) as exc:
            raise UsageError(f"unknown object {settings['object']!r}: {exc}")
        settings["gen"] = synthgen.GenConfig(**{**asdict(settings["gen"]), "object": settings["object"]})
    if settings.get("head") not in (None, "mixed", "pose-only"):
        raise UsageError(f"--head must be mixed or pose-only, got {settings['head']!r}")
    if "templates" in settings and (settings["templates"] < 3 or settings["templates"] % 3):
        raise UsageError("--templates must be a positive multiple of 3")
    return settings


def run_root():
    return os.environ.get("TEMPLATENET_RUN_DIR", os.path.join(os.getcwd(), "runs"))


def prepare_run_dir(command, settings):
    run = settings["run"] or command
    if os.sep in run or run in ("", ".", ".."):
        raise UsageError(f"--run must be a plain name, got {run!r}")
    path = os.path.join(run_root(), run)
    if os.path.exists(path):
        if not os.path.isfile(os.path.join(path, "VERSION")):
            raise UsageError(f"{path} exists and is not a previous run directory; refusing to replace it")
        shutil.rmtree(path)
    os.makedirs(path)
    with open(os.path.join(path, "config.txt"), "w") as fh:
        fh.write(f"command = {command}\n")
        for key, val in settings.items():
            if key in ("gen", "run", "config", "workers") or val is None:
                continue
            fh.write(f"{key} = {val}\n")
        for line in settings["gen"].to_lines():
            fh.write(line + "\n")
    with open(os.path.join(path, "VERSION"), "w") as fh:
        fh.write(f"templatenet {__version__}\n")
    return path


def _require_dir(settings, key, marker="manifest.txt"):
    path = settings.get(key)
    if path is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    if not os.path.isfile(os.path.join(path, marker)):
        raise UsageError(f"{path}: not a {key} directory (no {marker})")
    return path


def viewpoints_for(n_templates):
    views = n_templates // 3
    if views == 45:
        return template_layer.full_viewpoints()
    if views == 9:
        return template_layer.desk_viewpoints()
    return template_layer.viewpoint_grid(views, 1, 1)


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(s, out):
    if s["n_fg"] < 1 or s["n_bg"] < 1:
        raise UsageError("--n-fg and --n-bg must be >= 1")
    ds = synthgen.make_dataset(s["object"], s["n_fg"], "clutter", s["n_bg"], s["seed"], s["gen"], s["workers"])
    synthgen.save_dataset(ds, os.path.join(out, "data"))
    print(f"wrote {len(ds)} examples to {os.path.join(out, 'data')}")


def _bank(s, gen, config):
    mesh = synthgen.get_object(gen.object)
    return template_layer.bank_for_network(mesh, config, viewpoints_for(config.n_templates), gen)


def cmd_gen_bank(s, out):
    config = network.desk_config(n_views=s["templates"] // 3)
    bank = _bank(s, s["gen"], config)
    template_layer.save_bank(bank, os.path.join(out, "bank"))
    print(f"wrote {bank.n_maps} template maps of {bank.spatial[0]}x{bank.spatial[1]} to {os.path.join(out, 'bank')}")


def train_config(s):
    keys = {f.name for f in fields(training.TrainConfig)}
    try:
        return training.TrainConfig(**{k: v for k, v in s.items() if k in keys})
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(s, out):
    data_dir = _require_dir(s, "data")
    tc = train_config(s)
    use_templates = not s["no_template_layer"]
    bank = None
    if use_templates and s["bank"] is not None:
        bank = template_layer.load_bank(_require_dir(s, "bank"))
        if bank.n_maps != s["templates"]:
            raise UsageError(f"bank has {bank.n_maps} maps but --templates is {s['templates']}")
    data = synthgen.load_dataset(data_dir)
    config = network.desk_config(n_views=s["templates"] // 3, use_templates=use_templates)
    if use_templates and bank is None:
        bank = _bank(s, data.config, config)
    params = network.init_params(config, bank, seed=tc.seed, precision=tc.precision)
    with open(os.path.join(out, "loss_history.txt"), "w") as fh:
        def progress(epoch, loss):
            fh.write(f"{epoch} {float(loss)!r}\n")
            fh.flush()

        try:
            result = training.train(params, data, tc, progress)
        except training.TrainingDiverged as exc:
            raise RunFailure(str(exc))
    network.save_params(result.params, os.path.join(out, "checkpoint"))
    fg_acc, pose_acc = training.accuracy(result.params, data, tc.head)
    with open(os.path.join(out, "accuracy.txt"), "w") as fh:
        fh.write(f"train_fg_accuracy = {float(fg_acc)!r}\ntrain_pose_accuracy = {float(pose_acc)!r}\n")
    print(f"final loss {result.history[-1]:.6f}; train accuracy fg {fg_acc:.4f} pose {pose_acc:.4f}")


def cmd_gradcheck(s, out):
    if s["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    report = training.gradcheck(network.mini_config(n_templates=s["templates"]), trials=s["trials"], seed=s["seed"])
    text = "\n".join(report.lines()) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    if not report.passed:
        raise RunFailure(f"gradient check failed (max relative error {report.max_rel_err:.3e})")


def _load_checkpoint(s):
    path = _require_dir(s, "checkpoint")
    try:
        return network.load_params(path)
    except (ValueError, OSError) as exc:
        raise UsageError(f"{path}: {exc}")


def cmd_detect(s, out):
    params = _load_checkpoint(s)
    if s["depth"] is not None:
        if not os.path.isfile(s["depth"]):
            raise UsageError(f"depth file not found: {s['depth']}")
        d = orthopatch.load_depth(s["depth"])
        pts = orthopatch.backproject(d)
        if len(pts) == 0:
            raise RunFailure("depth image has no valid pixels")
        center = tuple(pts[:, :2].mean(axis=0))
        patch = orthopatch.depth_to_orthopatch(d, center=center, scale=s["gen"].scale,
                                               shape=(s["scene_size"], s["scene_size"]))
        gt = None
    else:
        scene = synthgen.make_scene(s["gen"], s["seed"], size=s["scene_size"])
        patch, gt = scene.patch, scene
    dets = evaluation.detect(params, patch, s["stride"], s["head"])
    with open(os.path.join(out, "detections.csv"), "w") as fh:
        fh.write("row,col,x,y,p_fg,pose_class\n")
        for d in dets:
            fh.write(f"{d.pixel[0]},{d.pixel[1]},{d.world[0]:.6f},{d.world[1]:.6f},{d.p_fg:.6f},{d.pose_class}\n")
    if gt is not None:
        with open(os.path.join(out, "ground_truth.txt"), "w") as fh:
            fh.write(f"center = {gt.center[0]:.6f},{gt.center[1]:.6f}\nbbox = {','.join(f'{b:.6f}' for b in gt.bbox)}\n")
    print(f"{len(dets)} detections; top p_fg {dets[0].p_fg:.4f} at pixel {dets[0].pixel}")


def cmd_eval(s, out):
    params = _load_checkpoint(s)
    if s["n_scenes"] < 1:
        raise UsageError("--n-scenes must be >= 1")
    rng = np.random.default_rng(s["seed"])
    seeds = [int(v) for v in rng.integers(0, 2**31 - 1, size=s["n_scenes"])]
    scenes = [synthgen.make_scene(s["gen"], sd, size=s["scene_size"]) for sd in seeds]
    grid = s["gen"].pose_grid()
    dets, gts, (acc_l, acc_lp) = evaluation.evaluate_scenes(params, scenes, grid, s["stride"], s["head"])
    for mode, name in (("L", "pr_L.csv"), ("L+P", "pr_LP.csv")):
        with open(os.path.join(out, name), "w") as fh:
            fh.write(evaluation.pr_csv(evaluation.pr_curve(dets, gts, grid, mode)))
    table = evaluation.format_table([(s["method"], {s["object"]: (acc_l, acc_lp)})], [s["object"]])
    with open(os.path.join(out, "table.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")


def cmd_viz(s, out):
    params = _load_checkpoint(s)
    if not 1 <= s["layer"] <= len(params.config.convs):
        raise UsageError(f"--layer must lie in 1..{len(params.config.convs)}")
    channels = None
    if s["channels"]:
        try:
            channels = [int(c) for c in s["channels"].split(",")]
        except ValueError:
            raise UsageError(f"--channels: expected comma-separated integers, got {s['channels']!r}")
        if params.templates is not None and not all(0 <= c < params.templates.shape[0] for c in channels):
            raise UsageError("--channels index out of range")
    viz.dump_filters(params, s["layer"], os.path.join(out, f"filters_conv{s['layer']}.pgm"), s["per_channel"])
    if params.templates is None:
        print("network has no template layer; wrote filters only")
        return
    if s["data"] is not None:
        data = synthgen.load_dataset(_require_dir(s, "data"))
        fg = np.flatnonzero(data.is_fg)
        x = data.x[fg[0] if len(fg) else 0]
    else:
        rng = np.random.default_rng(s["seed"])
        ex = synthgen.make_example(synthgen.get_object(s["gen"].object), synthgen.sample_view(rng, s["gen"]),
                                   s["gen"], s["seed"])
        x = ex.patch
    viz.dump_orthopatch(x, os.path.join(out, "input.ppm"))
    tag = "all" if channels is None else "-".join(str(c) for c in channels)
    viz.dump_template_response(params, params.bank, x, os.path.join(out, f"response_m{tag}.pgm"), channels)
    print(f"wrote images to {out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "gen-bank": cmd_gen_bank,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv=None):
    parser = build_parser()
    out = None
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        settings = resolve(ns.command, ns)
        out = prepare_run_dir(ns.command, settings)
        HANDLERS[ns.command](settings, out)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _mark_failed(out, str(exc))
        return 1
    except RunFailure as exc:
        print(f"failed: {exc}", file=sys.stderr)
        _mark_failed(out, str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with exit code 2
        traceback.print_exc()
        _mark_failed(out, f"{type(exc).__name__}: {exc}")
        return 2


def _mark_failed(out, message):
    if out is not None and os.path.isdir(out):
        with open(os.path.join(out, ".failed"), "w") as fh:
            fh.write(message + "\n")


if __name__ == "__main__":
    sys.exit(main())
