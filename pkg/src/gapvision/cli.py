"""Command-line entry point: ``gap <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Files carry the
machine-readable results; logs and the resolved config go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ErrorNeuronConfig, GapConfig, ModelConfig, SensorConfig, TrainConfig
from .imageio import normalize_to_unit, read_netpbm, write_netpbm
from .params import ConfigError

log = logging.getLogger("gapvision")

COMMANDS = ("saliency", "trace", "gen-data", "train", "eval", "ablate", "gradcheck")
PRESETS = {"desk": ModelConfig, "toy": ModelConfig.toy, "published": ModelConfig.published}
DATA_DEFAULTS = {"task": "same-different", "family": "polygon", "test_family": None,
                 "counts": [500, 500, 1000], "image_size": 64, "scale": None, "seed": 0}
TASK_SCALE = {"same-different": 7.0, "rmts": 5.0}  # shape radius that fits the layout


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _words(text):
    return [t for t in text.split(",") if t]


def _mask(text):
    """``hard:5`` / ``soft:450`` / ``soft`` -> GapConfig fields."""
    kind, _, arg = text.partition(":")
    if kind not in ("hard", "soft"):
        raise argparse.ArgumentTypeError(f"mask must be hard[:radius] or soft[:epsilon], got {text!r}")
    out = {"mask": kind}
    if arg:
        out["radius" if kind == "hard" else "epsilon"] = float(arg)
    return out


def _deep_merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _set(d, path, value):
    if value is None:
        return
    *head, last = path.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


# ------------------------------------------------------------------ argument parsing

def _model_flags(p):
    p.add_argument("--dims", choices=sorted(PRESETS), help="model size preset (default desk)")
    p.add_argument("--head", "--model", dest="head", choices=("abstractor", "transformer"))
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--mlp-hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--ablation", choices=("both", "what-only", "where-only"))
    p.add_argument("--fusion", choices=("add", "concat"))


def _gap_flags(p):
    p.add_argument("--T", type=int, help="number of glimpses")
    p.add_argument("--mask", type=_mask, help="hard[:radius] or soft[:epsilon]")
    p.add_argument("--policy", choices=("standard", "regular-grid", "random", "vit-patches"))
    p.add_argument("--grid-stride", type=int)
    p.add_argument("--aggregation", choices=("min", "sum"))
    p.add_argument("--border", choices=("zero", "replicate"))


def _sensor_flags(p):
    p.add_argument("--sensor", choices=("multi-scale", "log-polar"))
    p.add_argument("--size", type=int, help="glimpse side length")
    p.add_argument("--regions", type=_ints, help="multi-scale region sizes, e.g. 15,30,45")
    p.add_argument("--radius", type=float, help="log-polar radius")


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--hflip", action="store_const", const=True)
    p.add_argument("--vflip", action="store_const", const=True)


def build_parser():
    top = Parser(prog="gap", description="Glimpse-based active perception toolkit.", allow_abbrev=False)
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=Parser)
    ps = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", type=Path, help="JSON file; flags override its values")
        ps[name] = p
        return p

    p = add("saliency", "error-neuron saliency map of an image")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="normalized PGM; raw float64 goes to <out>.f64")
    p.add_argument("--aggregation", choices=("min", "sum"))
    p.add_argument("--border", choices=("zero", "replicate"))
    p.add_argument("--patch", type=int, help="patch side (odd)")

    p = add("trace", "run the glimpse loop on one image")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--json", type=Path, required=True)
    p.add_argument("--overlay", type=Path, help="PPM with the fixations drawn on the image")
    p.add_argument("--dump-glimpses", type=Path, metavar="DIR")
    _gap_flags(p)
    _sensor_flags(p)

    p = add("gen-data", "write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--task", choices=("same-different", "rmts"))
    p.add_argument("--family", choices=("polygon", "blob", "open-curve"))
    p.add_argument("--test-family", choices=("polygon", "blob", "open-curve"),
                   help="draw the test split from another family")
    p.add_argument("--counts", type=_ints, help="train,val,test sizes")
    p.add_argument("--image-size", type=int)
    p.add_argument("--scale", type=float)

    p = add("train", "train a model on a generated dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _model_flags(p)
    _gap_flags(p)
    _sensor_flags(p)
    _train_flags(p)

    p = add("eval", "evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, help="report JSON")

    p = add("ablate", "train every ablation mode over several seeds")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--modes", type=_words)
    p.add_argument("--seeds", type=_ints)
    _model_flags(p)
    _gap_flags(p)
    _sensor_flags(p)
    _train_flags(p)

    p = add("gradcheck", "finite-difference check of the full model")
    _model_flags(p)
    p.add_argument("--per-param", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-3)
    return top, ps


def _suggest(word, options):
    near = difflib.get_close_matches(word, options, n=1)
    return f" (did you mean {near[0]}?)" if near else ""


def parse(argv):
    top, subs = build_parser()
    if argv and argv[0] not in COMMANDS and not argv[0].startswith("-"):
        raise UsageError(f"unknown command {argv[0]!r}{_suggest(argv[0], COMMANDS)}")
    if argv and argv[0] in subs:
        # report misspelled flags before argparse complains about missing required ones
        opts = [o for o in subs[argv[0]]._option_string_actions if o.startswith("--")]
        for tok in argv[1:]:
            flag = tok.split("=")[0]
            if flag.startswith("--") and flag not in opts:
                raise UsageError(f"unrecognized argument {flag!r}{_suggest(flag, opts)}")
    args = top.parse_args(argv)
    if args.command is None:
        raise UsageError(top.format_usage().strip())
    return args


# ------------------------------------------------------------------ config resolution

def _file_config(args):
    if args.config is None:
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def resolve(args):
    """Defaults, then the config file, then flags. Returns a nested plain dict."""
    f = _file_config(args)
    preset = getattr(args, "dims", None) or f.get("dims") or "desk"
    model = PRESETS[preset]().to_dict()
    model = _deep_merge(model, f.get("model", {}))
    for part in ("gap", "sensor", "saliency"):
        model[part] = _deep_merge(model[part], f.get(part, {}))
    train_ = _deep_merge(TrainConfig().to_dict(), f.get("train", {}))
    data = _deep_merge(DATA_DEFAULTS, f.get("data", {}))
    cfg = {"model": model, "train": train_, "data": data}

    g = vars(args).get
    for flag in ("head", "layers", "heads", "head_dim", "mlp_hidden", "dropout", "ablation", "fusion"):
        _set(cfg, f"model.{flag}", g(flag))
    for flag in ("T", "policy", "grid_stride"):
        _set(cfg, f"model.gap.{flag}", g(flag))
    for k, v in (g("mask") or {}).items():
        _set(cfg, f"model.gap.{k}", v)
    for flag in ("aggregation", "border"):
        _set(cfg, f"model.saliency.{flag}", g(flag))
    if g("patch") is not None:
        _set(cfg, "model.saliency.patch_h", g("patch"))
        _set(cfg, "model.saliency.patch_w", g("patch"))
    _set(cfg, "model.sensor.kind", g("sensor"))
    _set(cfg, "model.sensor.size", g("size"))
    _set(cfg, "model.sensor.regions", g("regions"))
    _set(cfg, "model.sensor.radius", g("radius"))
    if g("sensor") == "log-polar" and g("regions") is None:
        _set(cfg, "model.sensor.regions", [cfg["model"]["sensor"]["size"]])
    elif g("size") is not None and g("regions") is None and cfg["model"]["sensor"]["kind"] == "multi-scale":
        # keep the default 1:2:3 ladder around a new base size
        s = g("size")
        _set(cfg, "model.sensor.regions", [s, 2 * s, 3 * s][:len(cfg["model"]["sensor"]["regions"])])
    for flag in ("epochs", "batch_size", "lr", "patience", "hflip", "vflip"):
        _set(cfg, f"train.{flag}", g(flag))
    for flag in ("task", "family", "test_family", "counts", "image_size", "scale"):
        _set(cfg, f"data.{flag}", g(flag))
    if g("seed") is not None:
        for path in ("train.seed", "data.seed", "model.gap.seed"):
            _set(cfg, path, g("seed"))
    cfg["seed"] = g("seed") if g("seed") is not None else f.get("seed", 0)
    return cfg


ECHOED = {"saliency": ("model.saliency",), "trace": ("model.gap", "model.saliency", "model.sensor"),
          "gen-data": ("data",), "train": ("model", "train"), "eval": (), "ablate": ("model", "train"),
          "gradcheck": ("model",)}


def _echo(command, cfg):
    shown = {"command": command, "seed": cfg["seed"]}
    for path in ECHOED[command]:
        node = cfg
        for k in path.split("."):
            node = node[k]
        shown[path.split(".")[-1]] = node
    print("resolved config: " + json.dumps(shown, sort_keys=True), file=sys.stderr)


def _model_cfg(cfg):
    return ModelConfig.from_dict(cfg["model"])


# ------------------------------------------------------------------ commands

def cmd_saliency(args, cfg):
    from .saliency import compute_saliency
    img = read_netpbm(args.input)
    S = compute_saliency(img, ErrorNeuronConfig.from_dict(cfg["model"]["saliency"])).values
    write_netpbm(args.out, normalize_to_unit(S))
    side = args.out.with_suffix(".f64")
    side.write_bytes(S.astype("<f8").tobytes())
    log.info("saliency %s -> %s (+ %s, %dx%d little-endian float64)", args.input, args.out, side, *S.shape)


def _overlay(img, locations, size):
    rgb = np.repeat(img.mean(axis=2, keepdims=True), 3, axis=2) * 0.6
    h, w = img.shape[:2]
    half = size // 2
    for loc in locations:
        y0, y1 = max(loc.y - half, 0), min(loc.y + half, h - 1)
        x0, x1 = max(loc.x - half, 0), min(loc.x + half, w - 1)
        rgb[y0, x0:x1 + 1] = rgb[y1, x0:x1 + 1] = (1.0, 0.2, 0.2)
        rgb[y0:y1 + 1, x0] = rgb[y0:y1 + 1, x1] = (1.0, 0.2, 0.2)
        rgb[loc.y, loc.x] = (1.0, 1.0, 0.0)
    return rgb


def cmd_trace(args, cfg):
    from .policy import run_gap
    from .sensors import logpolar_glimpse, multiscale_glimpse
    img = read_netpbm(args.input)
    m = cfg["model"]
    encfg = ErrorNeuronConfig.from_dict(m["saliency"])
    gapcfg = GapConfig.from_dict(m["gap"])
    trace = run_gap(img, encfg, gapcfg)
    out = trace.to_json({"gap": gapcfg.to_dict(), "saliency": encfg.to_dict()})
    args.json.parent.mkdir(parents=True, exist_ok=True)
    args.json.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    sensor = SensorConfig.from_dict(m["sensor"])
    if args.overlay:
        write_netpbm(args.overlay, _overlay(img, trace.locations, sensor.size))
    if args.dump_glimpses:
        args.dump_glimpses.mkdir(parents=True, exist_ok=True)
        ext = "pgm" if img.shape[2] == 1 else "ppm"
        for t, loc in enumerate(trace.locations):
            if sensor.kind == "multi-scale":
                stack = multiscale_glimpse(img, loc, sensor)
            else:
                stack = logpolar_glimpse(img, loc, sensor)[None]
            for k, g in enumerate(stack):
                write_netpbm(args.dump_glimpses / f"g_{t}_{k}.{ext}", np.clip(g, 0, 1))
    log.info("trace: %d glimpses, exhausted=%s", len(trace.locations), trace.exhausted)


def _load_data(root):
    from .taskgen import load_dataset
    splits, manifest = load_dataset(root)
    return splits, manifest


def _match_data(model_cfg, manifest):
    """A freshly built model takes its input size from the dataset it trains on."""
    size = manifest.get("image_size")
    return model_cfg if size is None else model_cfg.replace(image_size=size)


def cmd_gen_data(args, cfg):
    from .taskgen import gen_ood_split, gen_split, save_dataset
    d = cfg["data"]
    counts = tuple(d["counts"])
    if len(counts) != 3:
        raise ConfigError("counts must list train,val,test sizes")
    if d["task"] not in TASK_SCALE:
        raise ConfigError(f"unknown task {d['task']!r}{_suggest(d['task'], TASK_SCALE)}")
    kw = {"scale": d["scale"] if d["scale"] is not None else TASK_SCALE[d["task"]]}
    if d["test_family"] and d["test_family"] != d["family"]:
        splits = gen_ood_split(d["family"], d["test_family"], counts, d["seed"], d["task"], d["image_size"], **kw)
    else:
        splits = gen_split(counts, d["family"], d["seed"], d["task"], d["image_size"], **kw)
    save_dataset(args.out, dict(zip(("train", "val", "test"), splits)), {**d, **kw})
    log.info("wrote %s samples to %s", "/".join(str(c) for c in counts), args.out)


def cmd_train(args, cfg):
    from .harness import train
    splits, manifest = _load_data(args.data)
    mcfg = _match_data(_model_cfg(cfg), manifest)
    cfg["model"] = mcfg.to_dict()
    res = train(mcfg, splits, TrainConfig.from_dict(cfg["train"]), run_dir=args.out)
    for name, acc in res.report.accuracy.items():
        log.info("%s accuracy %.4f", name, acc)


def cmd_eval(args, cfg):
    from .harness import evaluate, load_model
    splits, _ = _load_data(args.data)
    if args.split not in splits:
        raise ConfigError(f"dataset has no split {args.split!r}; available: {sorted(splits)}")
    model = load_model(args.checkpoint)
    print("checkpoint config: " + json.dumps(model.cfg.to_dict(), sort_keys=True), file=sys.stderr)
    rep = evaluate(model, splits[args.split], args.split)
    log.info("%s accuracy %.4f", args.split, rep.accuracy[args.split])
    out = args.out or args.checkpoint.parent / f"eval-{args.split}.json"
    out.write_text(json.dumps(rep.to_dict(timing=False), indent=2, sort_keys=True) + "\n")


def cmd_ablate(args, cfg):
    from .harness import ABLATION_MODES, ablation_suite, ablation_table
    splits, manifest = _load_data(args.data)
    mcfg = _match_data(_model_cfg(cfg), manifest)
    modes = tuple(args.modes or ABLATION_MODES)
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise ConfigError(f"unknown ablation modes {bad}{_suggest(bad[0], ABLATION_MODES)}")
    seeds = tuple(args.seeds or [cfg["seed"]])
    rows = ablation_suite(mcfg, splits, TrainConfig.from_dict(cfg["train"]), modes, seeds, run_root=args.out)
    split = "test" if "test" in splits else "val"
    table = ablation_table(rows, split)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "split", "accuracy"])
        for r in rows:
            w.writerow([r["mode"], r["seed"], split, f"{r['report'].accuracy[split]:.6f}"])
    (args.out / "ablation.json").write_text(
        json.dumps({m: {"mean": v[0], "runs": v[1]} for m, v in table.items()}, indent=2, sort_keys=True) + "\n")
    for m, (mean, _) in table.items():
        log.info("%-12s %.4f", m, mean)


def cmd_gradcheck(args, cfg):
    from .gradcheck import model_gradcheck
    mcfg = _model_cfg(cfg)
    worst, per = model_gradcheck(mcfg, seed=cfg["seed"], per_param=args.per_param)
    name = max(per, key=per.get)
    print(f"max relative error {worst:.3e} ({name}) over {len(per)} parameters")
    return 0 if worst < args.tol else 2


HANDLERS = {"saliency": cmd_saliency, "trace": cmd_trace, "gen-data": cmd_gen_data, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        _model_cfg(cfg)  # validate before running
        _echo(args.command, cfg)
        code = HANDLERS[args.command](args, cfg)
    except (ConfigError, OSError, ValueError, RuntimeError, ArithmeticError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
