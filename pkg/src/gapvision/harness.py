"""Training, evaluation and ablation runs for GAP models."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, TrainConfig
from .models import GapModel
from .params import Adam, ConfigError, load_checkpoint, save_checkpoint
from .policy import run_gap
from .saliency import compute_saliency
from .sensors import glimpse_contents

log = logging.getLogger(__name__)

ABLATION_MODES = ("both", "what-only", "where-only", "gap-regular", "vit-patches")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Glimpsed:
    """Preprocessed split: glimpse stacks, normalized locations, labels."""
    contents: np.ndarray  # N, T, C, h, w
    locations: np.ndarray  # N, T, 2
    labels: np.ndarray  # N
    seeds: np.ndarray  # N
    exhausted: np.ndarray  # N

    def __len__(self):
        return len(self.labels)


@dataclass
class EvalReport:
    accuracy: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    config_hash: str = ""
    wall_clock: float = 0.0

    def to_dict(self, timing=True):
        d = {"accuracy": self.accuracy, "loss": self.loss, "confusion": self.confusion,
             "config_hash": self.config_hash}
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


@dataclass
class TrainResult:
    model: GapModel
    report: EvalReport
    history: list
    best_epoch: int


def glimpse_sample(image, cfg: ModelConfig):
    trace = run_gap(image, cfg.saliency, cfg.gap, saliency=compute_saliency(image, cfg.saliency))
    contents = glimpse_contents(image, trace, cfg.sensor)
    return contents, trace.normalized_locations(), trace.exhausted


def prepare(samples, cfg: ModelConfig, flips=(False, False)):
    """Run saliency, the glimpse loop and the sensor over every sample."""
    cs, ls, ex = [], [], []
    for s in samples:
        img = s.image
        if img.shape[0] != cfg.image_size or img.shape[1] != cfg.image_size or img.shape[2] != cfg.channels:
            raise ConfigError(f"image shape {img.shape} does not match model geometry "
                              f"{cfg.image_size}x{cfg.image_size}x{cfg.channels}")
        if flips[0]:
            img = img[:, ::-1]
        if flips[1]:
            img = img[::-1]
        c, l, e = glimpse_sample(np.ascontiguousarray(img), cfg)
        cs.append(c)
        ls.append(l)
        ex.append(e)
    return Glimpsed(np.stack(cs).astype(cfg.dtype), np.stack(ls).astype(cfg.dtype),
                    np.array([s.label for s in samples]), np.array([s.seed for s in samples]),
                    np.array(ex))


def _confusion(pred, labels):
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    return {"tp": tp, "tn": tn, "fp": fp, "fn": fn}


def predict_logits(model: GapModel, data: Glimpsed, batch_size=256):
    out = []
    for i in range(0, len(data), batch_size):
        out.append(model(data.contents[i:i + batch_size], data.locations[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_glimpsed(model: GapModel, data: Glimpsed):
    """``(accuracy, loss, confusion)`` in inference mode."""
    logits = predict_logits(model, data)
    loss = float(ad.bce_with_logits(ad.Tensor(logits.astype(np.float64)), data.labels).item())
    pred = (logits > 0).astype(int)
    conf = _confusion(pred, data.labels)
    acc = (conf["tp"] + conf["tn"]) / max(len(data), 1)
    return acc, loss, conf


class _FlipCache:
    def __init__(self, samples, cfg, base: Glimpsed, variants=None):
        self.samples = samples
        self.cfg = cfg
        self.variants = variants if variants is not None else {}
        self.variants[(False, False)] = base

    def get(self, flips):
        if flips not in self.variants:
            self.variants[flips] = prepare(self.samples, self.cfg, flips)
        return self.variants[flips]


def train(model_cfg: ModelConfig, data: dict, train_cfg: TrainConfig, run_dir=None,
          prepared: dict | None = None, flipped: dict | None = None):
    """Train on ``data['train']``, early-stop on ``data['val']``; report every split.

    ``data`` maps split name to a list of samples. ``prepared`` may carry
    already glimpsed splits to skip preprocessing; ``flipped`` maps
    ``(hflip, vflip)`` to glimpsed flipped copies of the train split and is
    filled in as flips are drawn, so callers can share it between runs.
    """
    t0 = time.time()
    prepared = dict(prepared or {})
    for name, samples in data.items():
        if name not in prepared:
            prepared[name] = prepare(samples, model_cfg)
    if "train" not in prepared:
        raise ConfigError("data needs a 'train' split")
    tr_seeds = set(prepared["train"].seeds.tolist())
    for name, g in prepared.items():
        if name != "train" and tr_seeds & set(g.seeds.tolist()):
            raise ConfigError(f"split {name!r} shares samples with train")

    ss = np.random.SeedSequence(train_cfg.seed)
    init_ss, order_ss, drop_ss, aug_ss = ss.spawn(4)
    model = GapModel(model_cfg, np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(order_ss)
    drop_rng = np.random.default_rng(drop_ss)
    aug_rng = np.random.default_rng(aug_ss)
    opt = Adam(model.params, lr=train_cfg.lr) if train_cfg.lr > 0 else None

    use_flips = train_cfg.hflip or train_cfg.vflip
    flip_cache = _FlipCache(data.get("train"), model_cfg, prepared["train"], flipped) if use_flips else None
    train_set = prepared["train"]
    val_set = prepared.get("val")

    history = []
    best_acc, best_epoch, best_state, stale = -1.0, 0, model.params.state(), 0
    n = len(train_set)
    for epoch in range(1, train_cfg.epochs + 1):
        perm = order_rng.permutation(n)
        losses = []
        correct = 0
        for b in range(0, n, train_cfg.batch_size):
            idx = perm[b:b + train_cfg.batch_size]
            contents, locs = train_set.contents[idx], train_set.locations[idx]
            if use_flips:
                hf = bool(aug_rng.random() < 0.5) and train_cfg.hflip
                vf = bool(aug_rng.random() < 0.5) and train_cfg.vflip
                src = flip_cache.get((hf, vf))
                contents, locs = src.contents[idx], src.locations[idx]
            labels = train_set.labels[idx]
            where = f"epoch {epoch}, batch starting {b}; sample seeds {train_set.seeds[idx].tolist()}"
            try:
                logits = model(contents, locs, training=True, rng=drop_rng)
                loss = ad.bce_with_logits(logits, labels)
            except ad.NumericError as e:
                raise TrainingDiverged(f"{e} at {where}") from e
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at {where}")
            model.params.zero_grad()
            ad.backward(loss)
            if opt is not None:
                opt.step()
            losses.append(loss.item() * len(idx))
            correct += int(np.sum((logits.data > 0) == (labels == 1)))
        row = {"epoch": epoch, "train_loss": float(np.sum(losses) / n), "train_acc": correct / n}
        if val_set is not None:
            acc, vloss, _ = evaluate_glimpsed(model, val_set)
            row.update(val_loss=vloss, val_acc=acc)
            if acc > best_acc:
                best_acc, best_epoch, best_state, stale = acc, epoch, model.params.state(), 0
            else:
                stale += 1
        else:
            best_epoch, best_state = epoch, model.params.state()
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if val_set is not None and stale >= train_cfg.patience:
            break
    model.params.load_state(best_state)

    report = EvalReport(config_hash=model_cfg.hash())
    for name, g in prepared.items():
        acc, loss, conf = evaluate_glimpsed(model, g)
        report.accuracy[name], report.loss[name], report.confusion[name] = acc, loss, conf
    report.wall_clock = time.time() - t0

    if run_dir is not None:
        write_run(run_dir, model, model_cfg, train_cfg, history, report)
    return TrainResult(model, report, history, best_epoch)


def write_run(run_dir, model, model_cfg, train_cfg, history, report):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    with open(run_dir / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "loss", "acc"])
        for row in history:
            w.writerow([row["epoch"], "train", f"{row['train_loss']:.6f}", f"{row['train_acc']:.6f}"])
            if "val_acc" in row:
                w.writerow([row["epoch"], "val", f"{row['val_loss']:.6f}", f"{row['val_acc']:.6f}"])
    save_checkpoint(run_dir / "best.ckpt", model.params, config=model_cfg.to_dict(),
                    extra={"train": train_cfg.to_dict()})
    # wall-clock lives in its own file so the rest of a run directory is reproducible byte for byte
    (run_dir / "report.json").write_text(json.dumps(report.to_dict(timing=False), indent=2, sort_keys=True) + "\n")
    (run_dir / "timing.json").write_text(json.dumps({"wall_clock": report.wall_clock}) + "\n")


def load_model(path):
    params, header = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    return GapModel(cfg, params=params)


def evaluate(checkpoint, samples, split="test"):
    """Evaluate a checkpoint path (or loaded model) on a list of samples."""
    model = load_model(checkpoint) if not isinstance(checkpoint, GapModel) else checkpoint
    t0 = time.time()
    g = prepare(samples, model.cfg)
    acc, loss, conf = evaluate_glimpsed(model, g)
    return EvalReport({split: acc}, {split: loss}, {split: conf}, model.cfg.hash(), time.time() - t0)


def mode_config(base: ModelConfig, mode):
    """Model config for one ablation mode."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    if mode in ("both", "what-only", "where-only"):
        return base.replace(ablation=mode)
    policy = "regular-grid" if mode == "gap-regular" else "vit-patches"
    return base.replace(ablation="both", gap=base.gap.replace(policy=policy, grid_stride=base.sensor.size))


def ablation_suite(base: ModelConfig, data: dict, train_cfg: TrainConfig, modes=ABLATION_MODES,
                   seeds=(0,), run_root=None):
    """Train every mode under every seed; rows of ``{mode, seed, report}``."""
    if not modes:
        raise ConfigError("no ablation modes requested")
    rows = []
    for mode in modes:
        cfg = mode_config(base, mode)
        prepared = {name: prepare(s, cfg) for name, s in data.items()}
        for seed in seeds:
            rd = None if run_root is None else Path(run_root) / f"{mode}-seed{seed}"
            res = train(cfg, data, train_cfg.replace(seed=seed), run_dir=rd, prepared=prepared)
            rows.append({"mode": mode, "seed": seed, "report": res.report})
    return rows


def ablation_table(rows, split="test"):
    """Mean accuracy per mode on ``split`` as ``{mode: (mean, [accs])}``."""
    out = {}
    for r in rows:
        out.setdefault(r["mode"], []).append(r["report"].accuracy[split])
    return {m: (float(np.mean(a)), a) for m, a in out.items()}
