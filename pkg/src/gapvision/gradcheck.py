"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .models import GapModel

H = 1e-5
FLOOR = 1e-6


def rel_err(a, b, floor=FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x, h=H, index=None):
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    idxs = list(np.ndindex(x.shape)) if index is None else index
    out = np.zeros(len(idxs))
    for n, i in enumerate(idxs):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out if index is not None else out.reshape(x.shape)


def check_op(fn, *arrays, seed=0, h=H):
    """Max relative error of ``fn(*tensors)`` gradients, using a random projection as loss."""
    rng = np.random.default_rng(seed)
    tensors = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def loss_value():
        return float(np.sum(fn(*[ad.Tensor(t.data) for t in tensors]).data * proj))

    loss = ad.sum_(ad.mul(out, ad.Tensor(proj)))
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(loss_value, t.data, h)
        worst = max(worst, float(np.max(rel_err(t.grad, num))))
    return worst


def toy_batch(cfg: ModelConfig, rng, batch=2):
    T = cfg.gap.T
    contents = rng.random((batch, T, cfg.sensor.scales * cfg.channels, cfg.sensor.size, cfg.sensor.size))
    locations = rng.uniform(-1, 1, (batch, T, 2))
    labels = np.arange(batch) % 2
    return contents, locations, labels


def model_gradcheck(cfg: ModelConfig | None = None, seed=0, per_param=2, h=H):
    """Compare backward with finite differences on sampled entries of every parameter.

    The zero-initialized readout is randomized first so gradients reach every
    layer. Returns ``(max_rel_err, {param: max_rel_err})``.
    """
    cfg = cfg or ModelConfig.toy()
    cfg = cfg.replace(dtype="float64", dropout=0.0)
    rng = np.random.default_rng(seed)
    model = GapModel(cfg, rng)
    model.params["final.out.W"].data[:] = rng.uniform(-1, 1, model.params["final.out.W"].shape)
    contents, locations, labels = toy_batch(cfg, rng)

    def loss_value():
        return float(ad.bce_with_logits(model(contents, locations), labels).item())

    model.params.zero_grad()
    ad.backward(ad.bce_with_logits(model(contents, locations), labels))
    per = {}
    for name, p in model.params.trainable():
        flat = rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
        index = [np.unravel_index(int(i), p.shape) for i in flat]
        num = numeric_grad(loss_value, p.data, h, index=index)
        # a parameter the forward pass never touches (an ablated stream) has a zero gradient
        ana = np.array([0.0 if p.grad is None else p.grad[i] for i in index])
        per[name] = float(np.max(rel_err(ana, num)))
    return max(per.values()), per


def _dropout_fixed(a):
    # a fresh rng per call keeps the mask identical across finite-difference evaluations
    return ad.dropout(a, 0.3, np.random.default_rng(5), True)


OP_CASES = [
    ("add", ad.add, [(3, 4), (4,)]),
    ("sub", ad.sub, [(3, 4), (3, 1)]),
    ("mul", ad.mul, [(3, 4), (3, 4)]),
    ("div", lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)), [(3, 4), (3, 4)]),
    ("scale", lambda a: ad.scale(a, -2.5), [(5,)]),
    ("relu", ad.relu, [(4, 5)]),
    ("mean0", lambda a: ad.mean_over_axis(a, axis=0), [(3, 4)]),
    ("mean_keep", lambda a: ad.mean_over_axis(a, axis=-1, keepdims=True), [(2, 3, 4)]),
    ("sum", lambda a: ad.sum_(a, axis=1), [(3, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("sqrt", lambda a: ad.sqrt(ad.add(ad.mul(a, a), 0.5)), [(3,)]),
    ("exp", ad.exp, [(3,)]),
    ("sigmoid", ad.sigmoid, [(4,)]),
    ("layer_norm", ad.layer_norm, [(3, 6), (6,), (6,)]),
    ("take_rows", lambda a: ad.take_rows(a, [2, 0, 1, 0]), [(3, 2)]),
    ("matmul", ad.matmul, [(3, 4), (4, 2)]),
    ("batched_matmul", ad.matmul, [(2, 3, 4), (2, 4, 5)]),
    ("linear", ad.linear, [(2, 3, 4), (4, 5), (5,)]),
    ("softmax", ad.softmax_lastdim, [(3, 5)]),
    ("conv2d", ad.conv2d_valid, [(2, 6, 6), (3, 2, 3, 3), (3,)]),
    ("conv2d_batched", ad.conv2d_valid, [(2, 2, 5, 5), (2, 2, 3, 3), (2,)]),
    ("dropout", _dropout_fixed, [(4, 6)]),
    ("bce", lambda z: ad.bce_with_logits(z, np.array([1, 0, 1, 1, 0])), [(5,)]),
]


def op_case_arrays(name, shapes, rng):
    arrays = [rng.standard_normal(s) for s in shapes]
    if name == "relu":
        # keep away from the kink, where the derivative is undefined
        arrays[0] = np.where(np.abs(arrays[0]) < 1e-3, 0.5, arrays[0])
    return arrays
