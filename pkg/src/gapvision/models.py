"""Downstream networks: glimpse CNN, location MLP, TCN, Transformer and Abstractor heads.

All functions accept batched ``(B, T, ...)`` inputs; the unbatched ``(T, ...)``
forms used in tests are just ``B`` left off.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .params import ConfigError, ParamStore

TCN_EPS = 1e-5
LOC_HIDDEN = (32, 64)


class InputError(ValueError):
    pass


def cnn_kernel_sizes(cfg: ModelConfig):
    if cfg.sensor.kind == "multi-scale":
        n = cfg.cnn_layers or 7
        return [3] * n
    n = cfg.cnn_layers or 6
    n5 = max(n - 2, 0)
    return [5] * n5 + [3] * (n - n5)


def cnn_output_size(cfg: ModelConfig):
    s = cfg.sensor.size
    for k in cnn_kernel_sizes(cfg):
        s -= k - 1
    if s < 1:
        raise ConfigError(f"glimpse size {cfg.sensor.size} too small for the CNN")
    return s


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GapModel:
    """Parameters plus forward pass for either downstream head."""

    def __init__(self, cfg: ModelConfig, rng=None, params: ParamStore | None = None):
        self.cfg = cfg
        if cfg.d_model % cfg.heads:
            raise ConfigError("d_model must be divisible by the number of heads")
        if params is not None:
            self.params = params
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = ParamStore(dtype=np.dtype(cfg.dtype))
        self._build(rng)

    @property
    def n_tokens(self):
        return self.cfg.gap.T

    # ------------------------------------------------------------ parameters
    def _dense(self, name, n_in, n_out, rng, gain=1.0, bias=True, zero=False):
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), n_in, gain)
        self.params.add(f"{name}.W", w)
        if bias:
            self.params.add(f"{name}.b", np.zeros(n_out))

    def _norm(self, name, n):
        self.params.add(f"{name}.gamma", np.ones(n))
        self.params.add(f"{name}.beta", np.zeros(n))

    def _attention(self, name, rng):
        D = self.cfg.d_model
        for m in ("Wq", "Wk", "Wv", "Wo"):
            self.params.add(f"{name}.{m}", _uniform(rng, (D, D), D))

    def _block_mlp(self, name, rng):
        D, Hd = self.cfg.d_model, self.cfg.mlp_hidden
        self._dense(f"{name}.fc1", D, Hd, rng, gain=math.sqrt(2))
        self._dense(f"{name}.fc2", Hd, D, rng)

    def _build(self, rng):
        cfg = self.cfg
        D = cfg.d_model
        c_in = cfg.sensor.scales * cfg.channels
        for i, k in enumerate(cnn_kernel_sizes(cfg)):
            fan_in = c_in * k * k
            self.params.add(f"cnn.conv{i}.W",
                            _uniform(rng, (cfg.cnn_channels, c_in, k, k), fan_in, math.sqrt(2)))
            self.params.add(f"cnn.conv{i}.b", np.zeros(cfg.cnn_channels))
            c_in = cfg.cnn_channels
        s = cnn_output_size(cfg)
        self._dense("cnn.proj", cfg.cnn_channels * s * s, D, rng)
        self._dense("loc.fc1", 2, LOC_HIDDEN[0], rng, gain=math.sqrt(2))
        self._dense("loc.fc2", LOC_HIDDEN[0], LOC_HIDDEN[1], rng, gain=math.sqrt(2))
        self._dense("loc.proj", LOC_HIDDEN[1], D, rng)
        if cfg.tcn_affine:
            for s_ in ("what", "where"):
                self._norm(f"tcn.{s_}", D)
        if cfg.head == "transformer" and cfg.fusion == "concat" and cfg.ablation == "both":
            self._dense("fuse", 2 * D, D, rng)
        if cfg.head == "abstractor" and cfg.ablation != "both":
            self.params.add("abstractor.symbols", rng.normal(0.0, 1.0, (self.n_tokens, D)))
        for layer in range(cfg.layers):
            p = f"{cfg.head}.layer{layer}"
            if cfg.head == "abstractor":
                self._norm(f"{p}.ln_rca", D)
                self._attention(f"{p}.rca", rng)
            self._norm(f"{p}.ln_attn", D)
            self._attention(f"{p}.attn", rng)
            self._norm(f"{p}.ln_mlp", D)
            self._block_mlp(f"{p}.mlp", rng)
        self._norm("final.ln", D)
        self._dense("final.out", D, 1, rng, zero=True)

    # ------------------------------------------------------------ pieces
    def dense(self, name, x):
        b = f"{name}.b"
        return ad.linear(x, self.params[f"{name}.W"], self.params[b] if b in self.params else None)

    def norm(self, name, x):
        return ad.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def encode_contents(self, contents):
        """``(..., T, C, h, w)`` glimpse stacks -> ``(..., T, d_model)``."""
        x = np.asarray(contents, dtype=self.params.dtype)
        lead = x.shape[:-3]
        expected = (self.cfg.sensor.scales * self.cfg.channels, self.cfg.sensor.size, self.cfg.sensor.size)
        if x.shape[-3:] != expected:
            raise InputError(f"glimpse contents of shape {x.shape[-3:]}, expected {expected}")
        h = Tensor(x.reshape((-1,) + expected))
        for i in range(len(cnn_kernel_sizes(self.cfg))):
            h = ad.relu(ad.conv2d_valid(h, self.params[f"cnn.conv{i}.W"], self.params[f"cnn.conv{i}.b"]))
        h = ad.reshape(h, (h.shape[0], -1))
        out = self.dense("cnn.proj", h)
        return ad.reshape(out, lead + (self.cfg.d_model,))

    def encode_locations(self, locations):
        """Normalized ``(..., T, 2)`` locations -> ``(..., T, d_model)``."""
        x = np.asarray(locations, dtype=self.params.dtype)
        if x.shape[-1] != 2:
            raise InputError("locations must have 2 coordinates")
        if np.any(np.abs(x) > 1 + 1e-9):
            raise InputError("locations must be normalized to [-1, 1]")
        h = ad.relu(self.dense("loc.fc1", Tensor(x)))
        h = ad.relu(self.dense("loc.fc2", h))
        return self.dense("loc.proj", h)

    def tcn(self, x, stream=None):
        out = tcn(x)
        if self.cfg.tcn_affine and stream is not None:
            out = ad.add(ad.mul(out, self.params[f"tcn.{stream}.gamma"]), self.params[f"tcn.{stream}.beta"])
        return out

    def _heads_split(self, x):
        B = x.shape[:-2]
        T = x.shape[-2]
        H, d = self.cfg.heads, self.cfg.head_dim
        x = ad.reshape(x, B + (T, H, d))
        nb = len(B)
        return ad.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))

    def _heads_merge(self, x):
        nb = x.ndim - 3
        x = ad.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))
        return ad.reshape(x, x.shape[:-2] + (self.cfg.d_model,))

    def attention(self, name, qk_src, v_src, training=False, rng=None, return_weights=False):
        """Multi-head attention with queries/keys from ``qk_src`` and values from ``v_src``."""
        P = self.params
        q = self._heads_split(ad.matmul(qk_src, P[f"{name}.Wq"]))
        k = self._heads_split(ad.matmul(qk_src, P[f"{name}.Wk"]))
        v = self._heads_split(ad.matmul(v_src, P[f"{name}.Wv"]))
        nd = k.ndim
        kt = ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(self.cfg.head_dim))
        attn = ad.softmax_lastdim(scores)
        weights = attn
        attn = ad.dropout(attn, self.cfg.dropout, rng, training)
        out = ad.matmul(self._heads_merge(ad.matmul(attn, v)), P[f"{name}.Wo"])
        return (out, weights) if return_weights else out

    def mlp(self, name, x, training=False, rng=None):
        h = ad.relu(self.dense(f"{name}.fc1", x))
        h = ad.dropout(h, self.cfg.dropout, rng, training)
        return self.dense(f"{name}.fc2", h)

    def _readout(self, x):
        x = self.norm("final.ln", x)
        pooled = ad.mean_over_axis(x, axis=-2)
        lead = pooled.shape[:-1]
        flat = ad.reshape(pooled, (-1, pooled.shape[-1]))  # an unbatched input pools to a vector
        return ad.reshape(self.dense("final.out", flat), lead)

    # ------------------------------------------------------------ heads
    def transformer_head(self, what, where, training=False, rng=None):
        cfg = self.cfg
        if cfg.ablation == "what-only":
            x = what
        elif cfg.ablation == "where-only":
            x = where
        elif cfg.fusion == "add":
            x = ad.add(what, where)
        else:
            x = self.dense("fuse", ad.concat([what, where], axis=-1))
        for layer in range(cfg.layers):
            p = f"transformer.layer{layer}"
            h = self.norm(f"{p}.ln_attn", x)
            x = ad.add(x, self.attention(f"{p}.attn", h, h, training, rng))
            x = ad.add(x, self.mlp(f"{p}.mlp", self.norm(f"{p}.ln_mlp", x), training, rng))
        return self._readout(x)

    def rca(self, name, g, r, training=False, rng=None, return_weights=False):
        """Relational cross-attention: attention from ``g``, values from ``r``."""
        return self.attention(name, g, r, training, rng, return_weights)

    def abstractor_head(self, what, where, training=False, rng=None):
        cfg = self.cfg
        if cfg.ablation == "both":
            g, r = what, where
        else:
            g = what if cfg.ablation == "what-only" else where
            sym = self.params["abstractor.symbols"]
            if g.shape[-2] != sym.shape[0]:
                raise InputError(f"symbol set has {sym.shape[0]} slots, got {g.shape[-2]} glimpses")
            r = ad.add(Tensor(np.zeros(g.shape, dtype=g.dtype)), sym) if g.ndim > 2 else sym
        for layer in range(cfg.layers):
            p = f"abstractor.layer{layer}"
            r = ad.add(r, self.rca(f"{p}.rca", g, self.norm(f"{p}.ln_rca", r), training, rng))
            h = self.norm(f"{p}.ln_attn", r)
            r = ad.add(r, self.attention(f"{p}.attn", h, h, training, rng))
            r = ad.add(r, self.mlp(f"{p}.mlp", self.norm(f"{p}.ln_mlp", r), training, rng))
        return self._readout(r)

    def forward(self, contents, locations, training=False, rng=None):
        """Logits for a batch ``(B, T, C, h, w)`` / ``(B, T, 2)`` (or unbatched)."""
        if training and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        what = self.tcn(self.encode_contents(contents), "what")
        where = self.tcn(self.encode_locations(locations), "where")
        if self.cfg.head == "transformer":
            return self.transformer_head(what, where, training, rng)
        return self.abstractor_head(what, where, training, rng)

    __call__ = forward


def tcn(x, eps=TCN_EPS):
    """Temporal context normalization over axis -2 (time) per feature channel."""
    x = ad.as_tensor(x)
    if x.shape[-2] < 2:
        raise ConfigError("TCN needs at least 2 time steps")
    mu = ad.mean_over_axis(x, axis=-2, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean_over_axis(ad.mul(xc, xc), axis=-2, keepdims=True)
    return ad.div(xc, ad.add(ad.sqrt(var), eps))
