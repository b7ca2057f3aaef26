"""Named parameter storage, the Adam optimizer and the checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

CKPT_MAGIC = b"GAPCKPT1"


class ConfigError(ValueError):
    pass


class ParamStore:
    """Ordered map from dotted parameter path to a trainable ``Tensor``."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def is_trainable(self, name):
        return self._trainable[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_parameters(self):
        return int(sum(t.data.size for t in self._params.values()))

    def state(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            t = self._params[n]
            if t.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {n}: {t.shape} vs {arr.shape}")
            t.data = np.array(arr, dtype=self.dtype, copy=True)


class Adam:
    """Adam with bias correction. Moments are created lazily on first step."""

    def __init__(self, params: ParamStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.trainable():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)


def adam_step(opt: Adam):
    opt.step()


def save_checkpoint(path, params: ParamStore, config: dict | None = None, extra: dict | None = None):
    """Write ``params`` as a JSON header followed by little-endian raw buffers.

    Layout: magic (8 bytes), header length (u64 LE), UTF-8 JSON header, data.
    Offsets in the header are relative to the start of the data block.
    """
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
            "trainable": params.is_trainable(name),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "gapvision-checkpoint",
        "version": 1,
        "config": config or {},
        "dtype": params.dtype.str,
        "params": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Return ``(ParamStore, header)`` from a file written by ``save_checkpoint``."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path} is not a gapvision checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    data = memoryview(blob)[16 + hlen:]
    store = ParamStore(dtype=np.dtype(header["dtype"]))
    for e in header["params"]:
        buf = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        store.add(e["name"], arr.astype(store.dtype), trainable=e["trainable"])
    return store, header
