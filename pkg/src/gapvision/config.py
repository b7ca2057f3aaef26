"""Configuration records. Every record round-trips through plain JSON dicts."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .params import ConfigError


def _from_dict(cls, d):
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls.__name__, k))
        if sub is not None:
            v = _from_dict(sub, v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


class _Record:
    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class ErrorNeuronConfig(_Record):
    patch_h: int = 5
    patch_w: int = 5
    aggregation: str = "min"  # min | sum
    border: str = "zero"  # zero | replicate
    distance: str = "l2"

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1 or self.patch_h % 2 == 0 or self.patch_w % 2 == 0:
            raise ConfigError("patch sizes must be positive and odd")
        if self.aggregation not in ("min", "sum"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.border not in ("zero", "replicate"):
            raise ConfigError(f"unknown border policy {self.border!r}")
        if self.distance != "l2":
            raise ConfigError("only the l2 distance is implemented")


@dataclass(frozen=True)
class GapConfig(_Record):
    T: int = 15
    mask: str = "hard"  # hard | soft
    radius: float = 5.0
    epsilon: float = 450.0
    soft_literal: bool = False  # use exp(-eps*d) as printed instead of 1 - exp(-eps*d)
    policy: str = "standard"  # standard | regular-grid | random | vit-patches
    grid_stride: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.mask not in ("hard", "soft"):
            raise ConfigError(f"unknown mask kind {self.mask!r}")
        if self.mask == "hard" and self.radius < 1:
            raise ConfigError("hard-mask radius must be >= 1")
        if self.policy not in ("standard", "regular-grid", "random", "vit-patches"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.grid_stride < 1:
            raise ConfigError("grid stride must be >= 1")


@dataclass(frozen=True)
class SensorConfig(_Record):
    kind: str = "multi-scale"  # multi-scale | log-polar
    size: int = 15  # h_g == w_g
    regions: tuple = (15, 30, 45)
    radius: float = 48.0  # log-polar grid radius

    def __post_init__(self):
        if self.kind not in ("multi-scale", "log-polar"):
            raise ConfigError(f"unknown sensor kind {self.kind!r}")
        if self.size < 1:
            raise ConfigError("glimpse size must be positive")
        if self.kind == "multi-scale":
            if not self.regions or self.regions[0] != self.size:
                raise ConfigError("first multi-scale region must equal the glimpse size")
            if any(b <= a for a, b in zip(self.regions, self.regions[1:])):
                raise ConfigError("region sizes must strictly increase")
        if self.kind == "log-polar" and self.radius < 2:
            raise ConfigError("log-polar radius must be >= 2")

    @property
    def scales(self):
        return len(self.regions) if self.kind == "multi-scale" else 1


@dataclass(frozen=True)
class ModelConfig(_Record):
    head: str = "abstractor"  # abstractor | transformer
    layers: int = 4
    heads: int = 4
    head_dim: int = 32
    mlp_hidden: int = 64
    dropout: float = 0.0
    cnn_channels: int = 8
    cnn_layers: int = 0  # 0 -> 7 (multi-scale) / 6 (log-polar)
    ablation: str = "both"  # both | what-only | where-only
    fusion: str = "add"  # add | concat
    tcn_affine: bool = False
    image_size: int = 64
    channels: int = 1
    dtype: str = "float32"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    gap: GapConfig = field(default_factory=lambda: GapConfig(T=8))
    saliency: ErrorNeuronConfig = field(default_factory=ErrorNeuronConfig)

    def __post_init__(self):
        if self.head not in ("abstractor", "transformer"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.ablation not in ("both", "what-only", "where-only"):
            raise ConfigError(f"unknown ablation mode {self.ablation!r}")
        if self.fusion not in ("add", "concat"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if min(self.layers, self.heads, self.head_dim, self.mlp_hidden, self.cnn_channels) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def d_model(self):
        return self.heads * self.head_dim

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def published(cls, **kw):
        """Full-size dimensions used for the original experiments."""
        base = dict(layers=24, heads=8, head_dim=64, mlp_hidden=256, cnn_channels=9,
                    image_size=128, sensor=SensorConfig(size=15),
                    gap=GapConfig(T=15))
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw):
        """Tiny dimensions for gradient checks."""
        base = dict(layers=2, heads=2, head_dim=16, mlp_hidden=16, cnn_channels=2, cnn_layers=2,
                    image_size=24, dtype="float64",
                    sensor=SensorConfig(size=7, regions=(7, 14)), gap=GapConfig(T=4))
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class TrainConfig(_Record):
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    patience: int = 10
    hflip: bool = False
    vflip: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


_NESTED = {
    ("ModelConfig", "sensor"): SensorConfig,
    ("ModelConfig", "gap"): GapConfig,
    ("ModelConfig", "saliency"): ErrorNeuronConfig,
}
