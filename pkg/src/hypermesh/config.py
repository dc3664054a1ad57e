"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .layers import Architecture
from .synthetic import EVAL_SEEDS, TRAIN_SEEDS, SceneConfig


@dataclass(frozen=True)
class Config:
    curvature: float = -1.0
    k: int = 8
    dims: tuple[int, ...] = (3, 64, 64, 32)
    head_hidden: int = 64
    coord_scale: float = 10.0  # metres -> network units, so meshes span a unit-scale ball
    lr: float = 1e-4
    lr_decay_epoch: int = 0  # 0 disables the step decay
    lr_decay_factor: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    space: str = "hyperbolic"
    n_train: int = 256
    n_eval: int = 32
    subdivisions: int = 2
    noise_sigma: float = 0.005
    object_offset: float = 0.01
    gap_range: float = 0.005
    feature_noise: float = 0.01
    out: str = "runs/default"

    def __post_init__(self):
        if self.curvature >= 0:
            raise ValueError("curvature must be negative")
        if self.space not in ("hyperbolic", "euclidean"):
            raise ValueError(f"space must be 'hyperbolic' or 'euclidean', got {self.space!r}")
        if len(self.dims) < 3:
            raise ValueError("dims needs at least an input, one DHGC width and the output width")
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("k and batch_size must be positive, epochs non-negative")
        if not 1 <= self.n_train <= len(TRAIN_SEEDS) or not 1 <= self.n_eval <= len(EVAL_SEEDS):
            raise ValueError(f"n_train must be in 1..{len(TRAIN_SEEDS)} and n_eval in 1..{len(EVAL_SEEDS)}")

    @property
    def architecture(self) -> Architecture:
        return Architecture(
            dhgc_dims=tuple(self.dims[:-1]),
            out_dim=self.dims[-1],
            head_hidden=self.head_hidden,
        )

    @property
    def scene(self) -> SceneConfig:
        return SceneConfig(
            subdivisions=self.subdivisions,
            noise_sigma=self.noise_sigma,
            object_offset=self.object_offset,
            gap_range=self.gap_range,
            feature_noise=self.feature_noise,
        )

    @property
    def train_seeds(self) -> range:
        return TRAIN_SEEDS[: self.n_train]

    @property
    def eval_seeds(self) -> range:
        return EVAL_SEEDS[: self.n_eval]

    def updated(self, **overrides) -> "Config":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def dumps(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace("->", ",").split(",") if x.strip())
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return raw


def parse(text: str, base: Config = Config()) -> Config:
    defaults = {f.name: getattr(base, f.name) for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw, defaults[key])
    return replace(base, **values)


def load(path) -> Config:
    return parse(Path(path).read_text())
