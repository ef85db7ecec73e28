"""Flat ``dotted.key = value`` experiment configs and named seed streams.

Example::

    seed = 0
    out = runs/mnist
    data.source = mnist
    surrogate = mlp-2x256
    targets = cnn-small, cnn-wide, mlp-deep
    lrs.variant = LRSF
    lrs.lambda1 = 5.0
    attack.methods = pgd, mim, sim
    attack.eps = 0.2

Unknown keys are rejected so that typos fail before any work starts.  A key
given twice takes its last value.
"""
from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import METHODS, AttackConfig
from .finetune import LRSConfig
from .models import ARCHITECTURES

SOURCES = ("mnist", "idx", "blobs")


class ConfigError(ValueError):
    pass


def stream_seed(seed: int, name: str) -> int:
    """Seed for the named stream ``name`` derived from the global seed.

    Streams are independent of each other, so adding a target model or an
    attack never perturbs the randomness another consumer sees.
    """
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]).generate_state(1)[0])


@dataclass
class DataConfig:
    source: str = "mnist"
    path: str = ""  # idx: directory with {train,test}-{images-idx3,labels-idx1}-ubyte
    n_train: int = 0  # 0 keeps everything
    n_test: int = 0
    blobs_classes: int = 10
    blobs_per_class: int = 100
    blobs_dim: int = 64
    blobs_noise: float = 0.15

    @property
    def gate(self) -> float:
        """Clean test accuracy every trained model must reach."""
        return 0.95 if self.source == "blobs" else 0.90


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 0.0


@dataclass
class EvalConfig:
    n: int = 500  # test samples considered before the all-models-correct filter


@dataclass
class DiagConfig:
    lipschitz_eps: float = 0.1
    lipschitz_steps: int = 50
    lipschitz_n: int = 200
    landscape_points: int = 50
    landscape_extent: float = 1.0
    landscape_resolution: int = 11
    curves_n: int = 200


@dataclass
class SweepConfig:
    variant: str = "LRS1"
    lambdas: list = field(default_factory=lambda: [0.0, 0.5, 5.0, 50.0])
    hs: list = field(default_factory=lambda: [0.001, 0.01, 0.03, 0.1])
    method: str = "pgd"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    surrogate: str = "mlp-2x256"
    targets: list = field(default_factory=lambda: ["cnn-small", "cnn-wide", "mlp-deep"])
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lrs: LRSConfig = field(default_factory=LRSConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    eval: EvalConfig = field(default_factory=EvalConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        for arch in [self.surrogate, *self.targets]:
            if arch not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        if self.surrogate in self.targets:
            raise ConfigError(f"surrogate {self.surrogate!r} must not also be a target")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate target architecture")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown attack method {m!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def attack_for(self, method: str) -> AttackConfig:
        return dataclasses.replace(self.attack, method=method,
                                   seed=stream_seed(self.seed, f"attack:{method}"))

    def to_dict(self) -> dict:
        """Everything that affects results; the output directory is left out."""
        d = dataclasses.asdict(self)
        del d["out"]
        return d


# ---------------------------------------------------------------------------
# parsing

_SECTIONS = {"data": DataConfig, "train": TrainConfig, "lrs": LRSConfig, "attack": AttackConfig,
             "eval": EvalConfig, "diag": DiagConfig, "sweep": SweepConfig}
_LISTS = {"targets", "methods", "sweep.lambdas", "sweep.hs"}


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _LISTS:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [float(s) for s in items] if key.startswith("sweep.") else items
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None, strict=False)
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = dict(parser["root"])
    flat.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    if "attack.methods" in flat:
        flat["methods"] = flat.pop("attack.methods")

    top, nested = {}, {name: {} for name in _SECTIONS}
    defaults = ExperimentConfig()
    for key, raw in flat.items():
        head, _, rest = key.partition(".")
        if rest and head in _SECTIONS:
            known = {f.name: f for f in dataclasses.fields(_SECTIONS[head])}
            if rest not in known:
                raise ConfigError(f"unknown config key {key!r}")
            nested[head][rest] = _convert(key, raw, getattr(getattr(defaults, head), rest))
        elif not rest and hasattr(defaults, key) and key not in _SECTIONS:
            top[key] = _convert(key, raw, getattr(defaults, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        sections = {name: cls(**nested[name]) for name, cls in _SECTIONS.items()}
        if "methods" not in top and "method" in nested["attack"]:
            top["methods"] = [nested["attack"]["method"]]
        return ExperimentConfig(**top, **sections)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)
