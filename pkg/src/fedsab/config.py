"""Experiment configuration: nested dataclasses with strict JSON parsing.

Unknown keys anywhere in a config file are errors, so a misspelt attack
parameter can never be silently ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from fedsab.attacks import AttackConfig
from fedsab.defenses import DpConfig, StripConfig
from fedsab.errors import ConfigError
from fedsab.stego import StegoTrainConfig

SOURCES = ("synthetic", "idx", "cifar")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    name: str = "synthetic-fashion"
    num_classes: int = 10
    shape: tuple[int, int, int] = (1, 28, 28)
    n_train: int = 2000
    n_test: int = 1000
    # IDX or CIFAR binary files; used when source != "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list[str] = field(default_factory=list)
    test_files: list[str] = field(default_factory=list)
    # synthetic generator knobs
    noise: float = 0.1
    jitter: int = 0
    shared: float = 0.0
    blobs: int = 3
    data_seed: int = 1234

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"dataset.source must be one of {SOURCES}, got '{self.source}'")
        self.shape = tuple(self.shape)
        if len(self.shape) != 3:
            raise ConfigError(f"dataset.shape must be [C, H, W], got {list(self.shape)}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset.n_train and dataset.n_test must be >= 1")


@dataclass
class BenignSpec:
    lr: float = 0.05
    decay: float = 0.0
    epochs: int = 1
    batch: int = 32
    weighted_by_samples: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.decay < 0:
            raise ConfigError("benign.lr and benign.decay must be >= 0")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("benign.epochs and benign.batch must be >= 1")


@dataclass
class PartitionSpec:
    alpha: float = 0.9

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"partition.alpha must be > 0, got {self.alpha}")


@dataclass
class DefenseSpec:
    dp: bool = False
    dp_config: DpConfig = field(default_factory=DpConfig)
    partfedavg_drop: float = 0.0
    strip: bool = False
    strip_config: StripConfig = field(default_factory=StripConfig)

    def __post_init__(self):
        if not 0 <= self.partfedavg_drop < 1:
            raise ConfigError(f"defenses.partfedavg_drop must lie in [0, 1), got {self.partfedavg_drop}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: str = "small-cnn"
    pool_size: int = 20
    clients_per_round: int = 5
    rounds: int = 60
    server_lr: float = 1.0
    attack: AttackConfig | None = field(default_factory=AttackConfig)
    benign: BenignSpec = field(default_factory=BenignSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    defenses: DefenseSpec = field(default_factory=DefenseSpec)
    stego: StegoTrainConfig = field(default_factory=StegoTrainConfig)
    seed: int = 0
    snapshot_every: int = 0
    eval_asr_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if not 1 <= self.clients_per_round <= self.pool_size:
            raise ConfigError(f"clients_per_round must lie in [1, pool_size={self.pool_size}], got {self.clients_per_round}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.snapshot_every < 0 or self.eval_asr_every < 1:
            raise ConfigError("snapshot_every must be >= 0 and eval_asr_every >= 1")
        a = self.attack
        if a is not None:
            if a.start + a.duration > self.rounds:
                raise ConfigError(
                    f"attack.start + attack.duration = {a.start + a.duration} exceeds rounds = {self.rounds}"
                )
            if not 0 <= a.target_class < self.dataset.num_classes:
                raise ConfigError(f"attack.target_class {a.target_class} outside [0, {self.dataset.num_classes})")
            if a.num_adversaries > self.clients_per_round:
                raise ConfigError("attack.num_adversaries cannot exceed clients_per_round")

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        return _to_plain(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            if type(None) in typing.get_args(tp):
                return None
            raise ConfigError(f"{path}: must not be null")
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (inner, *_) = typing.get_args(tp) or (object,)
        items = [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``desk_sab.json``, ...)."""
    path = resources.files("fedsab") / "configs" / name
    if not path.is_file():
        raise ConfigError(f"no bundled config named '{name}'")
    return Path(str(path))


def resolve_config(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    return bundled_config(arg if arg.endswith(".json") else f"{arg}.json")
