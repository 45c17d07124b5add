"""Run configuration: nested dataclasses loaded from JSON with full key validation."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import AugmentConfig
from .plgcl import PlgclConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "linear"  # or "constant"


@dataclass
class EmaConfig:
    enabled: bool = True
    alpha: float = 0.999


@dataclass
class GmcConfig:
    patch: int = 8
    ratio: float = 0.7
    weight: float = 1.0
    on_mixed: bool = False  # mask the mixed image instead of source image A


@dataclass
class TeacherTrainConfig:
    sources: list[str] = field(default_factory=list)  # manifest paths
    use_classmixpp: bool = True
    gmc: GmcConfig = field(default_factory=GmcConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 8
    batch_size: int = 4
    steps_per_epoch: int = 0  # 0: ceil(total source samples / batch_size)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    embed_dim: int = 32
    val: str = ""  # optional labeled manifest evaluated after each epoch
    seed: int = 0


@dataclass
class LossWeights:
    contrastive: float = 1.0
    cross_entropy: float = 0.5
    source_ce: float = 0.0  # extra supervised term on source data; needs `sources`


@dataclass
class StudentAdaptConfig:
    target: str = ""  # manifest path; its labels are never read here
    sources: list[str] = field(default_factory=list)
    weights: LossWeights = field(default_factory=LossWeights)
    pseudo_threshold: float = 0.0  # pixels whose teacher confidence is below this are ignored
    plgcl: PlgclConfig = field(default_factory=PlgclConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-4, schedule="constant"))
    epochs: int = 5
    batch_size: int = 2
    steps_per_epoch: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val: str = ""
    seed: int = 0


@dataclass
class DataConfig:
    root: str = "data"
    size: int = 64
    classes: int = 8
    sources: dict[str, int] = field(default_factory=lambda: {"src_a": 200, "src_b": 200})
    target: str = "tgt_unstructured"
    target_count: int = 100
    heldout_count: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    student: StudentAdaptConfig = field(default_factory=StudentAdaptConfig)


# ---------------------------------------------------------------------------
# (de)serialisation
# ---------------------------------------------------------------------------

def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(tp, value, path: str, problems: list[str]):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object")
            return None
        return _build(tp, value, path, problems)
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
        return value
    if origin is list:
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
            return value
        (item,) = typing.get_args(tp)
        return [_coerce(item, v, f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            problems.append(f"{path}: expected a list of {len(args)} values")
            return value
        return tuple(_coerce(a, v, f"{path}[{i}]", problems) for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object")
            return value
        _, vt = typing.get_args(tp)
        return {k: _coerce(vt, v, f"{path}.{k}", problems) for k, v in value.items()}
    return value


def _build(cls, d: dict, path: str, problems: list[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for name in names:
        if name in d:
            kwargs[name] = _coerce(hints[name], d[name], f"{path + '.' if path else ''}{name}", problems)
    if problems:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or cls.__name__}: {exc}")
        return None


def from_dict(cls, d: dict):
    problems: list[str] = []
    cfg = _build(cls, d, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, cls=RunConfig):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return from_dict(cls, d)
