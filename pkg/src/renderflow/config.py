"""Run configuration: one YAML tree with a section per module.

Every field is addressable by a dotted path (``train.lr``); unknown keys,
wrong types and violated invariants are reported with that path.
"""
from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from renderflow.bridge import BridgeConfig
from renderflow.errors import ConfigError, InvalidArgumentError
from renderflow.evaluate import GAP_STUDY, AblationBudget
from renderflow.infer import InferConfig
from renderflow.inverse import InverseConfig
from renderflow.model import NetConfig
from renderflow.scene.render import DEFAULT_D_MAX
from renderflow.scene.sequence import SequenceConfig
from renderflow.train import TrainConfig

SECTIONS = ("dataset", "net", "bridge", "train", "infer", "inverse", "eval")


@dataclass
class DatasetConfig:
    seed: int = 0
    sequences: int = 8
    frames: int = 5
    res: tuple = (64, 64)
    env_res: tuple = (16, 32)
    n_objects: int = 4
    orbit_radius: float = 4.0
    orbit_height: float = 1.6
    orbit_arc_deg: float = 40.0
    fov_deg: float = 45.0
    d_max: float = DEFAULT_D_MAX
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        self.res, self.env_res = tuple(self.res), tuple(self.env_res)
        if self.sequences < 1:
            raise InvalidArgumentError("sequences must be >= 1")
        if self.frames < 1:
            raise InvalidArgumentError("frames must be >= 1")
        if len(self.res) != 2 or min(self.res) < 16:
            raise InvalidArgumentError("res must be two values >= 16")
        if len(self.env_res) != 2 or self.env_res[0] < 4 or self.env_res[1] < 8:
            raise InvalidArgumentError("env_res must be at least (4, 8)")
        if not 1 <= self.n_objects <= 8:
            raise InvalidArgumentError("n_objects must lie in [1, 8]")
        if not (0 <= self.val_frac < 1 and 0 <= self.test_frac < 1 and self.val_frac + self.test_frac < 1):
            raise InvalidArgumentError("val_frac and test_frac must be in [0, 1) and sum below 1")

    def sequence_config(self, material_interp=None) -> SequenceConfig:
        keep = {f.name for f in dataclasses.fields(SequenceConfig)}
        d = {k: v for k, v in dataclasses.asdict(self).items() if k in keep}
        return SequenceConfig(**d, material_interp=material_interp)


@dataclass
class EvalConfig:
    ablation_steps: int = 300
    stage2_steps: int = 200
    batch: int = 4
    lr: float = 3e-4
    warmup_steps: int = 50
    seed: int = 0
    keyframe_gap: int = 16
    gaps: tuple = GAP_STUDY
    n_runs: int = 10
    split: str = "val"

    def __post_init__(self):
        self.gaps = tuple(self.gaps)
        if self.n_runs < 1:
            raise InvalidArgumentError("n_runs must be >= 1")
        if self.ablation_steps < 1 or self.stage2_steps < 1:
            raise InvalidArgumentError("ablation_steps and stage2_steps must be >= 1")
        if self.split not in ("train", "val", "test"):
            raise InvalidArgumentError("split must be train, val or test")
        if any(g < 1 for g in self.gaps):
            raise InvalidArgumentError("gaps must be >= 1")


# sections whose bridge comes from the shared ``bridge`` section
_BRIDGE_SHARED = {"train", "inverse"}
_SECTION_TYPES = {
    "dataset": DatasetConfig, "net": NetConfig, "bridge": BridgeConfig, "train": TrainConfig,
    "infer": InferConfig, "inverse": InverseConfig, "eval": EvalConfig,
}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    net: NetConfig = field(default_factory=NetConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = _plain(dataclasses.asdict(getattr(self, name)))
            if name in _BRIDGE_SHARED:
                d.pop("bridge", None)
            out[name] = d
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def train_config(self, stage="base", **over) -> TrainConfig:
        d = {**self.to_dict()["train"], "stage": stage, "bridge": self.to_dict()["bridge"], **over}
        return TrainConfig(**d)

    def inverse_config(self, **over) -> InverseConfig:
        return InverseConfig(**{**self.to_dict()["inverse"], "bridge": self.to_dict()["bridge"], **over})

    def ablation_budget(self) -> AblationBudget:
        e = self.eval
        return AblationBudget(steps=e.ablation_steps, stage2_steps=e.stage2_steps, batch=e.batch, lr=e.lr,
                              warmup_steps=e.warmup_steps, seed=e.seed, keyframe_gap=e.keyframe_gap,
                              net=self.net, gaps=e.gaps)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return value
        return _check_type(value, next(a for a in args if a is not type(None)), path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif hint in (tuple, list) or origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
    elif hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
    return value


def _build(cls, data, path, skip=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown key")
        kwargs[key] = _check_type(value, hints[key], f"{path}.{key}")
    return kwargs, names


def _blame(message, names, path, given=()):
    """Dotted path of the field an invariant message mentions.

    Fields the user actually set win over defaults; ties go to the earliest mention.
    """
    hits = [(name not in given, m.start(), name) for name in names
            for m in re.finditer(rf"\b{re.escape(name)}\b", message)]
    return f"{path}.{min(hits)[2]}" if hits else path


def _construct(cls, kwargs, names, path):
    try:
        return cls(**kwargs)
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        raise ConfigError(_blame(str(exc), names, path, set(kwargs)), str(exc)) from exc


def build_config(tree: dict) -> RunConfig:
    """Validate a plain key/value tree into a RunConfig."""
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "configuration must be a mapping of sections")
    for key in tree:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section (expected one of {', '.join(SECTIONS)})")
    built = {}
    bridge_kw, bridge_names = _build(BridgeConfig, tree.get("bridge"), "bridge")
    built["bridge"] = _construct(BridgeConfig, bridge_kw, bridge_names, "bridge")
    for name in SECTIONS:
        if name == "bridge":
            continue
        cls = _SECTION_TYPES[name]
        skip = ("bridge",) if name in _BRIDGE_SHARED else ()
        kwargs, names = _build(cls, tree.get(name), name, skip)
        if name in _BRIDGE_SHARED:
            kwargs["bridge"] = dataclasses.replace(built["bridge"])
        built[name] = _construct(cls, kwargs, names, name)
    return RunConfig(**built)


def parse_override(text: str):
    """``a.b=value`` -> (["a", "b"], parsed value); values are YAML scalars or lists."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(key, "override key must be section.field")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"cannot parse value {raw!r}") from exc
    return parts, value


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML file (missing path or empty file: defaults) and apply overrides."""
    tree = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(str(path), "configuration must be a mapping of sections")
    for item in overrides:
        (section, key), value = parse_override(item)
        node = tree.setdefault(section, {})
        if not isinstance(node, dict):
            raise ConfigError(section, "expected a mapping")
        node[key] = value
    return build_config(tree)
