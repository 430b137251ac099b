"""Experiment configuration: one JSON document, strictly validated.

A config owns a single root ``seed``; dataset generation, parameter init and
perturbation draws all use named child streams derived from it (see
:mod:`gfl_lab.seeding`), so runs are reproducible end to end from the one
number. Unknown keys anywhere in the document are rejected rather than
ignored; ``--set a.b=c`` style overrides go through :func:`apply_override`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .detector import HeadVariant, TrainConfig
from .distrib import RegressorKind, Support
from .inference import NmsConfig
from .seeding import child_seed
from .synth import SceneSpec

__all__ = [
    "ConfigError",
    "SceneConfig",
    "DataConfig",
    "TrainSection",
    "ExperimentConfig",
    "apply_override",
]


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    converted = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        converted[f.name] = value
    try:
        return cls(**converted)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


@dataclass(frozen=True)
class SceneConfig:
    """Benchmark geometry; the dataset seed is derived, not configured."""

    width: float = 128.0
    height: float = 128.0
    stride: float = 8.0
    num_classes: int = 3
    boxes_per_scene: tuple[int, int] = (1, 4)
    box_size_range: tuple[float, float] = (16.0, 64.0)
    ambiguity_sigma: float = 1.0
    feature_noise: float = 0.05


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 200
    eval_scenes: int = 50

    def __post_init__(self) -> None:
        if self.train_scenes < 1 or self.eval_scenes < 0:
            raise ValueError(f"bad dataset sizes {self.train_scenes}/{self.eval_scenes}")


@dataclass(frozen=True)
class TrainSection:
    variant: str = "joint"
    regressor: str = "general"
    mode: str = "mlp"
    hidden: int = 64
    iterations: int = 2000
    lr: float | None = None
    momentum: float = 0.9
    batch_size: int = 8
    lambda_box: float = 2.0
    lambda_dist: float = 0.25
    beta: float = 2.0
    gamma: float = 2.0
    support_n: int = 16
    support_delta: float = 1.0

    def __post_init__(self) -> None:
        HeadVariant(self.variant)  # raises on unknown names
        if self.regressor not in ("dirac", "gaussian", "general"):
            raise ValueError(f"unknown regressor {self.regressor!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    run_name: str = "default"
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    nms: NmsConfig = field(default_factory=NmsConfig)
    out_dir: str = "runs/default"

    # -- (de)serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        known = {"run_name", "seed", "scene", "data", "train", "nms", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        kwargs = {}
        for key in ("run_name", "seed", "out_dir"):
            if key in data:
                kwargs[key] = data[key]
        if "scene" in data:
            kwargs["scene"] = _from_dict(SceneConfig, data["scene"], "scene")
        if "data" in data:
            kwargs["data"] = _from_dict(DataConfig, data["data"], "data")
        if "train" in data:
            kwargs["train"] = _from_dict(TrainSection, data["train"], "train")
        if "nms" in data:
            kwargs["nms"] = _from_dict(NmsConfig, data["nms"], "nms")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "run_name": self.run_name,
            "seed": self.seed,
            "scene": _to_dict(self.scene),
            "data": _to_dict(self.data),
            "train": _to_dict(self.train),
            "nms": _to_dict(self.nms),
            "out_dir": self.out_dir,
        }

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- concrete objects --------------------------------------------------

    def scene_spec(self, split: str) -> SceneSpec:
        if split not in ("train", "eval"):
            raise ValueError(f"unknown split {split!r}")
        s = self.scene
        return SceneSpec(
            width=s.width,
            height=s.height,
            stride=s.stride,
            num_classes=s.num_classes,
            boxes_per_scene=s.boxes_per_scene,
            box_size_range=s.box_size_range,
            ambiguity_sigma=s.ambiguity_sigma,
            feature_noise=s.feature_noise,
            seed=child_seed(self.seed, f"dataset.{split}"),
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        if t.regressor == "general":
            kind = RegressorKind.general(Support(y0=0.0, n=t.support_n, delta=t.support_delta))
        elif t.regressor == "gaussian":
            kind = RegressorKind.gaussian()
        else:
            kind = RegressorKind.dirac()
        return TrainConfig(
            variant=HeadVariant(t.variant),
            regressor=kind,
            mode=t.mode,
            hidden=t.hidden,
            iterations=t.iterations,
            lr=t.lr,
            momentum=t.momentum,
            batch_size=t.batch_size,
            lambda_box=t.lambda_box,
            lambda_dist=t.lambda_dist,
            beta=t.beta,
            gamma=t.gamma,
            seed=self.seed,
        )


def apply_override(data: dict, assignment: str) -> dict:
    """Apply one ``dotted.path=value`` override to a config dictionary.

    The value is parsed as JSON when possible and kept as a string otherwise,
    so ``--set train.beta=4`` and ``--set run_name=trial`` both work.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty key path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {assignment!r} descends through a non-object at {k!r}")
        node = nxt
    node[keys[-1]] = value
    return data
