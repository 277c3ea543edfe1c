"""JSON run configuration: loading, strict validation, and building runtime objects."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import ClassMap, ConfigError, SceneConfig, generate_scene, split_dataset
from .representations import ReprConfig
from .seeding import child_seed
from .students import FeatureSpec
from .trainer import CdaSettings, TrainConfig

MODE_ALIASES = {
    "collis": "collis",
    "naive": "naive_codistill",
    "naive_codistill": "naive_codistill",
    "sup": "supervised_only",
    "supervised_only": "supervised_only",
}


@dataclass
class DataSection:
    scenes: int = 200
    val_scenes: int = 20
    label_fraction: float = 0.1
    rows: int = 16
    cols: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    sensor_height: float = 1.7
    ground_radius: float = 24.0
    vehicles: float = 4.0
    poles: float = 5.0
    vegetation: float = 4.0
    classes: list[str] = field(default_factory=lambda: list(ClassMap.default().names))
    long_tail: float | None = None


@dataclass
class StudentSection:
    name: str
    kind: str
    rows: int = 16
    cols: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    radial_bins: int = 16
    azimuth_bins: int = 32
    height_bins: int = 8
    max_radius: float = 25.0
    z_min: float = -2.0
    z_max: float = 4.0
    coord_scale: float = 10.0


@dataclass
class TrainingSection:
    epochs: int = 60
    lambda0: float = 0.5
    delta0: float = 0.95
    lambda_reg: float = 0.1
    lr: float = 0.05
    hidden: int = 32
    mode: str = "collis"


@dataclass
class CdaSection:
    mode: str = "consensus"
    q_init: float = 0.2
    step_size: int = 50
    q_min: float = 0.15
    q_max: float = 0.25


def default_students() -> list[StudentSection]:
    return [
        StudentSection("range", "range"),
        StudentSection("polar", "polar"),
        StudentSection("voxel", "voxel"),
    ]


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    students: list[StudentSection] = field(default_factory=default_students)
    training: TrainingSection = field(default_factory=TrainingSection)
    cda: CdaSection = field(default_factory=CdaSection)
    output: str = "runs/default"

    def validate(self) -> RunConfig:
        d = self.data
        if d.scenes < 2:
            raise ConfigError("data.scenes: need at least 2 scenes")
        if d.val_scenes < 0:
            raise ConfigError("data.val_scenes: must be non-negative")
        if not 0.0 < d.label_fraction <= 1.0:
            raise ConfigError("data.label_fraction: must be in (0, 1]")
        if d.long_tail is not None and not 0.0 < d.long_tail <= 1.0:
            raise ConfigError("data.long_tail: shrink factor must be in (0, 1]")
        self.scene_config().validate()
        if self.training.mode not in MODE_ALIASES:
            raise ConfigError(f"training.mode: unknown mode {self.training.mode!r}")
        if self.cda.mode not in ("constant", "curriculum", "consensus"):
            raise ConfigError(f"cda.mode: unknown mode {self.cda.mode!r}")
        if not 0.0 <= self.cda.q_init <= 1.0:
            raise ConfigError("cda.q_init: must be a probability")
        if self.cda.step_size < 1:
            raise ConfigError("cda.step_size: must be positive")
        if not 0.0 < self.training.delta0 <= 1.0:
            raise ConfigError("training.delta0: must be in (0, 1]")
        if self.training.epochs < 1:
            raise ConfigError("training.epochs: must be >= 1")
        self.feature_specs()
        self.train_config()
        return self

    def class_map(self) -> ClassMap:
        names = tuple(self.data.classes)
        if len(names) < 2:
            raise ConfigError("data.classes: need at least 2 classes")
        base = ClassMap.default()
        if names == base.names:
            cm = base
        else:
            cm = ClassMap(names, tuple(1.0 / len(names) for _ in names))
        if self.data.long_tail is not None:
            cm = cm.long_tail(factor=self.data.long_tail)
        return cm

    def scene_config(self) -> SceneConfig:
        d = self.data
        try:
            return SceneConfig(
                rows=d.rows, cols=d.cols, fov_up=d.fov_up, fov_down=d.fov_down,
                sensor_height=d.sensor_height, ground_radius=d.ground_radius,
                vehicles=d.vehicles, poles=d.poles, vegetation=d.vegetation,
                classes=self.class_map(),
            )
        except ConfigError as e:
            raise ConfigError(f"data: {e}") from e

    def feature_specs(self) -> list[FeatureSpec]:
        specs = []
        for i, s in enumerate(self.students):
            kw = dataclasses.asdict(s)
            name, scale = kw.pop("name"), kw.pop("coord_scale")
            try:
                specs.append(FeatureSpec(name, ReprConfig(**kw), scale))
            except ConfigError as e:
                raise ConfigError(f"students[{i}]: {e}") from e
        if not specs:
            raise ConfigError("students: the roster is empty")
        return specs

    def train_config(self, mode: str | None = None, seed: int | None = None) -> TrainConfig:
        t = self.training
        try:
            return TrainConfig(
                students=self.feature_specs(),
                epochs=t.epochs,
                label_fraction=self.data.label_fraction,
                lambda0=t.lambda0,
                delta0=t.delta0,
                lambda_reg=t.lambda_reg,
                lr=t.lr,
                hidden=t.hidden,
                seed=self.seed if seed is None else seed,
                mode=MODE_ALIASES[mode or t.mode],
                cda=CdaSettings(**dataclasses.asdict(self.cda)),
            )
        except ValueError as e:
            raise ConfigError(f"training: {e}") from e

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        if key in _SECTIONS.get(cls, {}):
            sub = _SECTIONS[cls][key]
            if isinstance(sub, list):
                if not isinstance(value, list):
                    raise ConfigError(f"{path}: expected a list")
                value = [_build(sub[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
            else:
                value = _build(sub, value, path)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


_SECTIONS = {
    RunConfig: {
        "data": DataSection,
        "students": [StudentSection],
        "training": TrainingSection,
        "cda": CdaSection,
    },
}


def parse_config(raw: dict) -> RunConfig:
    config = _build(RunConfig, raw, "")
    try:
        return config.validate()
    except TypeError as e:
        raise ConfigError(f"config: wrong value type ({e})") from e


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(raw)


def build_split(config: RunConfig, seed: int | None = None):
    """Generate the training and validation scenes and split them (pure in (config, seed))."""
    seed = config.seed if seed is None else seed
    scene_cfg = config.scene_config()
    scenes = [generate_scene(child_seed(seed, "data", i), scene_cfg) for i in range(config.data.scenes)]
    val = [generate_scene(child_seed(seed, "val", i), scene_cfg) for i in range(config.data.val_scenes)]
    return scenes, split_dataset(scenes, config.data.label_fraction, child_seed(seed, "split"), val)
