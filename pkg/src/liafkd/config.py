"""Run configuration: one flat dataclass, YAML file loading, env overrides."""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .toydet.scenes import SceneSpec

ENV_PREFIX = "LIAFKD_"

MASK_MODES = ("separate", "shared_mean")
SOFTMAX_SCOPES = ("batch", "image")
RESCALE_MODES = ("none", "mean_one")
VARIANTS = ("liaf", "no_kd", "fitnet_allones", "teacher_only_mask")


class ConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    # randomness
    seed: int = 0
    data_seed: int = 0
    teacher_seed: int = 0

    # synthetic corpus
    image_size: int = 128
    num_classes: int = 3
    train_scenes: int = 2000
    eval_scenes: int = 500
    min_instances: int = 1
    max_instances: int = 4
    min_size: int = 16
    max_size: int = 48
    noise: float = 0.05

    # detectors
    teacher_width: int = 64
    student_width: int = 32

    # selectors and masks
    K: int = 6
    pool_h: int = 7
    pool_w: int = 7
    samples_per_bin: int = 2
    mu: float = 0.1
    lam: float = 100.0
    warmup_frac: float = 0.1
    mask_mode: str = "separate"
    softmax_scope: str = "batch"
    rescale: str = "none"
    detach_scores: bool = True

    # optimization
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_teacher: float = 0.01
    lr_selector: float = 0.01
    lr_student: float = 0.01
    teacher_epochs: int = 30
    selector_epochs: int = 3
    student_epochs: int = 10
    eval_every: int = 1

    # decoding
    score_thresh: float = 0.05
    nms_iou: float = 0.5

    def validate(self):
        errors = []
        if self.K < 1:
            errors.append("K must be >= 1")
        for name in ("mu", "lam", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if not 0 <= self.warmup_frac <= 1:
            errors.append("warmup_frac must be in [0, 1]")
        if self.mask_mode not in MASK_MODES:
            errors.append(f"mask_mode must be one of {MASK_MODES}")
        if self.softmax_scope not in SOFTMAX_SCOPES:
            errors.append(f"softmax_scope must be one of {SOFTMAX_SCOPES}")
        if self.rescale not in RESCALE_MODES:
            errors.append(f"rescale must be one of {RESCALE_MODES}")
        for name in ("pool_h", "pool_w", "samples_per_bin", "batch_size", "teacher_width",
                     "student_width", "num_classes"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        for name in ("eval_every", "teacher_epochs", "selector_epochs", "student_epochs", "train_scenes", "eval_scenes"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        for name in ("lr_teacher", "lr_selector", "lr_student"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be > 0")
        try:
            self.scene_spec().validate()
        except ValueError as exc:
            errors.append(str(exc))
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=self.image_size,
            min_instances=self.min_instances,
            max_instances=self.max_instances,
            num_classes=self.num_classes,
            min_size=self.min_size,
            max_size=self.max_size,
            noise=self.noise,
        )

    def replace(self, **changes) -> "DistillConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "default": {},
    # mean_one keeps foreground weights comparable to the background weight of 1
    "recommended": {"rescale": "mean_one"},
    "smoke": {
        "train_scenes": 64, "eval_scenes": 32, "teacher_epochs": 2, "selector_epochs": 1,
        "student_epochs": 2, "batch_size": 16, "teacher_width": 16, "student_width": 8,
        "pool_h": 3, "pool_w": 3, "K": 2,
    },
}


def _coerce(name, raw, ftype):
    value = yaml.safe_load(raw) if isinstance(raw, str) else raw
    target = {"int": int, "float": float, "bool": bool, "str": str}[ftype]
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if target is str and not isinstance(value, str):
        value = str(value)
    if not isinstance(value, target) or (target is int and isinstance(value, bool)):
        raise ConfigError(f"{name}: expected {ftype}, got {value!r}")
    return value


def _flatten(tree, prefix=""):
    # nested sections are allowed purely for readability; leaf names must be unique
    out = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            out.update(_flatten(value, prefix))
        else:
            if key in out:
                raise ConfigError(f"duplicate key {key!r}")
            out[key] = value
    return out


def from_mapping(mapping: dict, base: DistillConfig = None) -> DistillConfig:
    types = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(DistillConfig)}
    flat = _flatten(mapping or {})
    preset = flat.pop("preset", None)
    cfg = base or DistillConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = dataclasses.replace(cfg, **PRESETS[preset])
    unknown = sorted(set(flat) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    changes = {k: _coerce(k, v, types[k]) for k, v in flat.items()}
    return dataclasses.replace(cfg, **changes).validate()


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    names = {f.name.upper(): f.name for f in fields(DistillConfig)}
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):]
        if name not in names:
            raise ConfigError(f"unknown config key in environment: {key}")
        out[names[name]] = raw
    return out


def load_config(path=None, environ=None, **overrides) -> DistillConfig:
    """File, then ``LIAFKD_*`` environment variables, then keyword overrides."""
    mapping = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            mapping = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = from_mapping(mapping)
    env = env_overrides(environ)
    if env:
        cfg = from_mapping(env, base=cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = from_mapping(overrides, base=cfg)
    return cfg


def dump_config(cfg: DistillConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
