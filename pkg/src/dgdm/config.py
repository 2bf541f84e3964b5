"""Flat-namespaced run configuration.

Config files are plain text, one ``section.key = value`` per line, with
``#`` comments; command-line ``--set key=value`` overrides win over file
values, which win over defaults.  Every key is declared in the schema
below with its type and range, so typos and out-of-range values fail
loudly with the offending key path.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .backbone import BackboneSpec, StageSpec
from .cagd import CagdConfig
from .data import SyntheticSpec, generate, load_folder
from .layer import STAGES, DgdmConfig, stage_flags
from .sagd import ADAPTIVE_7, SagdConfig
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "SCHEMA",
    "default_config",
    "parse_value",
    "load_config_file",
    "resolve_config",
    "write_resolved",
    "make_backbone_spec",
    "make_dgdm_config",
    "make_train_config",
    "load_dataset",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    check: Callable[[Any], bool] | None = None
    allowed: tuple | None = None


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0),
    "data.source": Key(str, "synthetic", allowed=("synthetic", "folder")),
    "data.root": Key(str, ""),
    "data.test_root": Key(str, ""),
    "data.n_train": Key(int, 2000, lambda v: v >= 1),
    "data.n_test": Key(int, 500, lambda v: v >= 1),
    "data.image_size": Key(int, 64, lambda v: v >= 32),
    "data.n_classes": Key(int, 3, lambda v: 2 <= v <= 5),
    "data.noise": Key(float, 0.1, lambda v: 0.0 <= v <= 1.0),
    "data.distractors": Key(bool, True),
    "train.learning_rate": Key(float, 0.01, lambda v: v >= 0),
    "train.momentum": Key(float, 0.9, lambda v: v >= 0),
    "train.weight_decay": Key(float, 1e-4, lambda v: v >= 0),
    "train.epochs": Key(int, 8, lambda v: v >= 1),
    "train.batch_size": Key(int, 32, lambda v: v >= 1),
    "train.dtype": Key(str, "float32", allowed=("float32", "float64")),
    "train.augment_flip": Key(bool, False),
    "train.augment_crop": Key(bool, False),
    "model.widths": Key(str, "16,32,64"),
    "model.convs_per_stage": Key(int, 2, lambda v: v >= 1),
    "model.insertion_points": Key(str, "1,2"),
    "model.downsample_stages": Key(str, "all"),
    "dgdm.enabled": Key(bool, True),
    "dgdm.drop_rate": Key(float, 0.75, lambda v: 0.0 <= v <= 1.0),
    "dgdm.use_cagd": Key(bool, True),
    "dgdm.stage": Key(str, "full", allowed=STAGES),
    "cagd.alpha": Key(float, 0.5, lambda v: 0.0 <= v <= 1.0),
    "cagd.beta": Key(float, 3.0, lambda v: v >= 1.0),
    "sagd.delta_l": Key(float, 0.10, lambda v: 0.0 <= v < 1.0),
    "sagd.delta_h": Key(float, 0.90, lambda v: 0.0 < v <= 1.0),
    "sagd.block_size_high": Key(int, 2, lambda v: v >= 1),
    "sagd.block_size_low": Key(int, 3, lambda v: v >= 1),
    "sagd.adaptive": Key(str, "fixed", allowed=("fixed", ADAPTIVE_7)),
    "eval.threshold_fraction": Key(float, 0.2, lambda v: 0.0 < v < 1.0),
}


def default_config() -> dict:
    return {key: spec.default for key, spec in SCHEMA.items()}


def parse_value(key: str, text: str):
    """Parse and range-check one raw value for a schema key."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    spec = SCHEMA[key]
    text = text.strip()
    try:
        if spec.type is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                value = True
            elif lowered in ("false", "0", "no"):
                value = False
            else:
                raise ValueError(f"not a boolean: {text!r}")
        else:
            value = spec.type(text)
    except ValueError as err:
        raise ConfigError(f"invalid value for {key}: {err}") from None
    if spec.allowed is not None and value not in spec.allowed:
        raise ConfigError(f"{key} must be one of {spec.allowed}, got {value!r}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"value {value!r} out of range for {key}")
    return value


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = parse_value(key, text)
        except ConfigError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from None
    return values


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    """Defaults, then file values, then --set overrides, then --seed."""
    config = default_config()
    if config_path is not None:
        config.update(load_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = (part.strip() for part in item.split("=", 1))
        config[key] = parse_value(key, text)
    if seed is not None:
        config["seed"] = int(seed)
    _cross_validate(config)
    return config


def _cross_validate(config: dict) -> None:
    if config["sagd.delta_l"] >= config["sagd.delta_h"]:
        raise ConfigError(
            f"sagd.delta_l ({config['sagd.delta_l']}) must be below "
            f"sagd.delta_h ({config['sagd.delta_h']})"
        )
    if config["data.source"] == "folder" and not config["data.root"]:
        raise ConfigError("data.source=folder requires data.root")
    _parse_int_list(config["model.widths"], "model.widths", minimum=1)
    _parse_int_list(config["model.insertion_points"], "model.insertion_points", minimum=0)


def write_resolved(config: dict, path) -> None:
    """Snapshot every key, sorted; the file is itself a valid config."""
    lines = [f"{key} = {config[key]}" for key in sorted(config)]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_int_list(text: str, key: str, minimum: int) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        values = tuple(int(part.strip()) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated integer list, got {text!r}")
    if any(v < minimum for v in values):
        raise ConfigError(f"{key} entries must be >= {minimum}, got {text!r}")
    return values


def make_backbone_spec(config: dict, num_classes: int | None = None) -> BackboneSpec:
    widths = _parse_int_list(config["model.widths"], "model.widths", minimum=1)
    insertion = _parse_int_list(
        config["model.insertion_points"], "model.insertion_points", minimum=0
    )
    if not config["dgdm.enabled"]:
        insertion = ()
    down_key = config["model.downsample_stages"]
    if down_key == "all":
        downsampled = set(range(len(widths)))
    else:
        downsampled = set(_parse_int_list(down_key, "model.downsample_stages", minimum=0))
    stages = tuple(
        StageSpec(config["model.convs_per_stage"], w, downsample=i in downsampled)
        for i, w in enumerate(widths)
    )
    try:
        return BackboneSpec(
            stages=stages,
            dgdm_insertion_points=insertion,
            num_classes=num_classes if num_classes is not None else config["data.n_classes"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def make_dgdm_config(config: dict) -> DgdmConfig | None:
    if not config["dgdm.enabled"]:
        return None
    flags = stage_flags(config["dgdm.stage"])
    return DgdmConfig(
        drop_rate=config["dgdm.drop_rate"],
        cagd=CagdConfig(alpha=config["cagd.alpha"], beta=config["cagd.beta"]),
        sagd=SagdConfig(
            delta_l=config["sagd.delta_l"],
            delta_h=config["sagd.delta_h"],
            block_size_high=config["sagd.block_size_high"],
            block_size_low=config["sagd.block_size_low"],
            adaptive=config["sagd.adaptive"],
        ),
        use_cagd=flags["use_cagd"] and config["dgdm.use_cagd"],
        use_sagd_stage_low=flags["use_sagd_stage_low"],
    )


def make_train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=config["train.learning_rate"],
        momentum=config["train.momentum"],
        weight_decay=config["train.weight_decay"],
        epochs=config["train.epochs"],
        batch_size=config["train.batch_size"],
        seed=config["seed"],
        dtype=config["train.dtype"],
        augment_flip=config["train.augment_flip"],
        augment_crop=config["train.augment_crop"],
    )


def load_dataset(config: dict, split: str):
    """Materialize the train or test dataset named by the config.

    Synthetic sets derive their seed from the run seed (test uses seed+1 so
    the splits never overlap).
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    if config["data.source"] == "synthetic":
        spec = SyntheticSpec(
            n_images=config["data.n_train"] if split == "train" else config["data.n_test"],
            image_size=config["data.image_size"],
            n_classes=config["data.n_classes"],
            noise=config["data.noise"],
            distractors=config["data.distractors"],
            seed=config["seed"] + (0 if split == "train" else 1),
        )
        return generate(spec)
    root = config["data.root"]
    if split == "test" and config["data.test_root"]:
        root = config["data.test_root"]
    return load_folder(root)
