"""Run configuration: plain key=value files plus CLI overrides.

The key list is closed; unknown keys are rejected. The resolved
configuration can be rendered back to text (``resolved_text``) and is echoed
into every run directory, so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import resolve_data_dir
from .ekd import EkdWeights
from .network import NetConfig, SubnetSpec
from .trainer import LrSchedule, TrainConfig


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad value, inconsistent setup)."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_ints(s: str) -> tuple:
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


def _parse_floats(s: str) -> tuple:
    s = s.strip()
    return tuple(float(v) for v in s.split(",")) if s else ()


def _parse_subnets(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(_parse_ints(part) for part in s.split(";") if part.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(str(v) for v in sub) for sub in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    # architecture
    family: str = "resnet-basic"
    stage_blocks: tuple = (3, 3, 3)
    stage_channels: tuple = (16, 32, 64)
    num_classes: int = 4
    input_shape: tuple = (3, 16, 16)
    stem: str = "auto"
    block_variant: str = "post"
    subnets: tuple = ((3, 2, 2),)
    classifier_mode: str = "shared"
    taps: str = "auto"              # auto | comma list of 1-based stage indices
    # objective
    regime: str = "ddnn_ekd"
    kl_weights: tuple = (1.0,)      # scalar broadcasts over sub-nets
    att_weights: tuple = (1e-05,)
    teacher_grad: bool = False
    unnormalized_subnet_ce: bool = False
    att_aggregate: str = "mean"
    # optimization
    lr: float = 0.1
    lr_drop_epochs: tuple = (15, 25)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    reforward_each_net: bool = False
    augment: bool = False
    # data
    dataset: str = "synthetic"      # synthetic | cifar10 | cifar100
    data_dir: str = ""
    synthetic_classes: int = 4
    synthetic_train_per_class: int = 500
    synthetic_test_per_class: int = 100
    synthetic_size: tuple = (16, 16)
    synthetic_seed: int = 7
    synthetic_signal: float = 0.18
    synthetic_noise: float = 0.85
    synthetic_shift: int = 3
    # run
    out: str = "out"
    deterministic: bool = False
    checked: bool = False

    _PARSERS = {
        "stage_blocks": _parse_ints, "stage_channels": _parse_ints,
        "input_shape": _parse_ints, "subnets": _parse_subnets,
        "kl_weights": _parse_floats, "att_weights": _parse_floats,
        "lr_drop_epochs": _parse_ints, "synthetic_size": _parse_ints,
        "num_classes": int, "batch_size": int, "epochs": int, "seed": int,
        "synthetic_classes": int, "synthetic_train_per_class": int,
        "synthetic_test_per_class": int, "synthetic_seed": int,
        "synthetic_shift": int,
        "lr": float, "lr_drop_factor": float, "momentum": float,
        "weight_decay": float, "synthetic_signal": float, "synthetic_noise": float,
        "teacher_grad": _parse_bool, "unnormalized_subnet_ce": _parse_bool,
        "reforward_each_net": _parse_bool, "augment": _parse_bool,
        "deterministic": _parse_bool, "checked": _parse_bool,
    }

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    def set_key(self, key: str, raw: str) -> None:
        if key not in self.keys():
            raise ConfigError(f"unknown configuration key {key!r}")
        parser = self._PARSERS.get(key, str)
        try:
            value = parser(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e
        setattr(self, key, value)

    @classmethod
    def from_sources(cls, config_path=None, overrides=()) -> "RunConfig":
        """File first, then repeatable key=value overrides."""
        cfg = cls()
        if config_path is not None:
            for key, raw in parse_config_file(config_path):
                cfg.set_key(key, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, _, raw = item.partition("=")
            cfg.set_key(key.strip(), raw.strip())
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.to_net_config()
            specs = self.to_subnet_specs()
            self.tap_stage_indices()
            self.to_train_config(len(specs))
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
        if self.dataset not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    def resolved_text(self) -> str:
        lines = [f"{name} = {_fmt(getattr(self, name))}" for name in self.keys()]
        return "\n".join(lines) + "\n"

    # -- builders -----------------------------------------------------------

    def to_net_config(self) -> NetConfig:
        return NetConfig(self.family, self.stage_blocks, self.stage_channels,
                         self.num_classes, self.input_shape, stem=self.stem,
                         block_variant=self.block_variant)

    def to_subnet_specs(self) -> tuple:
        specs = tuple(SubnetSpec(prefix, self.classifier_mode) for prefix in self.subnets)
        cfg = self.to_net_config()
        for spec in specs:
            spec.validate_against(cfg)
        return specs

    def tap_stage_indices(self) -> Optional[tuple]:
        """None for the automatic policy; otherwise 0-based stage indices."""
        if self.taps.strip() == "auto":
            return None
        stages = _parse_ints(self.taps)
        if any(s < 1 for s in stages):
            raise ConfigError(f"tap stages are 1-based, got {self.taps!r}")
        return tuple(s - 1 for s in stages)

    def _per_subnet(self, values: tuple, what: str, k: int) -> tuple:
        if len(values) == 1:
            return values * k
        if len(values) != k:
            raise ValueError(f"{what} has {len(values)} entries for {k} sub-nets")
        return values

    def to_train_config(self, num_subnets: int) -> TrainConfig:
        weights = None
        if self.regime == "ddnn_ekd" and num_subnets:
            weights = EkdWeights(self._per_subnet(self.kl_weights, "kl_weights", num_subnets),
                                 self._per_subnet(self.att_weights, "att_weights", num_subnets))
        return TrainConfig(
            regime=self.regime,
            lr=LrSchedule(self.lr, self.lr_drop_epochs, self.lr_drop_factor),
            momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            weights=weights, teacher_grad=self.teacher_grad,
            reforward_each_net=self.reforward_each_net,
            unnormalized_subnet_ce=self.unnormalized_subnet_ce,
            att_aggregate=self.att_aggregate, augment=self.augment,
        )

    def load_dataset(self) -> tuple:
        """Returns (train_images, test_images)."""
        from .data import load_cifar_dir, make_synthetic_set, split_per_class
        if self.dataset == "synthetic":
            total = self.synthetic_train_per_class + self.synthetic_test_per_class
            images = make_synthetic_set(
                self.synthetic_classes, total, size=self.synthetic_size,
                seed=self.synthetic_seed, signal=self.synthetic_signal,
                noise=self.synthetic_noise, max_shift=self.synthetic_shift)
            return split_per_class(images, self.synthetic_classes,
                                   self.synthetic_train_per_class)
        data_dir = resolve_data_dir(self.data_dir)
        if data_dir is None:
            raise ConfigError("dataset requires data_dir (or the DDNN_DATA_DIR environment variable)")
        return load_cifar_dir(data_dir, self.dataset)


def parse_config_file(path) -> list:
    """key=value lines; '#' comments and blank lines ignored."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        pairs.append((key.strip(), raw.strip()))
    return pairs
