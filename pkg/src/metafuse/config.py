"""Run configuration: INI-style ``key = value`` sections with strict validation."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .metaengine import VARIANTS, TrainConfig
from .netcore import NetConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "runs/default"),
    },
    "data": {
        "n_patients": (int, 40),
        "n_test": (int, 10),
        "dims": (_ints, (24, 24, 24)),
        "num_modalities": (int, 4),
        "full_fraction": (float, 0.5),
    },
    "model": {
        "channels": (_ints, (4, 8, 8)),
        "bottleneck_channels": (int, 8),
        "kernel_size": (int, 3),
        "bias": (_bool, True),
        "disc_hidden_mult": (int, 4),
    },
    "train": {
        "variant": (str, "full"),
        "outer_lr": (float, 5e-4),
        "meta_batch_tasks": (int, 8),
        "per_task_batch": (int, 1),
        "inner_steps": (int, 1),
        "epochs": (int, 60),
        "alpha_init": (float, 0.01),
        "weight_decay": (float, 0.01),
        "optimizer": (str, "adamw"),
        "first_order": (_bool, False),
        "objective": (str, "joint"),
        "checkpoint_every": (int, 0),
        "lambda_seg": (float, 0.8),
        "lambda_adv": (float, 0.2),
        "disc_scale": (float, 0.5),
    },
    "eval": {
        "threshold": (float, 0.5),
        "hd95": (_bool, False),
    },
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def __getitem__(self, key: str):
        section, _, name = key.partition(".")
        return self.values[section][name]

    def set(self, key: str, value) -> "RunConfig":
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[section][name][0]
        new = {s: dict(v) for s, v in self.values.items()}
        new[section][name] = parser(value) if isinstance(value, str) else value
        cfg = RunConfig(new)
        cfg.validate()
        return cfg

    @property
    def seed(self) -> int:
        return self["run.seed"]

    def validate(self) -> None:
        d, t = self.values["data"], self.values["train"]
        if not 0 < d["full_fraction"] <= 1:
            raise ConfigError(f"data.full_fraction must be in (0, 1], got {d['full_fraction']}")
        if len(d["dims"]) != 3:
            raise ConfigError(f"data.dims needs 3 integers, got {d['dims']}")
        if d["num_modalities"] < 2:
            raise ConfigError("data.num_modalities must be >= 2")
        if t["variant"] not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {sorted(VARIANTS)}, got {t['variant']!r}")
        if t["meta_batch_tasks"] > 2 ** d["num_modalities"] - 2:
            raise ConfigError("train.meta_batch_tasks exceeds the number of partial-modality tasks")
        try:
            self.train_config()
            self.net_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def net_config(self) -> NetConfig:
        m = self.values["model"]
        return NetConfig(
            num_modalities=self["data.num_modalities"],
            channels=tuple(m["channels"]),
            bottleneck_channels=m["bottleneck_channels"],
            kernel_size=m["kernel_size"],
            bias=m["bias"],
            disc_hidden_mult=m["disc_hidden_mult"],
            use_discriminator=VARIANTS[self["train.variant"]][1],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            outer_lr=t["outer_lr"],
            meta_batch_tasks=t["meta_batch_tasks"],
            per_task_batch=t["per_task_batch"],
            inner_steps=t["inner_steps"],
            epochs=t["epochs"],
            seed=self.seed,
            alpha_init=t["alpha_init"],
            weight_decay=t["weight_decay"],
            optimizer=t["optimizer"],
            first_order=t["first_order"],
            objective=t["objective"],
            variant=t["variant"],
            checkpoint_every=t["checkpoint_every"],
            weights=LossWeights(t["lambda_seg"], t["lambda_adv"], t["disc_scale"]),
        )

    def dumps(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k} = {_fmt(self.values[section][k])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            try:
                cfg.values[section][key] = SCHEMA[section][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
