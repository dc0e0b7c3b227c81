"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment. Every key is a field of
:class:`TrainConfig`; unknown keys are rejected. Values are parsed according to
the field's type (booleans accept true/false/1/0/yes/no, tuples are comma lists).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

ENV_SEED = "COARSE3D_SEED"


@dataclass
class TrainConfig:
    # data
    data_dir: str = ""  # empty: generate synthetic scenes in memory
    scenes: int = 64
    val_fraction: float = 0.25
    data_seed: int = 0
    n_classes: int = 5
    beams: int = 64
    columns: int = 512
    ground_extent: float = 12.0
    object_count: tuple = (10, 16)
    object_size: tuple = (1.5, 3.0)
    points_per_class: tuple = (1, 1_000_000)
    noise_sigma: float = 0.02
    intensity_sigma: float = 0.12
    # projection
    proj_height: int = 32
    proj_width: int = 256
    fov_up: float = 3.0
    fov_down: float = -25.0
    # weak labels
    annotation_ratio: float = 0.001
    voxel_size: float = 0.06
    propagate: bool = True
    focal_eps: float = 1e-6
    # model
    backbone: str = "toy"
    widths: tuple = (16, 32, 64)
    embed_dim: int = 256
    head_slope: float = 0.1
    head_bias: bool = True
    head_norm: bool = False
    # prototype bank
    n_prototypes: int = 20
    momentum: float = 0.999
    sinkhorn_iters: int = 3
    sinkhorn_epsilon: float = 0.05
    gumbel_tau: float = 0.5
    proto_init: str = "mean"
    soft_assign: bool = False
    # anchors
    anchor_strategy: str = "entropy"
    # losses
    lambda_foc: float = 1.0
    lambda_lov: float = 1.0
    lambda_nce: float = 0.1
    temperature: float = 0.1
    gamma: float = 2.0
    # optimisation
    epochs: int = 100
    warmup_epochs: int = 5
    learning_rate: float = 0.01
    weight_decay: float = 0.01
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    # evaluation
    eval_every: int = 1
    knn_eval: bool = False
    knn_k: int = 5
    knn_window: int = 5
    # diagnostics
    audit_bank: bool = False

    def validate(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs and self.epochs > 0:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not 0 < self.annotation_ratio <= 1:
            raise ValueError("annotation_ratio must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.anchor_strategy not in ("entropy", "softmax_prob", "all"):
            raise ValueError(f"unknown anchor_strategy {self.anchor_strategy!r}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.knn_window % 2 == 0 or self.knn_k < 1:
            raise ValueError("knn_window must be odd and knn_k >= 1")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(TrainConfig)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(_parse_scalar(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ValueError(f"bad value for {key} ({kind}): {text!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc.args[0]}") from None
    return out


def load_config(path=None, overrides=(), **extra) -> TrainConfig:
    """Config file, then ``extra`` values, then ``key=value`` overrides (last wins).

    When neither the file nor the overrides set ``seed``, ``$COARSE3D_SEED`` is used
    if present.
    """
    values = {}
    if path is not None:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            values.update(parse_text(fh.read(), source=str(path)))
    for key, value in extra.items():
        if key not in FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            values[key.strip()] = parse_value(key.strip(), value)
        except KeyError as exc:
            raise ValueError(exc.args[0]) from None
    if "seed" not in values and os.environ.get(ENV_SEED, "").strip():
        values["seed"] = int(os.environ[ENV_SEED])
    return dataclasses.replace(TrainConfig(), **values).validate()
