"""Hyperparameters, video records and config file handling."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mist.errors import ConfigError, ValidationError

# JSON key -> attribute name, for keys that are not valid Python identifiers.
_KEY_TO_ATTR = {"lambda": "lambda_"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}


@dataclass(frozen=True)
class HyperParams:
    """All knobs for both training stages and evaluation.

    Stage-I (generator) fields carry a ``gen_`` prefix, Stage-II (encoder
    fine-tuning) fields a ``ft_`` prefix. ``lambda_`` is spelled ``lambda``
    in config files.
    """

    L: int = 32
    T: int = 3
    epsilon: float = 1.0
    lambda_: float = 0.01
    k: int = 5
    K: int = 8
    dropout_p: float = 0.6
    gen_lr: float = 0.01
    gen_batch_abnormal: int = 40
    gen_batch_normal: int = 40
    gen_iters: int = 200
    ft_lr: float = 1e-4
    ft_weight_decay: float = 5e-4
    ft_epochs: int = 300
    ft_warmup_epochs: int = 5
    ft_videos_per_class_per_batch: int = 16
    ft_clips_per_video: int = 3
    w0: float = 1.2
    w1: float = 0.8
    frames_per_clip: int = 16
    seed: int = 0
    far_threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive_ints = [
            "L", "T", "K", "gen_batch_abnormal", "gen_batch_normal", "gen_iters",
            "ft_epochs", "ft_videos_per_class_per_batch", "ft_clips_per_video",
            "frames_per_clip",
        ]
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ValidationError(f"must be >= 1, got {getattr(self, name)}", _key(name))
        for name in ("k", "ft_warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValidationError(f"must be >= 0, got {getattr(self, name)}", _key(name))
        for name in ("epsilon", "gen_lr", "ft_lr", "w0", "w1"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"must be > 0, got {value}", _key(name))
        for name in ("lambda_", "ft_weight_decay"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"must be >= 0, got {value}", _key(name))
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"must lie in [0, 1), got {self.dropout_p}", "dropout_p")
        if not 0.0 < self.far_threshold < 1.0:
            raise ValidationError(f"must lie in (0, 1), got {self.far_threshold}", "far_threshold")

    def to_dict(self) -> dict[str, Any]:
        return {_key(f.name): getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> HyperParams:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = _KEY_TO_ATTR.get(key, key)
            if attr not in types:
                raise ConfigError("unknown key", key)
            kwargs[attr] = _coerce(key, value, types[attr])
        return cls(**kwargs)

    def replace(self, **changes) -> HyperParams:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: dict[str, Any]) -> HyperParams:
        """Return a copy with config-file style ``{key: value}`` overrides applied."""
        merged = self.to_dict()
        merged.update(overrides)
        return HyperParams.from_dict(merged)


def _key(attr: str) -> str:
    return _ATTR_TO_KEY.get(attr, attr)


def _coerce(key: str, value: Any, type_name: str) -> Any:
    # bool is an int subclass; never accept it for numeric fields
    if isinstance(value, bool):
        raise ConfigError(f"expected {type_name}, got bool", key)
    if type_name == "int":
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"expected int, got {value!r}", key)
    if type_name == "float":
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"expected float, got {value!r}", key)
    raise ConfigError(f"unsupported field type {type_name}", key)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a ``KEY=VALUE`` command-line override; VALUE is read as JSON."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"value {raw!r} is not valid JSON ({exc.msg})", key) from None
    return key.strip(), value


def load_config(path: str | Path | None = None) -> HyperParams:
    """Load a JSON config; missing keys take their defaults. ``None`` gives all defaults."""
    if path is None:
        return HyperParams()
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return HyperParams()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object")
    return HyperParams.from_dict(data)


def save_config(hp: HyperParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(hp.to_dict(), indent=2) + "\n", encoding="utf-8")


SPLITS = ("train", "test")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    label: int
    split: str
    num_clips: int
    frames_per_clip: int
    feature_path: Path
    clip_path: Path | None = None
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.video_id:
            raise ValidationError("empty video_id", "video_id")
        if isinstance(self.label, bool) or self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}", "label")
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}", "split")
        if self.num_clips < 1:
            raise ValidationError(f"num_clips must be >= 1, got {self.num_clips}", "num_clips")
        if self.frames_per_clip < 1:
            raise ValidationError(
                f"frames_per_clip must be >= 1, got {self.frames_per_clip}", "frames_per_clip"
            )

    @property
    def is_abnormal(self) -> bool:
        return self.label == 1
