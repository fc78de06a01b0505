"""Tunable hyperparameters: the ordered value lists the agent steps through."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .data import PreprocessConfig

SEARCH_SPACE: dict[str, tuple] = {
    "learning_rate": (0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5),
    "warmup_ratio": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3),
    "momentum": (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.98, 0.99),
    "nesterov": (False, True),
    "router_lr_multiplier": (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0),
    "cropped_area_range_min": (0.05, 0.5, 0.95, 1.0),
    "cropped_aspect_ratio_range_min": (0.5, 0.75, 1.0),
    "flip_left_right": (False, True),
    "brightness_delta": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2),
    "contrast_delta": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2),
    "saturation_delta": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2),
    "hue_delta": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2),
    "image_quality_delta": (0.0, 0.01, 0.02, 0.05, 0.1, 0.2),
}

PREPROCESS_FIELDS = tuple(f.name for f in fields(PreprocessConfig))


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.02
    warmup_ratio: float = 0.02
    momentum: float = 0.8
    nesterov: bool = True
    router_lr_multiplier: float = 0.05
    cropped_area_range_min: float = 1.0
    cropped_aspect_ratio_range_min: float = 1.0
    flip_left_right: bool = False
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    saturation_delta: float = 0.0
    hue_delta: float = 0.0
    image_quality_delta: float = 0.0
    # desk-scale budget, not part of the search space
    train_steps: int = 2000
    batch_size: int = 32

    def __post_init__(self):
        for name, values in SEARCH_SPACE.items():
            if getattr(self, name) not in values:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {values}")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ValueError("train_steps must be >= 0 and batch_size >= 1")

    @property
    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(**{k: getattr(self, k) for k in PREPROCESS_FIELDS})

    def genome_key(self) -> tuple:
        return tuple(getattr(self, k) for k in SEARCH_SPACE)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


def neighbors(name: str, value) -> list:
    """Adjacent values of ``value`` in the ordered list for ``name``."""
    values = SEARCH_SPACE[name]
    i = values.index(value)
    return [values[j] for j in (i - 1, i + 1) if 0 <= j < len(values)]
