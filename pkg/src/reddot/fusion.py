"""Claim-side modality fusion: image, text, sum, difference and product tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError

# canonical order; ablations drop entries but never reorder the survivors
OPS = ("image", "text", "add", "sub", "mul")

_ALIASES = {
    "image_token": "image",
    "text_token": "text",
    "add": "add",
    "subtract": "sub",
    "multiply": "mul",
}


@dataclass(frozen=True)
class FusionConfig:
    ops: tuple[str, ...] = OPS

    def __post_init__(self) -> None:
        ops = tuple(_ALIASES.get(op, op) for op in self.ops)
        unknown = [op for op in ops if op not in OPS]
        if unknown:
            raise ConfigError(f"unknown fusion ops {unknown}; expected a subset of {OPS}")
        if len(set(ops)) != len(ops):
            raise ConfigError(f"repeated fusion op in {ops}")
        if "image" not in ops or "text" not in ops:
            raise ConfigError("fusion must keep both the image and the text token")
        if list(ops) != sorted(ops, key=OPS.index):
            raise ConfigError(f"fusion ops must follow the order {OPS}, got {ops}")
        object.__setattr__(self, "ops", ops)

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def parse(cls, spec: str | Iterable[str]) -> "FusionConfig":
        if isinstance(spec, str):
            spec = [s.strip() for s in spec.split(",") if s.strip()]
        return cls(tuple(spec))

    def without(self, op: str) -> "FusionConfig":
        op = _ALIASES.get(op, op)
        return FusionConfig(tuple(o for o in self.ops if o != op))


FULL = FusionConfig()
CONCAT_ONLY = FusionConfig(("image", "text"))

# column order of the fusion ablation table
ABLATIONS = {
    "concat": CONCAT_ONLY,
    "full": FULL,
    "no_sub": FULL.without("sub"),
    "no_add": FULL.without("add"),
    "no_mul": FULL.without("mul"),
}


def fuse(f_img: np.ndarray, f_txt: np.ndarray, config: FusionConfig = FULL) -> np.ndarray:
    """Return the claim token sequence, shape ``(..., len(config), dim)``.

    Leading axes are treated as a batch.
    """
    f_img = np.asarray(f_img)
    f_txt = np.asarray(f_txt)
    if f_img.shape != f_txt.shape:
        raise DataError(f"image/text feature shapes differ: {f_img.shape} vs {f_txt.shape}")
    tokens = {
        "image": lambda: f_img,
        "text": lambda: f_txt,
        "add": lambda: f_img + f_txt,
        "sub": lambda: f_img - f_txt,
        "mul": lambda: f_img * f_txt,
    }
    return np.stack([tokens[op]() for op in config.ops], axis=-2)
