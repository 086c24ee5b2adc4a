"""Contiguous mask regions shared by training and editing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length

    def check(self, T: int) -> "MaskSpec":
        if self.start < 0 or self.length < 1 or self.end > T:
            raise MaskError(f"mask ({self.start}, {self.length}) out of range for T={T}")
        return self


def mask_length(T: int, ratio: float) -> int:
    # round half up; Python's round() is half-even
    return max(1, int(np.floor(ratio * T + 0.5)))


def sample_mask(T: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if T < 2:
        raise MaskError("need at least 2 frames to sample a mask")
    if not 0.0 < ratio < 1.0:
        raise MaskError("mask ratio must be in (0, 1)")
    length = mask_length(T, ratio)
    start = int(rng.integers(0, T - length + 1))
    return MaskSpec(start, length)
