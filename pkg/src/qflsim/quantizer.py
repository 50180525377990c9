"""Stochastic fixed-point quantization of weight vectors.

An n-bit signed fixed-point grid with one integer bit covers [-1, 1) in
steps of 1/G, G = 2**(n-1).  Quantization is clip -> scale by G ->
stochastic round -> (later) scale down by G.  Rounding is unbiased:
the expected dequantized value equals the clipped input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BITS = 32


@dataclass(frozen=True)
class QuantConfig:
    """Bit-width of the fixed-point format; gain is 2**(bits-1)."""

    bits: int

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or isinstance(self.bits, bool):
            raise ValueError(f"bits must be an integer, got {self.bits!r}")
        if not 2 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [2, {MAX_BITS}], got {self.bits}")

    @property
    def gain(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def step(self) -> float:
        return 1.0 / self.gain

    @property
    def clip_low(self) -> float:
        return -1.0

    @property
    def clip_high(self) -> float:
        # level +G is not representable in the signed grid, so the top of
        # the range is (G-1)/G rather than 1.0
        return 1.0 - self.step


@dataclass(frozen=True)
class QuantizedVector:
    """Signed grid indices in [-G, G-1] plus the format that produced them."""

    levels: np.ndarray
    config: QuantConfig

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.int64)
        object.__setattr__(self, "levels", levels)
        g = self.config.gain
        if levels.size and (levels.min() < -g or levels.max() > g - 1):
            raise ValueError(f"levels outside signed range [-{g}, {g - 1}]")


def clip(v, cfg: QuantConfig) -> np.ndarray:
    """Saturate components to the representable range [-1, 1 - 1/G]."""
    v = np.asarray(v, dtype=np.float64)
    if np.isnan(v).any():
        raise ValueError("NaN is not clippable")
    return np.clip(v, cfg.clip_low, cfg.clip_high)


def stochastic_round(x, rng: np.random.Generator):
    """Round to floor(x) w.p. 1-(x-floor(x)), else floor(x)+1; E[result] = x.

    Accepts a scalar or an array; the floor convention applies for
    negative inputs too (floor(-0.6) = -1), which keeps the rule unbiased
    across signs.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("stochastic_round requires finite input")
    low = np.floor(arr)
    frac = arr - low
    rounded = (low + (rng.random(arr.shape) < frac)).astype(np.int64)
    if np.isscalar(x) or arr.ndim == 0:
        return int(rounded)
    return rounded


def quantize(v, cfg: QuantConfig, rng: np.random.Generator) -> QuantizedVector:
    """Clip, scale by the gain, and stochastically round to grid levels."""
    scaled = clip(v, cfg) * cfg.gain  # gain is a power of two: exact scaling
    levels = stochastic_round(scaled, rng)
    return QuantizedVector(levels=np.atleast_1d(levels), config=cfg)


def dequantize(q: QuantizedVector) -> np.ndarray:
    """Map grid levels back to reals: levels / G."""
    return q.levels / float(q.config.gain)
