"""Closed-form convergence machinery for drop-aware quantized FedAvg.

For an L-smooth, mu-strongly convex global loss trained with diminishing
steps eta_t = (2/mu)/(t + shift) and per-round update drop probability q,
the expected squared distance to the optimum obeys

    gap_{t+1} <= (1 - eta_t * mu * (1-q)) * gap_t + eta_t^2 * E / (1-q)

where E collects gradient noise, heterogeneity, multi-step drift, partial
participation, and quantization error.  The gap then stays below
v / (t + shift) provided

    v >= 4E / (mu^2 * (1-q) * (1-2q))    and    v >= (shift+1) * gap_1,

with shift + 1 >= max(I, 8L/((1-q)*mu), 2*(1-q)); the last term caps the
first effective step at 1/(mu*(1-q)).  The 1/(1-2q) factor is forced by
the degraded contraction: with steps 2/(mu*(t+shift)) the per-step decay
is 2*(1-q)/(t+shift), so the noise recursion equilibrates at
[4E/(mu^2*(1-q))] / (2*(1-q) - 1) over (t + shift).  No finite v works
for q >= 1/2 at this step-size choice, so the constants degenerate to
infinity there.

Rounds to reach a target gap eps follow from strong convexity:
(L/2) * v / (shift + T) <= eps at T = L*v/(2*eps) - shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True)
class ConvergenceParams:
    """Inputs to the variance bound, envelope constants, and round count."""

    smoothness: float = 0.097
    strong_convexity: float = 1.0
    grad_variance: Union[float, Sequence[float]] = 0.001  # scalar applies to all
    heterogeneity: float = 0.6
    grad_norm_bound: float = 0.25
    local_iters: int = 3
    quant_noise_scale: float = 0.01
    initial_gap: float = 0.01
    model_dim: int = 421_642
    bits: int = 8
    num_clients: int = 100
    selected_k: int = 10
    drop_prob: float = 0.01
    target_gap: float = 0.1

    def __post_init__(self):
        if self.smoothness <= 0 or self.strong_convexity <= 0:
            raise ValueError("smoothness and strong_convexity must be positive")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")
        if self.target_gap <= 0:
            raise ValueError("target_gap must be positive")
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if not 2 <= self.selected_k <= self.num_clients:
            raise ValueError("selected_k must lie in [2, num_clients]")
        if self.bits < 2:
            raise ValueError("bits must be >= 2")

    def grad_variances(self) -> np.ndarray:
        """Per-device gradient variance vector (scalar broadcast to all)."""
        var = np.atleast_1d(np.asarray(self.grad_variance, dtype=np.float64))
        if var.size == 1:
            var = np.full(self.num_clients, var[0])
        if var.size != self.num_clients:
            raise ValueError("grad_variance must be scalar or one per client")
        return var


def variance_bound(p: ConvergenceParams) -> float:
    """Aggregate variance bound E entering the gap recursion.

    Sums gradient noise, 6*L*heterogeneity, the multi-local-step and
    partial-participation drift terms, and the stochastic-quantization
    term 4*d*I^2*m^2 / (K*(2^bits - 1)^2), which vanishes as bits grow.
    """
    n, k, iters = p.num_clients, p.selected_k, p.local_iters
    noise = float(p.grad_variances().sum()) / n ** 2
    hetero = 6.0 * p.smoothness * p.heterogeneity
    drift = (8.0 * (iters - 1) ** 2
             + 4.0 * (n - k) * iters ** 2 / (k * (n - 1))) * p.grad_norm_bound ** 2
    quant = (4.0 * p.model_dim * iters ** 2 * p.quant_noise_scale ** 2
             / (k * (2.0 ** p.bits - 1.0) ** 2))
    return noise + hetero + drift + quant


def envelope_constants(p: ConvergenceParams) -> tuple[float, float]:
    """(v, shift) such that the expected gap stays below v/(t + shift).

    Returns v = inf for drop_prob >= 1/2, where the 1/t schedule has no
    finite envelope.
    """
    q, mu = p.drop_prob, p.strong_convexity
    shift = max(p.local_iters,
                8.0 * p.smoothness / ((1.0 - q) * mu),
                2.0 * (1.0 - q)) - 1.0
    if q >= 0.5:
        return math.inf, shift
    v = max(4.0 * variance_bound(p) / (mu ** 2 * (1.0 - q) * (1.0 - 2.0 * q)),
            (shift + 1.0) * p.initial_gap)
    return v, shift


def rounds_to_target_raw(p: ConvergenceParams) -> float:
    """Continuous round count L*v/(2*eps) - shift (may be fractional or inf)."""
    v, shift = envelope_constants(p)
    if math.isinf(v):
        return math.inf
    return p.smoothness * v / (2.0 * p.target_gap) - shift


def rounds_to_target(p: ConvergenceParams) -> int:
    """Integer round count for simulation: ceil of the raw value, at least 1."""
    raw = rounds_to_target_raw(p)
    if math.isinf(raw):
        raise ValueError("no finite round count for drop_prob >= 0.5")
    return max(1, math.ceil(raw))


def recursion_trajectory(p: ConvergenceParams, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the gap recursion for t = 1..horizon.

    Returns (gaps, envelope) where gaps[t-1] is the recursion value at
    round t (gaps[0] = initial_gap) and envelope[t-1] = v/(t + shift).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    v, shift = envelope_constants(p)
    e_bound = variance_bound(p)
    q, mu = p.drop_prob, p.strong_convexity
    beta = 2.0 / mu
    gaps = np.empty(horizon)
    gap = p.initial_gap
    for t in range(1, horizon + 1):
        gaps[t - 1] = gap
        eta = beta / (t + shift)
        gap = (1.0 - eta * mu * (1.0 - q)) * gap + eta ** 2 * e_bound / (1.0 - q)
    envelope = v / (np.arange(1, horizon + 1) + shift)
    return gaps, envelope


def envelope_holds(p: ConvergenceParams, horizon: int) -> bool:
    """True iff the iterated gap stays below v/(t + shift) up to the horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    v, shift = envelope_constants(p)
    if math.isinf(v):
        return True  # vacuous: no finite envelope is claimed
    e_bound = variance_bound(p)
    q, mu = p.drop_prob, p.strong_convexity
    beta = 2.0 / mu
    gap = p.initial_gap
    for t in range(1, horizon + 1):
        if gap > v / (t + shift):
            return False
        eta = beta / (t + shift)
        gap = (1.0 - eta * mu * (1.0 - q)) * gap + eta ** 2 * e_bound / (1.0 - q)
    return True
