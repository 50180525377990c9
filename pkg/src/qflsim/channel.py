"""Finite-blocklength achievable rate over a quasi-static Rayleigh channel.

The normal approximation r = C(snr) - sqrt(V(snr)/M) * Qinv(q) ties the
rate to a target decoding error probability q at blocklength M.  The Q
function is the standard normal tail; its inverse is a rational
approximation polished by Newton steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG2E = math.log2(math.e)

# Acklam's rational approximation to the inverse normal CDF
# (relative error < 1.2e-9 before refinement).
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


@dataclass(frozen=True)
class ChannelParams:
    """Uplink radio parameters shared by rate and timing computations."""

    bandwidth_hz: float = 10e6
    noise_psd_dbm_per_hz: float = -100.0
    blocklength: int = 1000
    pathloss: float = 1.0

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be positive")
        if self.blocklength < 1:
            raise ValueError("blocklength must be >= 1")
        if self.pathloss <= 0:
            raise ValueError("pathloss must be positive")

    @property
    def noise_psd_w_per_hz(self) -> float:
        return dbm_to_watts(self.noise_psd_dbm_per_hz)


@dataclass(frozen=True)
class RateQuery:
    """One rate evaluation: transmit power, error target, squared fading gain."""

    tx_power_w: float
    error_prob: float
    gain_sq: float = 1.0

    def __post_init__(self):
        if self.tx_power_w <= 0:
            raise ValueError("tx_power_w must be positive")
        if not 0.0 < self.error_prob < 1.0:
            raise ValueError("error_prob must lie in (0, 1)")
        if self.gain_sq < 0:
            raise ValueError("gain_sq must be non-negative")


def dbm_to_watts(dbm: float) -> float:
    """dBm -> W (also dBm/Hz -> W/Hz)."""
    return 10.0 ** ((dbm - 30.0) / 10.0)


def q_function(x: float) -> float:
    """Standard normal tail probability Q(x) = 0.5*erfc(x/sqrt(2))."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _norm_ppf(p: float) -> float:
    if p < _P_LOW:
        z = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * z + _C[1]) * z + _C[2]) * z + _C[3]) * z + _C[4]) * z + _C[5]) / \
            ((((_D[0] * z + _D[1]) * z + _D[2]) * z + _D[3]) * z + 1.0)
    if p > 1.0 - _P_LOW:
        z = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((_C[0] * z + _C[1]) * z + _C[2]) * z + _C[3]) * z + _C[4]) * z + _C[5]) / \
            ((((_D[0] * z + _D[1]) * z + _D[2]) * z + _D[3]) * z + 1.0)
    z = p - 0.5
    r = z * z
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * z / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def q_inverse(p: float) -> float:
    """Inverse of q_function on (0, 1); Newton-refined to ~1e-12."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"q_inverse requires 0 < p < 1, got {p}")
    x = -_norm_ppf(p)
    for _ in range(2):
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf < 1e-300:
            break
        x += (q_function(x) - p) / pdf
    return x


def capacity(snr: float) -> float:
    """Shannon capacity log2(1 + snr) in bits per channel use."""
    if snr < 0:
        raise ValueError("snr must be non-negative")
    return math.log2(1.0 + snr)


def dispersion(snr: float) -> float:
    """Channel dispersion (1 - (1+snr)^-2) * (log2 e)^2."""
    if snr < 0:
        raise ValueError("snr must be non-negative")
    return (1.0 - (1.0 + snr) ** -2) * LOG2E ** 2


def achievable_rate(params: ChannelParams, query: RateQuery) -> float:
    """Normal-approximation rate in bits per channel use, floored at zero.

    SNR is tx power over total in-band noise (noise PSD times bandwidth),
    scaled by the squared fading gain and the pathloss factor.  A negative
    approximation value means the operating point cannot support the error
    target at this blocklength; callers treat the floored 0 as
    untransmittable.
    """
    rho = query.tx_power_w / (params.noise_psd_w_per_hz * params.bandwidth_hz)
    snr = rho * query.gain_sq * params.pathloss
    raw = capacity(snr) - math.sqrt(dispersion(snr) / params.blocklength) \
        * q_inverse(query.error_prob)
    return max(0.0, raw)


def sample_rayleigh_gain(rng: np.random.Generator) -> float:
    """Squared magnitude of unit-variance Rayleigh fading: Exp(1)."""
    return float(rng.standard_exponential())
