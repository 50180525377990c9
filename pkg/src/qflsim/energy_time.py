"""Per-device energy and time models for one training round.

Local training energy scales with the bits processed per iteration
(model size times bit-width); uplink energy is transmit power times the
time to push the quantized update at the achievable rate.  Population
expectations follow from K-of-N uniform sampling per round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class ZeroRateError(ValueError):
    """Raised when a transmission is requested at zero rate."""


@dataclass(frozen=True)
class DeviceProfile:
    """Compute and model-size constants of one device."""

    energy_coeff: float = 1e-27      # J per CPU cycle per Hz^2
    cycles_per_bit: float = 40.0
    clock_hz: float = 1e9
    compute_flops: float = 3.7e12
    macs_per_iteration: float = 4_241_152.0
    model_params: int = 421_642      # trainable scalars held locally
    uplink_params: int = 421_642     # scalars sent per update
    dataset_size: int = 600

    def __post_init__(self):
        for name in ("energy_coeff", "cycles_per_bit", "clock_hz", "compute_flops",
                     "macs_per_iteration", "model_params", "uplink_params",
                     "dataset_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy and time components of one device-round."""

    local_j: float
    uplink_j: float
    tx_time_s: float
    comp_time_s: float

    def __post_init__(self):
        for name in ("local_j", "uplink_j", "tx_time_s", "comp_time_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total_j(self) -> float:
        return self.local_j + self.uplink_j


def local_energy(profile: DeviceProfile, bits: int, local_iters: int) -> float:
    """Joules spent on local training: coeff * cycles * f^2 * (d*bits) * iters."""
    if bits < 2:
        raise ValueError("bits must be >= 2")
    if local_iters < 1:
        raise ValueError("local_iters must be >= 1")
    bits_processed = profile.model_params * bits
    return (profile.energy_coeff * profile.cycles_per_bit * profile.clock_hz ** 2
            * bits_processed * local_iters)


def uplink_energy(profile: DeviceProfile, bits: int, rate_bpcu: float,
                  bandwidth_hz: float, tx_power_w: float) -> tuple[float, float]:
    """(joules, seconds) to send the quantized update at the given rate."""
    if rate_bpcu <= 0.0:
        raise ZeroRateError("cannot transmit at zero rate")
    tx_time = profile.uplink_params * bits / (bandwidth_hz * rate_bpcu)
    return tx_time * tx_power_w, tx_time


def comp_time(profile: DeviceProfile, local_iters: int) -> float:
    """Seconds of local computation: MACs per iteration over FLOP capacity."""
    return profile.macs_per_iteration / profile.compute_flops * local_iters


def device_round_breakdown(profile: DeviceProfile, bits: int, rate_bpcu: float,
                           bandwidth_hz: float, tx_power_w: float,
                           local_iters: int) -> EnergyBreakdown:
    """All energy/time components of one device-round at a given rate."""
    e_up, t_tx = uplink_energy(profile, bits, rate_bpcu, bandwidth_hz, tx_power_w)
    return EnergyBreakdown(local_j=local_energy(profile, bits, local_iters),
                           uplink_j=e_up, tx_time_s=t_tx,
                           comp_time_s=comp_time(profile, local_iters))


def round_time(profiles: Sequence[DeviceProfile], bits: int,
               rates: Sequence[float], selected_k: int, local_iters: int,
               bandwidth_hz: float) -> float:
    """Expected per-round time (K/N) * sum_k (uplink + compute time)."""
    n_devices = len(profiles)
    if not 1 <= selected_k <= n_devices:
        raise ValueError("selected_k must lie in [1, len(profiles)]")
    if len(rates) != n_devices:
        raise ValueError("one rate per device required")
    total = 0.0
    for profile, rate in zip(profiles, rates):
        if rate <= 0.0:
            raise ZeroRateError("round_time requires positive rates")
        total += (profile.uplink_params * bits / (bandwidth_hz * rate)
                  + comp_time(profile, local_iters))
    return selected_k / n_devices * total


def expected_total_energy(profiles: Sequence[DeviceProfile], bits: int,
                          rates: Sequence[float], selected_k: int, rounds: float,
                          local_iters: int, bandwidth_hz: float,
                          tx_power_w: float) -> float:
    """(K*T/N) * sum over devices of per-round local plus uplink energy."""
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    n_devices = len(profiles)
    if len(rates) != n_devices:
        raise ValueError("one rate per device required")
    total = 0.0
    for profile, rate in zip(profiles, rates):
        e_up, _ = uplink_energy(profile, bits, rate, bandwidth_hz, tx_power_w)
        total += local_energy(profile, bits, local_iters) + e_up
    return selected_k * rounds / n_devices * total
