"""CMA-ES minimizer and the per-round energy objective it drives.

The optimizer is a standard (mu_w, lambda) covariance matrix adaptation
evolution strategy with rank-one and rank-mu updates and cumulative
step-size adaptation, run in box-normalized coordinates.  Out-of-box
samples are evaluated at their clamped projection with a quadratic repair
term added to the selection fitness.

The energy objective composes the analytic models: achievable rate at
nominal unit fading, per-device energies, the continuous round count from
the convergence envelope, and a quadratic penalty on the per-round time
budget.  It is deterministic, so repeated runs with one seed are
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .channel import ChannelParams, RateQuery, achievable_rate
from .convergence import ConvergenceParams, rounds_to_target_raw
from .energy_time import DeviceProfile, local_energy, round_time, uplink_energy

# selection fitness handed to CMA-ES for points outside the analytic domain
# (zero rate, or drop rates where no finite round count exists)
INFEASIBLE_PENALTY = 1e12

_REPAIR_COEFF = 1e6  # weight of the quadratic out-of-box repair term


@dataclass(frozen=True)
class CmaConfig:
    """Strategy settings; population defaults to 4 + floor(3*ln(dim))."""

    bounds: tuple[tuple[float, float], ...]
    population: int | None = None
    sigma0: float = 0.3  # fraction of the (normalized) box width
    max_generations: int = 300
    tol_fun: float = 1e-11
    seed: int = 0
    debug_checks: bool = False

    def __post_init__(self):
        if not self.bounds:
            raise ValueError("at least one bounded dimension required")
        for low, high in self.bounds:
            if not low < high:
                raise ValueError(f"invalid bound [{low}, {high}]")
        if self.population is not None and self.population < 4:
            raise ValueError("population must be >= 4")
        if not 0.0 < self.sigma0 <= 1.0:
            raise ValueError("sigma0 must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return len(self.bounds)


@dataclass
class TraceRow:
    generation: int
    mean: tuple[float, ...]   # raw coordinates, possibly outside the box
    sigma: float
    best_gen_value: float
    best_value: float


@dataclass
class CmaResult:
    x: np.ndarray
    fun: float
    trace: list[TraceRow]
    converged: bool           # False means the generation budget ran out
    generations: int


def cma_minimize(f: Callable[[np.ndarray], float], x0: Sequence[float],
                 cfg: CmaConfig) -> CmaResult:
    """Minimize f over the configured box starting from x0.

    f receives points inside the box (raw coordinates).  The result holds
    the best evaluated point, its objective value, and a per-generation
    trace; `converged` is False when tol_fun stagnation was not reached
    within max_generations.
    """
    dim = cfg.dim
    lows = np.array([b[0] for b in cfg.bounds])
    spans = np.array([b[1] - b[0] for b in cfg.bounds])
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (dim,):
        raise ValueError(f"x0 must have shape ({dim},)")
    if ((x0 < lows) | (x0 > lows + spans)).any():
        raise ValueError("x0 must lie inside the bounds")

    lam = cfg.population or 4 + int(3 * math.log(dim))
    mu = lam // 2
    raw_w = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw_w / raw_w.sum()
    mu_eff = 1.0 / float(weights @ weights)

    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1,
               2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim ** 2))

    rng = np.random.default_rng(cfg.seed)
    mean = (x0 - lows) / spans          # work in [0, 1]^dim
    sigma = cfg.sigma0
    cov = np.eye(dim)
    p_sigma = np.zeros(dim)
    p_c = np.zeros(dim)

    best_x = x0.copy()
    best_f = f(best_x)
    trace: list[TraceRow] = []
    history: list[float] = [best_f]
    stall_window = 10 + math.ceil(30.0 * dim / lam)
    converged = False
    gen = 0

    for gen in range(1, cfg.max_generations + 1):
        eigvals, eigvecs = np.linalg.eigh(cov)
        max_eig = float(eigvals.max())
        if eigvals.min() <= max_eig * 1e-14:
            cov = cov + (max_eig * 1e-14 - eigvals.min()) * np.eye(dim)
            eigvals, eigvecs = np.linalg.eigh(cov)
        if cfg.debug_checks:
            assert np.allclose(cov, cov.T), "covariance lost symmetry"
            assert eigvals.min() > 0, "covariance lost positive definiteness"
        sqrt_d = np.sqrt(eigvals)

        zs = rng.standard_normal((lam, dim))
        ys = zs @ (eigvecs * sqrt_d).T           # y = B*D*z
        xs = mean + sigma * ys
        clamped = np.clip(xs, 0.0, 1.0)
        fitness = np.empty(lam)
        raw_f = np.empty(lam)
        for i in range(lam):                      # fixed order keeps runs bit-identical
            raw_f[i] = f(lows + clamped[i] * spans)
            repair = float(((xs[i] - clamped[i]) ** 2).sum())
            fitness[i] = raw_f[i] + _REPAIR_COEFF * repair

        order = np.argsort(fitness, kind="stable")
        gen_best = int(order[0])
        if raw_f[gen_best] < best_f:
            best_f = float(raw_f[gen_best])
            best_x = lows + clamped[gen_best] * spans

        sel = order[:mu]
        y_w = weights @ ys[sel]
        z_w = weights @ zs[sel]
        mean = mean + sigma * y_w

        p_sigma = ((1.0 - c_sigma) * p_sigma
                   + math.sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * (eigvecs @ z_w))
        norm_ps = float(np.linalg.norm(p_sigma))
        h_sigma = (norm_ps / math.sqrt(1.0 - (1.0 - c_sigma) ** (2 * gen))
                   < (1.4 + 2.0 / (dim + 1.0)) * chi_n)
        p_c = ((1.0 - c_c) * p_c
               + (math.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w if h_sigma else 0.0))

        rank_mu = (ys[sel].T * weights) @ ys[sel]
        decay = 1.0 - c_1 - c_mu + (0.0 if h_sigma else c_1 * c_c * (2.0 - c_c))
        cov = decay * cov + c_1 * np.outer(p_c, p_c) + c_mu * rank_mu
        cov = 0.5 * (cov + cov.T)
        sigma *= math.exp(min(1.0, c_sigma / d_sigma * (norm_ps / chi_n - 1.0)))

        trace.append(TraceRow(generation=gen,
                              mean=tuple(lows + mean * spans),
                              sigma=sigma,
                              best_gen_value=float(raw_f[gen_best]),
                              best_value=best_f))
        history.append(float(raw_f[gen_best]))
        if len(history) > stall_window:
            recent = history[-stall_window:]
            if max(recent) - min(recent) < cfg.tol_fun:
                converged = True
                break

    return CmaResult(x=best_x, fun=best_f, trace=trace,
                     converged=converged, generations=gen)


@dataclass(frozen=True)
class ObjectiveValue:
    raw_energy_j: float
    tau_pr_s: float
    penalized: float


@dataclass(frozen=True)
class EnergyObjective:
    """Deterministic fleet energy-to-convergence as a function of (P_tx, q)."""

    conv: ConvergenceParams = field(default_factory=ConvergenceParams)
    profiles: tuple[DeviceProfile, ...] = ()
    channel: ChannelParams = field(default_factory=ChannelParams)
    bits: int = 8
    tau_limit_s: float = 1.0
    penalty_coeff: float = 1e6

    def __post_init__(self):
        if self.tau_limit_s <= 0:
            raise ValueError("tau_limit_s must be positive")
        profiles = self.profiles or tuple(DeviceProfile()
                                          for _ in range(self.conv.num_clients))
        if len(profiles) != self.conv.num_clients:
            raise ValueError("need one device profile per client")
        object.__setattr__(self, "profiles", tuple(profiles))

    def __call__(self, x) -> float:
        return objective_value(self, float(x[0]), float(x[1])).penalized


def objective_value(obj: EnergyObjective, tx_power_w: float,
                    drop_q: float) -> ObjectiveValue:
    """Evaluate the analytic objective at one (transmit power, error target).

    Rates use nominal unit fading so the value is noiseless.  Points with
    zero achievable rate or no finite round count map to a large finite
    penalty rather than an exception.
    """
    rate = achievable_rate(obj.channel,
                           RateQuery(tx_power_w=tx_power_w, error_prob=drop_q))
    if rate <= 0.0:
        return ObjectiveValue(math.inf, math.inf, INFEASIBLE_PENALTY)

    n_dev = len(obj.profiles)
    rates = [rate] * n_dev
    tau_pr = round_time(obj.profiles, obj.bits, rates, obj.conv.selected_k,
                        obj.conv.local_iters, obj.channel.bandwidth_hz)

    conv = replace(obj.conv, drop_prob=drop_q, bits=obj.bits)
    rounds_raw = rounds_to_target_raw(conv)
    if math.isinf(rounds_raw):
        return ObjectiveValue(math.inf, tau_pr, INFEASIBLE_PENALTY)

    raw = per_round_fleet_energy(obj, rate, tx_power_w) * rounds_raw
    penalized = raw + obj.penalty_coeff * max(0.0, tau_pr - obj.tau_limit_s) ** 2
    return ObjectiveValue(raw, tau_pr, penalized)


def per_round_fleet_energy(obj: EnergyObjective, rate: float,
                           tx_power_w: float) -> float:
    """Expected fleet energy per round, (K/N) * sum_k (local + uplink)."""
    fleet = 0.0
    for profile in obj.profiles:
        e_up, _ = uplink_energy(profile, obj.bits, rate,
                                obj.channel.bandwidth_hz, tx_power_w)
        fleet += local_energy(profile, obj.bits, obj.conv.local_iters) + e_up
    return obj.conv.selected_k / len(obj.profiles) * fleet


@dataclass(frozen=True)
class SweepRow:
    bits: int
    rounds_raw: float
    rounds: int
    per_round_energy_j: float
    total_energy_j: float
    tau_pr_s: float
    total_time_s: float
    feasible: bool


def sweep_bits(obj: EnergyObjective, bit_levels: Sequence[int],
               tx_power_w: float, drop_q: float) -> list[SweepRow]:
    """Analytic energy/time/round-count table across bit-widths at fixed (P, q)."""
    rows = []
    for bits in sorted(bit_levels):
        at_bits = replace(obj, bits=bits)
        value = objective_value(at_bits, tx_power_w, drop_q)
        conv = replace(obj.conv, drop_prob=drop_q, bits=bits)
        rounds_raw = rounds_to_target_raw(conv)
        rate = achievable_rate(obj.channel,
                               RateQuery(tx_power_w=tx_power_w, error_prob=drop_q))
        per_round = (per_round_fleet_energy(at_bits, rate, tx_power_w)
                     if rate > 0.0 else math.inf)
        rows.append(SweepRow(
            bits=bits,
            rounds_raw=rounds_raw,
            rounds=max(1, math.ceil(rounds_raw)) if math.isfinite(rounds_raw) else -1,
            per_round_energy_j=per_round,
            total_energy_j=value.raw_energy_j,
            tau_pr_s=value.tau_pr_s,
            total_time_s=rounds_raw * value.tau_pr_s,
            feasible=value.tau_pr_s <= obj.tau_limit_s and math.isfinite(rounds_raw),
        ))
    return rows
