import math

import numpy as np
import pytest
from scipy import integrate

from qflsim.channel import (ChannelParams, RateQuery, achievable_rate, capacity,
                            dbm_to_watts, dispersion, q_function, q_inverse,
                            sample_rayleigh_gain)

LOG2E = math.log2(math.e)


def gaussian_tail_quadrature(x):
    val, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi),
                            x, np.inf)
    return val


def bisect_q_inverse(p, lo=-12.0, hi=12.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q_function(mid) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_q_function_symmetry_and_limits():
    assert q_function(0.0) == 0.5
    assert q_function(40.0) < 1e-300
    assert q_function(-40.0) == pytest.approx(1.0, abs=1e-15)


def test_q_function_matches_quadrature():
    for x in (-3.0, -1.0, 0.3, 1.0, 2.5, 5.0):
        assert q_function(x) == pytest.approx(gaussian_tail_quadrature(x), abs=1e-12)
    assert q_function(1.0) == pytest.approx(0.158655253931457, abs=1e-12)


def test_q_inverse_median_is_exactly_zero():
    assert q_inverse(0.5) == 0.0


def test_q_inverse_against_bisection():
    for p in (1e-9, 1e-6, 1e-4, 0.005, 0.01, 0.1, 0.3, 0.7, 0.9, 0.999):
        assert q_inverse(p) == pytest.approx(bisect_q_inverse(p), abs=1e-10)
    assert q_inverse(0.01) == pytest.approx(2.3263478740408408, abs=1e-10)


def test_q_inverse_forward_residual():
    for p in (1e-8, 1e-4, 0.01, 0.2, 0.5, 0.8, 0.99):
        assert q_function(q_inverse(p)) == pytest.approx(p, abs=1e-10)


def test_q_inverse_roundtrip_sweep():
    for x in np.linspace(-6, 6, 241):
        assert q_inverse(q_function(x)) == pytest.approx(x, abs=1e-8)


def test_q_inverse_domain():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            q_inverse(p)


def test_capacity_values():
    assert capacity(0.0) == 0.0
    assert capacity(1.0) == 1.0
    assert capacity(1e5) == pytest.approx(math.log2(1 + 1e5), rel=1e-15)


def test_dispersion_values():
    assert dispersion(0.0) == 0.0
    assert dispersion(1e12) == pytest.approx(LOG2E ** 2, rel=1e-9)
    assert dispersion(1.0) == pytest.approx(0.75 * LOG2E ** 2, rel=1e-15)


def unit_snr_params(tx_power=1.0, blocklength=1000):
    # bandwidth * noise PSD = tx_power so rho = 1 at gain 1
    return ChannelParams(bandwidth_hz=1e7, noise_psd_dbm_per_hz=-100.0,
                         blocklength=blocklength), \
        RateQuery(tx_power_w=tx_power * 1e-6, error_prob=0.01, gain_sq=1.0)


def test_rate_at_half_error_equals_capacity():
    params = ChannelParams(blocklength=500)
    for power in (1e-7, 1e-4, 0.1):
        query = RateQuery(tx_power_w=power, error_prob=0.5)
        rho = power / (params.noise_psd_w_per_hz * params.bandwidth_hz)
        assert achievable_rate(params, query) == capacity(rho)


def test_rate_composed_oracle_unit_snr():
    # compose the three sub-operations independently at snr = 1
    params, query = unit_snr_params()
    expected = capacity(1.0) - math.sqrt(dispersion(1.0) / 1000) * q_inverse(0.01)
    got = achievable_rate(params, query)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.908086388940728, abs=1e-6)


def test_rate_monotone_in_error_target():
    params = ChannelParams()
    r_strict = achievable_rate(params, RateQuery(0.1, 0.01))
    r_loose = achievable_rate(params, RateQuery(0.1, 0.2))
    assert r_strict < r_loose


def test_rate_monotonicity_properties():
    rng = np.random.default_rng(3)
    for _ in range(200):
        power = float(rng.uniform(1e-3, 1.0))
        gain = float(rng.uniform(0.05, 4.0))
        q = float(rng.uniform(0.001, 0.45))
        m = int(rng.integers(50, 5000))
        params = ChannelParams(blocklength=m)
        base = achievable_rate(params, RateQuery(power, q, gain))
        if base <= 0:
            continue
        up_m = achievable_rate(ChannelParams(blocklength=2 * m),
                               RateQuery(power, q, gain))
        up_p = achievable_rate(params, RateQuery(2 * power, q, gain))
        up_g = achievable_rate(params, RateQuery(power, q, 2 * gain))
        up_q = achievable_rate(params, RateQuery(power, min(0.49, 2 * q), gain))
        assert up_m > base and up_p > base and up_g > base and up_q > base
        rho = power / (params.noise_psd_w_per_hz * params.bandwidth_hz)
        assert base <= capacity(rho * gain)


def test_rate_floors_at_zero():
    params = ChannelParams(blocklength=10, pathloss=1e-20)
    assert achievable_rate(params, RateQuery(1e-6, 0.01, 1.0)) == 0.0


def test_rayleigh_gain_statistics():
    rng = np.random.default_rng(2024)
    draws = np.array([sample_rayleigh_gain(rng) for _ in range(200_000)])
    assert draws.mean() == pytest.approx(1.0, abs=0.01)
    assert (draws > 1.0).mean() == pytest.approx(math.exp(-1), abs=0.005)
    again = np.random.default_rng(2024)
    assert sample_rayleigh_gain(again) == draws[0]


def test_dbm_conversion():
    assert dbm_to_watts(-100.0) == pytest.approx(1e-13, rel=1e-12)
    assert ChannelParams().noise_psd_w_per_hz == pytest.approx(1e-13, rel=1e-12)


def test_param_validation():
    with pytest.raises(ValueError):
        ChannelParams(bandwidth_hz=0)
    with pytest.raises(ValueError):
        ChannelParams(blocklength=0)
    with pytest.raises(ValueError):
        RateQuery(tx_power_w=0.0, error_prob=0.1)
    with pytest.raises(ValueError):
        RateQuery(tx_power_w=1.0, error_prob=0.0)
    with pytest.raises(ValueError):
        RateQuery(tx_power_w=1.0, error_prob=0.1, gain_sq=-1.0)
