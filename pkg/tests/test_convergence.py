import math
from dataclasses import replace

import numpy as np
import pytest

from qflsim.convergence import (ConvergenceParams, envelope_constants,
                                envelope_holds, recursion_trajectory,
                                rounds_to_target, rounds_to_target_raw,
                                variance_bound)

REF = ConvergenceParams()  # defaults: L=0.097, mu=1, I=3, N=100, K=10, n=8, q=0.01


def oracle_variance_bound(p: ConvergenceParams) -> float:
    # term-by-term arithmetic, independent of the implementation
    t1 = p.num_clients * p.grad_variance / p.num_clients ** 2
    t2 = 6 * p.smoothness * p.heterogeneity
    t3 = (8 * (p.local_iters - 1) ** 2
          + 4 * (p.num_clients - p.selected_k) * p.local_iters ** 2
          / (p.selected_k * (p.num_clients - 1))) * p.grad_norm_bound ** 2
    t4 = (4 * p.model_dim * p.local_iters ** 2 * p.quant_noise_scale ** 2
          / (p.selected_k * (2 ** p.bits - 1) ** 2))
    return t1 + t2 + t3 + t4


def test_variance_bound_reference_constants():
    assert oracle_variance_bound(REF) == pytest.approx(2.556089804718465, rel=1e-12)
    assert variance_bound(REF) == pytest.approx(oracle_variance_bound(REF), rel=1e-12)


def test_variance_bound_quant_term_vanishes_at_high_bits():
    wide = replace(REF, bits=30)
    no_quant = oracle_variance_bound(wide) - (
        4 * wide.model_dim * wide.local_iters ** 2 * wide.quant_noise_scale ** 2
        / (wide.selected_k * (2 ** 30 - 1) ** 2))
    assert variance_bound(wide) == pytest.approx(no_quant, rel=1e-9)
    assert variance_bound(replace(REF, bits=8)) > variance_bound(replace(REF, bits=16))


def test_variance_bound_full_participation_single_step():
    p = replace(REF, selected_k=100, num_clients=100, local_iters=1)
    t1 = 100 * 0.001 / 100 ** 2
    t2 = 6 * 0.097 * 0.6
    t4 = 4 * p.model_dim * 0.01 ** 2 / (100 * 255 ** 2)
    assert variance_bound(p) == pytest.approx(t1 + t2 + t4, rel=1e-12)


def test_variance_bound_monotonicity():
    assert variance_bound(replace(REF, local_iters=3)) > variance_bound(replace(REF, local_iters=2))
    assert variance_bound(replace(REF, model_dim=800_000)) > variance_bound(REF)


def test_variance_bound_per_device_vector():
    vec = replace(REF, grad_variance=[0.001] * 100)
    assert variance_bound(vec) == pytest.approx(variance_bound(REF), rel=1e-12)
    with pytest.raises(ValueError):
        variance_bound(replace(REF, grad_variance=[0.001] * 7))


def test_envelope_constants_reference_point():
    v, shift = envelope_constants(REF)
    e = oracle_variance_bound(REF)
    assert shift == 2.0  # max(3, 0.776/0.99, 1.98) - 1
    assert v == pytest.approx(4 * e / (0.99 * 0.98), rel=1e-12)
    assert v == pytest.approx(10.53840364757149, rel=1e-10)


def test_envelope_v_monotone_in_drop_rate():
    v_low = envelope_constants(replace(REF, drop_prob=0.01))[0]
    v_mid = envelope_constants(replace(REF, drop_prob=0.25))[0]
    v_high = envelope_constants(replace(REF, drop_prob=0.49))[0]
    assert v_high > v_mid > v_low
    assert math.isinf(envelope_constants(replace(REF, drop_prob=0.5))[0])
    assert math.isinf(envelope_constants(replace(REF, drop_prob=0.9))[0])


def test_envelope_initial_gap_branch():
    big_gap = replace(REF, initial_gap=1e6)
    v, shift = envelope_constants(big_gap)
    assert v == (shift + 1) * 1e6


def test_rounds_reference_point():
    raw = rounds_to_target_raw(REF)
    v, shift = envelope_constants(REF)
    assert raw == pytest.approx(0.097 * v / 0.2 - shift, rel=1e-12)
    assert raw == pytest.approx(3.1111257690721734, rel=1e-10)
    assert rounds_to_target(REF) == 4


def test_rounds_eps_halving_identity():
    half = replace(REF, target_gap=REF.target_gap / 2)
    _, shift = envelope_constants(REF)
    lhs = rounds_to_target_raw(half)
    rhs = 2 * (rounds_to_target_raw(REF) + shift) - shift
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_rounds_nondecreasing_in_drop_rate():
    rounds = [rounds_to_target_raw(replace(REF, drop_prob=q))
              for q in np.linspace(0.0, 0.45, 25)]
    assert all(b >= a for a, b in zip(rounds, rounds[1:]))


def test_rounds_infinite_beyond_half():
    assert math.isinf(rounds_to_target_raw(replace(REF, drop_prob=0.6)))
    with pytest.raises(ValueError):
        rounds_to_target(replace(REF, drop_prob=0.6))


def test_gap_guarantee_identity():
    # (L/2) * v / (shift + T_raw) recovers the target gap exactly
    for q in (0.0, 0.01, 0.2, 0.45):
        p = replace(REF, drop_prob=q)
        v, shift = envelope_constants(p)
        t_raw = rounds_to_target_raw(p)
        assert (p.smoothness / 2) * v / (shift + t_raw) == pytest.approx(
            p.target_gap, rel=1e-12)


def test_envelope_holds_reference_horizon():
    assert envelope_holds(REF, 10_000)


def test_envelope_holds_without_drops():
    assert envelope_holds(replace(REF, drop_prob=0.0), 10_000)


def test_halved_envelope_is_violated():
    gaps, envelope = recursion_trajectory(REF, 10_000)
    assert np.all(gaps <= envelope)
    assert np.any(gaps > envelope / 2.0)


def test_trajectory_matches_envelope_check():
    p = replace(REF, drop_prob=0.3, local_iters=2)
    gaps, envelope = recursion_trajectory(p, 3000)
    assert envelope_holds(p, 3000) == bool(np.all(gaps <= envelope))


def test_envelope_holds_random_tuples():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n = int(rng.integers(2, 51))
        p = replace(REF,
                    drop_prob=float(rng.uniform(0.0, 0.5)),
                    local_iters=int(rng.integers(1, 6)),
                    bits=int(rng.choice([2, 4, 8, 16])),
                    num_clients=n,
                    selected_k=int(rng.integers(2, n + 1)))
        assert envelope_holds(p, 2000)


def test_param_validation():
    with pytest.raises(ValueError):
        ConvergenceParams(drop_prob=1.0)
    with pytest.raises(ValueError):
        ConvergenceParams(selected_k=1)
    with pytest.raises(ValueError):
        ConvergenceParams(target_gap=0.0)
    with pytest.raises(ValueError):
        ConvergenceParams(bits=1)
