import numpy as np
import pytest

from qflsim.channel import ChannelParams
from qflsim.datasets import partition, synth_blobs
from qflsim.fl_protocol import (FlConfig, aggregate, parse_rounds_csv,
                                records_to_csv, run_federation, run_summary,
                                select_clients, transmit)
from qflsim.quantizer import QuantConfig, QuantizedVector


def small_setup(num_clients=8, selected_k=4, seed=0, samples=320):
    ds = synth_blobs(num_classes=4, samples=samples, input_dim=6, spread=0.15,
                     seed=seed)
    val = synth_blobs(num_classes=4, samples=80, input_dim=6, spread=0.15,
                      seed=seed + 1)
    part = partition(ds, num_clients=num_clients, mode="iid", seed=seed)
    return ds, val, part


def test_select_all_when_k_equals_n():
    sel = select_clients(7, 7, np.random.default_rng(0))
    assert sel.tolist() == list(range(7))


def test_select_uniform_frequency():
    rng = np.random.default_rng(123)
    counts = np.zeros(100)
    rounds = 100_000
    for _ in range(rounds):
        counts[select_clients(100, 10, rng)] += 1
    freq = counts / rounds
    assert np.all(np.abs(freq - 0.1) < 0.005)


def test_select_seed_reproducible():
    a = [select_clients(20, 5, np.random.default_rng(5)).tolist() for _ in range(1)]
    b = [select_clients(20, 5, np.random.default_rng(5)).tolist() for _ in range(1)]
    assert a == b
    with pytest.raises(ValueError):
        select_clients(3, 4, np.random.default_rng(0))


def test_transmit_never_drops_at_zero():
    rng = np.random.default_rng(0)
    payload = QuantizedVector(np.array([1, -2]), QuantConfig(4))
    for _ in range(200):
        got, lam = transmit(payload, 0.0, rng)
        assert lam == 1 and got is payload


def test_transmit_drop_statistics():
    rng = np.random.default_rng(9)
    drops = sum(1 - transmit(np.zeros(1), 0.2, rng)[1] for _ in range(100_000))
    assert abs(drops / 100_000 - 0.2) < 0.004


def test_transmit_payload_bit_identical():
    rng = np.random.default_rng(1)
    payload = QuantizedVector(np.array([5, -7, 0]), QuantConfig(5))
    got, lam = transmit(payload, 0.3, rng)
    if lam:
        assert np.array_equal(got.levels, payload.levels)
    else:
        assert got is None


def test_aggregate_total_outage_keeps_weights():
    w = np.array([0.1, -0.2, 0.3])
    out = aggregate(w, [(0.5, 0, np.ones(3)), (0.5, 0, np.ones(3))])
    assert np.array_equal(out, w)


def test_aggregate_equal_weights_reduces_to_plain_average():
    w = np.zeros(4)
    deltas = [np.full(4, v) for v in (1.0, 2.0, 3.0, 4.0)]
    out = aggregate(w, [(0.25, 1, d) for d in deltas])
    mean = (deltas[0] + deltas[1] + deltas[2] + deltas[3]) / 4
    assert np.array_equal(out, w + mean)


def test_aggregate_partial_delivery_hand_oracle():
    w = np.array([0.0, 0.0])
    u = np.array([0.4, -0.4])
    out = aggregate(w, [(0.75, 1, u), (0.25, 0, np.array([9.9, 9.9]))])
    assert np.allclose(out, 0.75 * u, rtol=0, atol=1e-15)


def test_aggregate_drop_masking_span():
    w = np.zeros(2)
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    out = aggregate(w, [(0.5, 1, e1), (0.5, 0, e2)])
    assert out[1] == 0.0 and out[0] != 0.0


def test_aggregate_renormalized_variant():
    w = np.zeros(1)
    upd = [(0.5, 1, np.array([1.0])), (0.5, 0, np.array([1.0]))]
    damped = aggregate(w, upd)
    renorm = aggregate(w, upd, renormalize_drops=True)
    assert damped[0] == pytest.approx(0.5)
    assert renorm[0] == pytest.approx(1.0)


def test_aggregate_clips_to_quant_range():
    cfg = QuantConfig(3)
    w = np.array([0.8])
    out = aggregate(w, [(1.0, 1, np.array([5.0]))], quant=cfg)
    assert out[0] == cfg.clip_high


def test_run_federation_deterministic():
    ds, val, part = small_setup()
    cfg = FlConfig(num_clients=8, selected_k=4, rounds=5, local_iters=2,
                   batch_size=10, learning_rate=0.05, quant=QuantConfig(8),
                   drop_q=0.2, seed=42)
    a = run_federation(cfg, part, ds, val)
    b = run_federation(cfg, part, ds, val)
    assert a == b


def test_run_federation_energy_ledger():
    ds, val, part = small_setup()
    cfg = FlConfig(num_clients=8, selected_k=4, rounds=6, local_iters=2,
                   batch_size=10, learning_rate=0.05, quant=QuantConfig(8),
                   drop_q=0.1, seed=3)
    records = run_federation(cfg, part, ds, val)
    total = 0.0
    for rec in records:
        assert all(lam in (0, 1) for lam in rec.lambdas)
        total += sum(rec.local_j) + sum(rec.uplink_j)
        assert rec.cum_energy_j == pytest.approx(total, rel=1e-9)
    cums = [r.cum_energy_j for r in records]
    assert all(b >= a for a, b in zip(cums, cums[1:]))


def test_run_federation_dropped_clients_still_pay():
    ds, val, part = small_setup()
    cfg = FlConfig(num_clients=8, selected_k=8, rounds=3, local_iters=1,
                   batch_size=10, learning_rate=0.05, quant=QuantConfig(8),
                   drop_q=0.6, seed=1)
    records = run_federation(cfg, part, ds, val)
    saw_drop = False
    for rec in records:
        for lam, zero, e_loc, e_up in zip(rec.lambdas, rec.zero_rate,
                                          rec.local_j, rec.uplink_j):
            assert e_loc > 0
            if lam == 0 and zero == 0:
                saw_drop = True
                assert e_up > 0  # the packet was sent, energy is spent
    assert saw_drop


def test_run_federation_zero_rate_counts_as_undelivered():
    ds, val, part = small_setup()
    dead = ChannelParams(pathloss=1e-30)
    cfg = FlConfig(num_clients=8, selected_k=4, rounds=2, local_iters=1,
                   batch_size=10, learning_rate=0.05, quant=None, drop_q=0.0,
                   channel=dead, seed=0)
    records = run_federation(cfg, part, ds, val)
    for rec in records:
        assert all(z == 1 for z in rec.zero_rate)
        assert all(lam == 0 for lam in rec.lambdas)
        assert all(e == 0.0 for e in rec.uplink_j)
        assert rec.update_norm == 0.0


def test_run_federation_single_client_is_centralized_sgd():
    ds, val, _ = small_setup()
    part = partition(ds, num_clients=1, mode="iid", seed=0)
    cfg = FlConfig(num_clients=1, selected_k=1, rounds=4, local_iters=3,
                   batch_size=9999, learning_rate=0.1, quant=None, drop_q=0.0,
                   seed=11)
    records = run_federation(cfg, part, ds, val)
    assert len(records) == 4
    assert records[-1].train_loss < records[0].train_loss


def test_run_federation_target_accuracy_stops_early():
    ds, val, part = small_setup(samples=640)
    cfg = FlConfig(num_clients=8, selected_k=8, rounds=60, local_iters=3,
                   batch_size=40, learning_rate=0.3, quant=None, drop_q=0.0,
                   seed=5, target_accuracy=0.7)
    records = run_federation(cfg, part, ds, val)
    assert len(records) < 60
    assert records[-1].val_accuracy >= 0.7


def test_rounds_csv_roundtrip(tmp_path):
    ds, val, part = small_setup()
    cfg = FlConfig(num_clients=8, selected_k=3, rounds=4, local_iters=2,
                   batch_size=10, learning_rate=0.05, quant=QuantConfig(6),
                   drop_q=0.15, seed=8)
    records = run_federation(cfg, part, ds, val)
    path = tmp_path / "rounds.csv"
    records_to_csv(records, path, config_hash="cafe", seed=8)
    parsed = parse_rounds_csv(path)
    assert parsed == records
    summary = run_summary(records, config_echo={"seed": 8}, config_hash="cafe",
                          seed=8)
    assert summary["rounds_run"] == 4
    assert summary["total_energy_j"] == pytest.approx(records[-1].cum_energy_j)


def test_config_validation():
    with pytest.raises(ValueError):
        FlConfig(num_clients=4, selected_k=5)
    with pytest.raises(ValueError):
        FlConfig(drop_q=1.0)
    with pytest.raises(ValueError):
        FlConfig(lr_schedule="cosine")
    with pytest.raises(ValueError):
        transmit(np.zeros(1), 1.0, np.random.default_rng(0))
