"""Round-based quantized federated averaging with unreliable uplinks.

Each round the server samples K of N clients and broadcasts the global
model.  Every selected client quantizes the received model, runs local
SGD with gradients evaluated at quantized weights, quantizes its delta,
and sends it over a fading uplink; the packet survives with probability
1 - drop_q.  The server adds the weighted sum of delivered deltas divided
by the weight sum over all selected clients, so lost packets shrink the
effective step instead of renormalizing it (a renormalizing variant is
available behind a flag for ablations).

Every random draw comes from a stream keyed by (seed, purpose, round,
client), so runs are reproducible and independent of client scheduling:
  model init     SeedSequence([seed, 0])
  selection      SeedSequence([seed, 1])
  client train   SeedSequence([seed, 2, round, client])
  client fading  SeedSequence([seed, 3, round, client])
  client drops   SeedSequence([seed, 4, round, client])
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import ChannelParams, RateQuery, achievable_rate, sample_rayleigh_gain
from .datasets import ClientPartition, LabeledDataset
from .energy_time import (DeviceProfile, comp_time, device_round_breakdown,
                          local_energy)
from .quantizer import QuantConfig, QuantizedVector, clip as clip_range, dequantize, quantize
from .tinynn import LocalTrainConfig, ModelParams, init_params, local_train, mac_count, evaluate

ROUNDS_SCHEMA = "qflsim.rounds.v1"

# bit-width used for energy accounting when the quantizer is disabled
FP_BITS = 32


@dataclass(frozen=True)
class FlConfig:
    num_clients: int = 20
    selected_k: int = 5
    rounds: int = 30
    local_iters: int = 3
    batch_size: int = 20
    learning_rate: float = 1.0
    lr_schedule: str = "constant"          # "constant" | "inverse_t"
    lr_decay_shift: float = 10.0
    hidden_dims: tuple[int, ...] = ()
    quant: QuantConfig | None = None
    drop_q: float = 0.0
    tx_power_w: float = 0.1
    rate_error_floor: float = 0.01         # rate target when drop_q == 0
    channel: ChannelParams = field(default_factory=ChannelParams)
    device_template: DeviceProfile = field(default_factory=DeviceProfile)
    seed: int = 0
    target_accuracy: float | None = None
    quantize_on_receipt: bool = True
    renormalize_drops: bool = False        # non-default ablation of the denominator

    def __post_init__(self):
        if not 1 <= self.selected_k <= self.num_clients:
            raise ValueError("selected_k must lie in [1, num_clients]")
        if not 0.0 <= self.drop_q < 1.0:
            raise ValueError("drop_q must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "inverse_t"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    selected: tuple[int, ...]
    lambdas: tuple[int, ...]               # 1 delivered, 0 lost or untransmittable
    zero_rate: tuple[int, ...]             # 1 when the fading draw gave zero rate
    rates: tuple[float, ...]
    local_j: tuple[float, ...]
    uplink_j: tuple[float, ...]
    tx_time_s: tuple[float, ...]
    comp_time_s: tuple[float, ...]
    update_norm: float
    train_accuracy: float
    train_loss: float
    val_accuracy: float
    val_loss: float
    round_energy_j: float
    cum_energy_j: float
    round_time_s: float


def _stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def select_clients(num_clients: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform K-subset without replacement, returned in ascending order."""
    if k > num_clients:
        raise ValueError("cannot select more clients than exist")
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def transmit(update: QuantizedVector | np.ndarray, drop_q: float,
             rng: np.random.Generator):
    """Bernoulli packet delivery: (payload, 1) w.p. 1-drop_q else (None, 0)."""
    if not 0.0 <= drop_q < 1.0:
        raise ValueError("drop_q must lie in [0, 1)")
    if rng.random() < drop_q:
        return None, 0
    return update, 1


def aggregate(weights: np.ndarray,
              updates: Sequence[tuple[float, int, np.ndarray]],
              quant: QuantConfig | None = None,
              renormalize_drops: bool = False) -> np.ndarray:
    """Apply delivered deltas: w + sum(alpha*lambda*delta) / sum(alpha).

    The denominator runs over all selected clients regardless of delivery,
    unless renormalize_drops sums only delivered weights.  A fully dropped
    round returns the input weights unchanged.
    """
    numerator = np.zeros_like(weights)
    denominator = 0.0
    for alpha, lam, delta in updates:
        if alpha <= 0:
            raise ValueError("client weights must be positive")
        if lam:
            numerator += alpha * delta
        if lam or not renormalize_drops:
            denominator += alpha
    if denominator == 0.0:
        return weights.copy()
    merged = weights + numerator / denominator
    if quant is not None:
        merged = clip_range(merged, quant)
    return merged


def run_federation(cfg: FlConfig, part: ClientPartition, train_ds: LabeledDataset,
                   eval_ds: LabeledDataset) -> list[RoundRecord]:
    """Run the federation and return one telemetry record per round.

    Stops at the round budget, or earlier once validation accuracy reaches
    cfg.target_accuracy.  Lost packets still pay local and uplink energy;
    a zero-rate fading draw makes the client untransmittable (lambda 0,
    no uplink energy).
    """
    if part.num_clients != cfg.num_clients:
        raise ValueError("partition does not match num_clients")
    shards = [LabeledDataset(features=train_ds.features[idx],
                             labels=train_ds.labels[idx],
                             num_classes=train_ds.num_classes)
              for idx in part.assignments]
    dims = (train_ds.input_dim, *cfg.hidden_dims, train_ds.num_classes)
    model = init_params(dims, _stream(cfg.seed, 0))
    profiles = [replace(cfg.device_template,
                        model_params=model.dim,
                        uplink_params=model.dim,
                        macs_per_iteration=float(mac_count(dims))
                        * min(cfg.batch_size, len(shards[k])),
                        dataset_size=len(shards[k]))
                for k in range(cfg.num_clients)]
    energy_bits = cfg.quant.bits if cfg.quant is not None else FP_BITS
    rate_q = max(cfg.drop_q, cfg.rate_error_floor)
    selection_rng = _stream(cfg.seed, 1)

    records: list[RoundRecord] = []
    weights = model.weights
    cum_energy = 0.0
    for t in range(cfg.rounds):
        if cfg.lr_schedule == "constant":
            eta = cfg.learning_rate
        else:
            eta = cfg.learning_rate * cfg.lr_decay_shift / (cfg.lr_decay_shift + t)
        selected = select_clients(cfg.num_clients, cfg.selected_k, selection_rng)

        updates = []
        lambdas, zero_rate_flags, rates = [], [], []
        locals_j, uplinks_j, tx_times, comp_times = [], [], [], []
        for k in (int(i) for i in selected):
            train_rng = _stream(cfg.seed, 2, t, k)
            if cfg.quant is not None and cfg.quantize_on_receipt:
                start_w = dequantize(quantize(weights, cfg.quant, train_rng))
            else:
                start_w = weights.copy()
            start = ModelParams(layer_dims=dims, weights=start_w)
            delta = local_train(start, shards[k],
                                LocalTrainConfig(local_iters=cfg.local_iters,
                                                 learning_rate=eta,
                                                 batch_size=cfg.batch_size,
                                                 quant=cfg.quant),
                                train_rng)
            if cfg.quant is not None:
                payload = quantize(delta, cfg.quant, train_rng)
                decoded = dequantize(payload)
            else:
                payload = delta
                decoded = delta

            gain = sample_rayleigh_gain(_stream(cfg.seed, 3, t, k))
            rate = achievable_rate(cfg.channel,
                                   RateQuery(tx_power_w=cfg.tx_power_w,
                                             error_prob=rate_q, gain_sq=gain))
            if rate <= 0.0:
                e_local = local_energy(profiles[k], energy_bits, cfg.local_iters)
                t_comp = comp_time(profiles[k], cfg.local_iters)
                lam, e_up, t_tx, zero = 0, 0.0, 0.0, 1
            else:
                cost = device_round_breakdown(profiles[k], energy_bits, rate,
                                              cfg.channel.bandwidth_hz,
                                              cfg.tx_power_w, cfg.local_iters)
                e_local, e_up = cost.local_j, cost.uplink_j
                t_tx, t_comp = cost.tx_time_s, cost.comp_time_s
                _, lam = transmit(payload, cfg.drop_q, _stream(cfg.seed, 4, t, k))
                zero = 0
            updates.append((float(part.weights[k]), lam, decoded))
            lambdas.append(lam)
            zero_rate_flags.append(zero)
            rates.append(rate)
            locals_j.append(e_local)
            uplinks_j.append(e_up)
            tx_times.append(t_tx)
            comp_times.append(t_comp)

        new_weights = aggregate(weights, updates, cfg.quant, cfg.renormalize_drops)
        update_norm = float(np.linalg.norm(new_weights - weights))
        weights = new_weights
        current = ModelParams(layer_dims=dims, weights=weights)
        train_acc, train_loss = evaluate(current, train_ds)
        val_acc, val_loss = evaluate(current, eval_ds)

        round_energy = float(sum(locals_j) + sum(uplinks_j))
        cum_energy += round_energy
        records.append(RoundRecord(
            round_index=t,
            selected=tuple(int(i) for i in selected),
            lambdas=tuple(lambdas),
            zero_rate=tuple(zero_rate_flags),
            rates=tuple(rates),
            local_j=tuple(locals_j),
            uplink_j=tuple(uplinks_j),
            tx_time_s=tuple(tx_times),
            comp_time_s=tuple(comp_times),
            update_norm=update_norm,
            train_accuracy=train_acc,
            train_loss=train_loss,
            val_accuracy=val_acc,
            val_loss=val_loss,
            round_energy_j=round_energy,
            cum_energy_j=cum_energy,
            round_time_s=max(tx + cp for tx, cp in zip(tx_times, comp_times)),
        ))
        if cfg.target_accuracy is not None and val_acc >= cfg.target_accuracy:
            break
    return records


_LIST_FIELDS = ("selected", "lambdas", "zero_rate", "rates", "local_j",
                "uplink_j", "tx_time_s", "comp_time_s")
_SCALAR_FIELDS = ("update_norm", "train_accuracy", "train_loss", "val_accuracy",
                  "val_loss", "round_energy_j", "cum_energy_j", "round_time_s")


def records_to_csv(records: Sequence[RoundRecord], path, config_hash: str,
                   seed: int) -> None:
    """One row per round; list-valued fields are semicolon-joined."""
    with open(str(path), "w", newline="") as fh:
        fh.write(f"# schema={ROUNDS_SCHEMA} config_hash={config_hash} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(("round",) + _LIST_FIELDS + _SCALAR_FIELDS)
        for rec in records:
            row = [rec.round_index]
            row += [";".join(repr(v) if isinstance(v, float) else str(v)
                             for v in getattr(rec, name))
                    for name in _LIST_FIELDS]
            row += [repr(getattr(rec, name)) for name in _SCALAR_FIELDS]
            writer.writerow(row)


def parse_rounds_csv(path) -> list[RoundRecord]:
    """Inverse of records_to_csv (used to validate the schema round-trips)."""
    with open(str(path), newline="") as fh:
        header = fh.readline()
        if ROUNDS_SCHEMA not in header:
            raise ValueError(f"unexpected schema line: {header!r}")
        reader = csv.reader(fh)
        names = next(reader)
        expected = ("round",) + _LIST_FIELDS + _SCALAR_FIELDS
        if tuple(names) != expected:
            raise ValueError(f"unexpected columns: {names}")
        records = []
        for row in reader:
            data = dict(zip(names, row))
            ints = lambda s: tuple(int(v) for v in s.split(";")) if s else ()
            floats = lambda s: tuple(float(v) for v in s.split(";")) if s else ()
            records.append(RoundRecord(
                round_index=int(data["round"]),
                selected=ints(data["selected"]),
                lambdas=ints(data["lambdas"]),
                zero_rate=ints(data["zero_rate"]),
                rates=floats(data["rates"]),
                local_j=floats(data["local_j"]),
                uplink_j=floats(data["uplink_j"]),
                tx_time_s=floats(data["tx_time_s"]),
                comp_time_s=floats(data["comp_time_s"]),
                **{name: float(data[name]) for name in _SCALAR_FIELDS},
            ))
    return records


def run_summary(records: Sequence[RoundRecord], config_echo: dict,
                config_hash: str, seed: int) -> dict:
    """Deterministic JSON-ready summary of a federation run."""
    last = records[-1]
    return {
        "schema": "qflsim.summary.v1",
        "config_hash": config_hash,
        "seed": seed,
        "config": config_echo,
        "rounds_run": len(records),
        "final_train_accuracy": last.train_accuracy,
        "final_train_loss": last.train_loss,
        "final_val_accuracy": last.val_accuracy,
        "final_val_loss": last.val_loss,
        "total_energy_j": last.cum_energy_j,
        "total_time_s": sum(r.round_time_s for r in records),
    }


def write_json(path, payload: dict) -> None:
    with open(str(path), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
