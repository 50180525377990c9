"""Command-line experiment runner: optimize | train | sweep | bounds.

Experiments are driven by a JSON config merged over built-in defaults;
unknown keys are hard errors so typos cannot silently skew a run.  Every
output file embeds the config hash and master seed, and re-running with
the same config and seed reproduces byte-identical CSV/JSON artifacts
(wall-clock timing goes to stdout only).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import ChannelParams
from .cma_optimizer import CmaConfig, EnergyObjective, cma_minimize, objective_value, sweep_bits
from .convergence import (ConvergenceParams, envelope_constants, recursion_trajectory,
                          rounds_to_target, rounds_to_target_raw, variance_bound)
from .datasets import (DatasetError, LabeledDataset, partition, read_idx,
                       synth_blobs)
from .energy_time import DeviceProfile
from .fl_protocol import (FlConfig, records_to_csv, run_federation, run_summary,
                          write_json)
from .quantizer import QuantConfig


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "experiment": None,            # set by the subcommand; optional in files
    "seed": 1234,
    "out_dir": None,
    "channel": {
        "bandwidth_hz": 10e6,
        "noise_psd_dbm_per_hz": -100.0,
        "blocklength": 1000,
        "pathloss": 1.0,
    },
    "device": {
        "energy_coeff": 1e-27,
        "cycles_per_bit": 40.0,
        "clock_hz": 1e9,
        "compute_flops": 3.7e12,
        "macs_per_iteration": 4_241_152,
        "model_params": 421_642,
        "uplink_params": 421_642,
        "dataset_size": 600,
    },
    "convergence": {
        "smoothness": 0.097,
        "strong_convexity": 1.0,
        "grad_variance": 0.001,
        "heterogeneity": 0.6,
        "grad_norm_bound": 0.25,
        "local_iters": 3,
        "quant_noise_scale": 0.01,
        "initial_gap": 0.01,
        "model_dim": 421_642,
        "bits": 8,
        "num_clients": 100,
        "selected_k": 10,
        "drop_prob": 0.01,
        "target_gap": 0.1,
    },
    "optimize": {
        "ptx_bounds": [0.1, 2.0],
        "q_bounds": [0.01, 0.99],
        "initial_ptx": [0.5, 1.0, 1.5, 2.0],
        "initial_q": 0.3,
        "sigma0": 0.3,
        "population": None,
        "max_generations": 300,
        "tol_fun": 1e-11,
        "bits": 8,
        "tau_limit_s": 1.0,
        "penalty_coeff": 1e6,
    },
    "sweep": {
        "bit_levels": [4, 8, 16, 32],
        "tx_power_w": 0.1,
        "drop_q": 0.01,
        "tau_limit_s": 1.0,
    },
    "bounds": {
        "drop_q": 0.01,
        "horizon": 10_000,
        "q_sweep": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45],
    },
    "train": {
        "num_clients": 20,
        "selected_k": 5,
        "rounds": 30,
        "local_iters": 3,
        "batch_size": 20,
        "learning_rate": 1.0,
        "lr_schedule": "constant",
        "lr_decay_shift": 10.0,
        "hidden_dims": [],
        "bits": None,              # null disables the quantizer
        "drop_q_list": [0.0, 0.1, 0.2],
        "tx_power_w": 0.1,
        "rate_error_floor": 0.01,
        "target_accuracy": None,
        "quantize_on_receipt": True,
        "renormalize_drops": False,
        "dataset": {
            "kind": "synth",       # "synth" | "idx"
            "num_classes": 4,
            "samples": 3000,
            "input_dim": 16,
            "spread": 0.15,
            "val_fraction": 0.2,
            "images": None,
            "labels": None,
            "val_images": None,
            "val_labels": None,
        },
        "partition": {
            "mode": "shard_non_iid",
            "shards_per_client": 2,
            "samples_per_client": 100,
        },
    },
}


def _merge_checked(defaults: dict, user: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a mapping")
            merged[key] = _merge_checked(defaults[key], value, prefix=f"{path}.")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    """Merge a JSON config file over the defaults, rejecting unknown keys."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge_checked(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _csv_out(path: Path, header: list[str], rows, schema: str, tag: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema} {tag}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else str(v) for v in row])


def _channel(cfg: dict) -> ChannelParams:
    c = cfg["channel"]
    return ChannelParams(bandwidth_hz=c["bandwidth_hz"],
                         noise_psd_dbm_per_hz=c["noise_psd_dbm_per_hz"],
                         blocklength=c["blocklength"], pathloss=c["pathloss"])


def _device(cfg: dict) -> DeviceProfile:
    return DeviceProfile(**cfg["device"])


def _convergence(cfg: dict) -> ConvergenceParams:
    return ConvergenceParams(**cfg["convergence"])


def _objective(cfg: dict, bits: int, tau_limit: float) -> EnergyObjective:
    conv = _convergence(cfg)
    profiles = tuple(_device(cfg) for _ in range(conv.num_clients))
    return EnergyObjective(conv=conv, profiles=profiles, channel=_channel(cfg),
                           bits=bits, tau_limit_s=tau_limit,
                           penalty_coeff=cfg["optimize"]["penalty_coeff"])


def cmd_optimize(cfg: dict, out: Path) -> list[Path]:
    opt = cfg["optimize"]
    obj = _objective(cfg, bits=opt["bits"], tau_limit=opt["tau_limit_s"])
    bounds = (tuple(opt["ptx_bounds"]), tuple(opt["q_bounds"]))
    tag = f"config_hash={config_hash(cfg)} seed={cfg['seed']}"
    written = []
    results = []
    for idx, ptx0 in enumerate(opt["initial_ptx"]):
        cma_cfg = CmaConfig(bounds=bounds, population=opt["population"],
                            sigma0=opt["sigma0"],
                            max_generations=opt["max_generations"],
                            tol_fun=opt["tol_fun"], seed=cfg["seed"] + idx)
        result = cma_minimize(obj, np.array([ptx0, opt["initial_q"]]), cma_cfg)
        rows = []
        for row in result.trace:
            mean_p = min(max(row.mean[0], bounds[0][0]), bounds[0][1])
            mean_q = min(max(row.mean[1], bounds[1][0]), bounds[1][1])
            at_mean = objective_value(obj, mean_p, mean_q)
            rows.append((row.generation, mean_p, mean_q, row.best_value,
                         at_mean.raw_energy_j, at_mean.tau_pr_s,
                         max(0.0, at_mean.tau_pr_s - opt["tau_limit_s"])))
        path = out / f"optimize_trace_ptx{ptx0:g}.csv"
        _csv_out(path, ["generation", "mean_ptx", "mean_q", "best_value",
                        "raw_energy", "tau_pr", "constraint_violation"], rows,
                 "qflsim.optimize_trace.v1", tag)
        written.append(path)
        results.append({"initial_ptx": ptx0, "best_ptx": float(result.x[0]),
                        "best_q": float(result.x[1]), "best_value": result.fun,
                        "generations": result.generations,
                        "converged": result.converged})
    best = min(results, key=lambda r: r["best_value"])
    at_best = objective_value(obj, best["best_ptx"], best["best_q"])
    summary = {
        "schema": "qflsim.optimize.v1",
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "initializations": results,
        "best_ptx": best["best_ptx"],
        "best_q": best["best_q"],
        "best_value": best["best_value"],
        "tau_pr_at_best": at_best.tau_pr_s,
        "constraint_satisfied": at_best.tau_pr_s <= opt["tau_limit_s"],
    }
    path = out / "optimize_summary.json"
    write_json(path, summary)
    written.append(path)
    return written


def _load_train_data(cfg: dict, seed: int):
    ds_cfg = cfg["train"]["dataset"]
    if ds_cfg["kind"] == "synth":
        full = synth_blobs(num_classes=ds_cfg["num_classes"],
                           samples=ds_cfg["samples"],
                           input_dim=ds_cfg["input_dim"],
                           spread=ds_cfg["spread"], seed=seed)
        rng = np.random.default_rng(seed + 1)
        order = rng.permutation(len(full))
        n_val = int(len(full) * ds_cfg["val_fraction"])
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        train = LabeledDataset(features=full.features[train_idx],
                               labels=full.labels[train_idx],
                               num_classes=full.num_classes)
        val = LabeledDataset(features=full.features[val_idx],
                             labels=full.labels[val_idx],
                             num_classes=full.num_classes)
        return train, val
    if ds_cfg["kind"] == "idx":
        for key in ("images", "labels", "val_images", "val_labels"):
            if not ds_cfg[key]:
                raise ConfigError(f"train.dataset.{key} required for kind=idx")
        train = read_idx(ds_cfg["images"], ds_cfg["labels"])
        val = read_idx(ds_cfg["val_images"], ds_cfg["val_labels"])
        return train, val
    raise ConfigError(f"unknown dataset kind: {ds_cfg['kind']!r}")


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    tr = cfg["train"]
    if not tr["drop_q_list"]:
        raise ConfigError("train.drop_q_list must not be empty")
    seed = cfg["seed"]
    train_ds, val_ds = _load_train_data(cfg, seed)
    part = partition(train_ds, num_clients=tr["num_clients"],
                     mode=tr["partition"]["mode"],
                     shards_per_client=tr["partition"]["shards_per_client"],
                     seed=seed,
                     samples_per_client=tr["partition"]["samples_per_client"])
    quant = QuantConfig(tr["bits"]) if tr["bits"] is not None else None
    tag = f"config_hash={config_hash(cfg)} seed={seed}"
    written = []
    per_q = {}
    for drop_q in tr["drop_q_list"]:
        fl_cfg = FlConfig(num_clients=tr["num_clients"], selected_k=tr["selected_k"],
                          rounds=tr["rounds"], local_iters=tr["local_iters"],
                          batch_size=tr["batch_size"],
                          learning_rate=tr["learning_rate"],
                          lr_schedule=tr["lr_schedule"],
                          lr_decay_shift=tr["lr_decay_shift"],
                          hidden_dims=tuple(tr["hidden_dims"]), quant=quant,
                          drop_q=drop_q, tx_power_w=tr["tx_power_w"],
                          rate_error_floor=tr["rate_error_floor"],
                          channel=_channel(cfg), device_template=_device(cfg),
                          seed=seed, target_accuracy=tr["target_accuracy"],
                          quantize_on_receipt=tr["quantize_on_receipt"],
                          renormalize_drops=tr["renormalize_drops"])
        records = run_federation(fl_cfg, part, train_ds, val_ds)
        qtag = f"{drop_q:g}"
        path = out / f"train_rounds_q{qtag}.csv"
        records_to_csv(records, path, config_hash(cfg), seed)
        written.append(path)
        for curve, attr in (("train_accuracy", "train_accuracy"),
                            ("val_accuracy", "val_accuracy"),
                            ("train_loss", "train_loss"),
                            ("val_loss", "val_loss")):
            cpath = out / f"curve_{curve}_q{qtag}.csv"
            _csv_out(cpath, ["round", curve],
                     [(r.round_index, getattr(r, attr)) for r in records],
                     "qflsim.curve.v1", tag)
            written.append(cpath)
        per_q[qtag] = run_summary(records, config_echo={}, config_hash=config_hash(cfg),
                                  seed=seed)
        del per_q[qtag]["config"]
    summary = {
        "schema": "qflsim.train.v1",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "config": cfg,
        "quantization": "disabled" if quant is None else f"{quant.bits}-bit",
        "runs": per_q,
    }
    path = out / "train_summary.json"
    write_json(path, summary)
    written.append(path)
    return written


def cmd_sweep(cfg: dict, out: Path) -> list[Path]:
    sw = cfg["sweep"]
    obj = _objective(cfg, bits=min(sw["bit_levels"]), tau_limit=sw["tau_limit_s"])
    rows = sweep_bits(obj, sw["bit_levels"], sw["tx_power_w"], sw["drop_q"])
    baseline = next((r for r in rows if r.bits == 32), rows[-1])
    table = []
    for row in rows:
        savings = (100.0 * (1.0 - row.total_energy_j / baseline.total_energy_j)
                   if math.isfinite(row.total_energy_j)
                   and math.isfinite(baseline.total_energy_j) else math.nan)
        table.append((row.bits, row.rounds_raw, row.rounds, row.per_round_energy_j,
                      row.total_energy_j, row.tau_pr_s, row.total_time_s,
                      int(row.feasible), savings))
    tag = f"config_hash={config_hash(cfg)} seed={cfg['seed']}"
    path = out / "sweep.csv"
    _csv_out(path, ["bits", "rounds_raw", "rounds", "per_round_energy_j",
                    "total_energy_j", "tau_pr_s", "total_time_s", "feasible",
                    "savings_vs_fp32_pct"], table, "qflsim.sweep.v1", tag)
    summary = {
        "schema": "qflsim.sweep.v1",
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "rows": [dict(zip(("bits", "rounds_raw", "rounds", "per_round_energy_j",
                           "total_energy_j", "tau_pr_s", "total_time_s",
                           "feasible", "savings_vs_fp32_pct"), r)) for r in table],
    }
    spath = out / "sweep_summary.json"
    write_json(spath, summary)
    return [path, spath]


def cmd_bounds(cfg: dict, out: Path) -> list[Path]:
    bd = cfg["bounds"]
    conv = replace(_convergence(cfg), drop_prob=bd["drop_q"])
    e_bound = variance_bound(conv)
    v, shift = envelope_constants(conv)
    rounds_raw = rounds_to_target_raw(conv)
    gaps, envelope = recursion_trajectory(conv, bd["horizon"])
    tag = f"config_hash={config_hash(cfg)} seed={cfg['seed']}"
    tpath = out / "bounds_trajectory.csv"
    _csv_out(tpath, ["t", "gap", "envelope"],
             [(t + 1, float(gaps[t]), float(envelope[t])) for t in range(len(gaps))],
             "qflsim.bounds_trajectory.v1", tag)
    qrows = []
    for q in bd["q_sweep"]:
        conv_q = replace(conv, drop_prob=q)
        v_q, shift_q = envelope_constants(conv_q)
        raw_q = rounds_to_target_raw(conv_q)
        qrows.append((q, variance_bound(conv_q), v_q, shift_q, raw_q,
                      rounds_to_target(conv_q) if math.isfinite(raw_q) else -1))
    qpath = out / "bounds_qsweep.csv"
    _csv_out(qpath, ["q", "variance_bound", "envelope_v", "envelope_shift",
                     "rounds_raw", "rounds"], qrows, "qflsim.bounds_qsweep.v1", tag)
    summary = {
        "schema": "qflsim.bounds.v1",
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "variance_bound": e_bound,
        "envelope_v": v,
        "envelope_shift": shift,
        "rounds_raw": rounds_raw,
        "rounds": rounds_to_target(conv) if math.isfinite(rounds_raw) else None,
        "envelope_holds": bool(np.all(gaps <= envelope)),
    }
    spath = out / "bounds_summary.json"
    write_json(spath, summary)
    print(f"variance_bound={e_bound:.6g} envelope_v={v:.6g} "
          f"envelope_shift={shift:.6g} rounds_raw={rounds_raw:.6g}")
    return [tpath, qpath, spath]


_COMMANDS = {
    "optimize": cmd_optimize,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bounds": cmd_bounds,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qflsim",
        description="Quantized federated learning energy/convergence experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="JSON config path")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--subset", type=int, default=None,
                         help="cap samples per client (train only)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if cfg["experiment"] not in (None, args.command):
            raise ConfigError(f"config names experiment {cfg['experiment']!r} "
                              f"but command is {args.command!r}")
        cfg["experiment"] = args.command
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.subset is not None:
            cfg["train"]["partition"]["samples_per_client"] = args.subset
        out = Path(args.out or cfg["out_dir"] or f"runs/{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        written = _COMMANDS[args.command](cfg, out)
        elapsed = time.perf_counter() - started
        print(f"[{args.command}] wrote {len(written)} files to {out} "
              f"in {elapsed:.2f}s")
        return 0
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
