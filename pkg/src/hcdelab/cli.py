"""Command-line entry point: simulate, train, evaluate, ablate, sweep.

All commands are driven by a YAML config (deep-merged over defaults, with
dotted-key overrides via ``--set``) and write a resolved-config snapshot
next to their outputs. Unknown config keys are rejected. Outputs are
deterministic: identical config + seeds reproduce identical bytes, so no
timestamps or wall-clock values are ever written.

Re-running into a populated output directory is refused unless ``--force``
is given. The only environment knob is HCDELAB_WORKERS, the process count
used to fan out independent unit simulations.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import yaml

from . import baseline as baseline_mod
from . import evaluate as eval_mod
from . import hcde as hcde_mod
from .beamsim import BeamModel, SimConfig, run_to_failure
from .datasets import (
    BRIDGE_ROLES,
    Scaler,
    TrajectoryDataset,
    WindowConfig,
    load_dataset,
    sample_multiscale_windows,
    save_unit,
    split_units,
)
from .nn import init_mlp, load_checkpoint, save_checkpoint
from .odeint import SolverConfig

__all__ = ["main", "dispatch", "DEFAULT_CONFIG"]


DEFAULT_CONFIG = {
    "out_dir": "runs/out",
    "data_dir": "runs/data",
    "seeds": [0, 1, 2, 3, 4],
    "simulate": {
        "scenario_a_units": 6,
        "scenario_b_units": 6,
        "id_test_count": 1,
        "seed_base": 100,
        "start_day_step": 60,  # stagger units by two months of seasons
        "beta_damage": 3.2e-4,
        "u_ref": 0.0125,
        "damage_exponent": 2.0,
        "failure_damage": 0.3,
        "max_days": 183.0,
        "base_scale": 36.0,
    },
    "model": {
        "slow_dim": 10,
        "fast_dim": 10,
        "hidden": 64,
        "transform_dim": 10,
        "gamma": 10.0,
        "with_monotonic": True,
        "with_path_transform": True,
        "steady_state": False,
        "solver": {
            "method": "dopri5",
            "rtol": 1e-3,
            "atol": 1e-5,
            "initial_step": None,
            "max_steps": 10000,
        },
    },
    "window": {"w_s": 100, "dt_s": 12, "w_f": 11, "dt_f": 1, "stride": 2},
    "train": {
        "lr": 5e-3,
        "weight_decay": 0.01,
        "batch_size": 256,
        "max_epochs": 30,
        "min_epochs": 5,
        "val_fraction": 0.2,
        "plateau_patience": 5,
        "plateau_factor": 0.95,
        "early_stop_patience": 10,
    },
    "residual": {
        "window": 5,
        "healthy_len": 1000,
        "hidden": [50, 50, 20, 10],
        "dropout": 0.2,
        "batch_norm": True,
        "steady_state": False,
        "lr": 5e-3,
        "weight_decay": 0.01,
        "batch_size": 256,
        "max_epochs": 30,
        "min_epochs": 5,
        "val_fraction": 0.2,
        "plateau_patience": 5,
        "plateau_factor": 0.95,
        "early_stop_patience": 10,
    },
    "evaluate": {"pca_components": 2},
    "sweep": {"dt_s_values": [1, 3, 6, 12], "seeds": [0]},
    "ablate": {"variants": ["full", "no-mc", "no-pt"]},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------- config plumbing

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path=f"{dotted}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg: dict, dotted: str, raw_value: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = yaml.safe_load(raw_value)


def load_config(path: str | None, overrides: list) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(cfg, dotted.strip(), raw)
    return cfg


def _write_snapshot(out_dir: Path, cfg: dict, command: str) -> None:
    blob = {"command": command, "config": cfg}
    with open(out_dir / "config.resolved.json", "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_clean(out_dir: Path, patterns: list, force: bool) -> None:
    existing = [p.name for pat in patterns for p in out_dir.glob(pat)]
    if existing and not force:
        raise ConfigError(
            f"{out_dir} already holds outputs ({existing[:3]}...); "
            f"pass --force to overwrite")


def _workers() -> int:
    return max(1, int(os.environ.get("HCDELAB_WORKERS", "1")))


# ------------------------------------------------------------ shared pieces

def _sim_config(cfg: dict) -> SimConfig:
    s = cfg["simulate"]
    return SimConfig(beta_damage=s["beta_damage"], u_ref=s["u_ref"],
                     damage_exponent=s["damage_exponent"],
                     failure_damage=s["failure_damage"],
                     max_days=s["max_days"], base_scale=s["base_scale"])


def _solver_config(cfg: dict) -> SolverConfig:
    s = cfg["model"]["solver"]
    return SolverConfig(method=s["method"], rtol=s["rtol"], atol=s["atol"],
                        initial_step=s["initial_step"],
                        max_steps=s["max_steps"])


def _window_config(cfg: dict) -> WindowConfig:
    w = cfg["window"]
    return WindowConfig(w_s=w["w_s"], dt_s=w["dt_s"], w_f=w["w_f"],
                        dt_f=w["dt_f"], stride=w["stride"])


def _model_config(cfg: dict, n_states: int, n_inputs: int) -> hcde_mod.HcdeConfig:
    m = cfg["model"]
    return hcde_mod.HcdeConfig(
        n_states=n_states, n_inputs=n_inputs,
        slow_dim=m["slow_dim"], fast_dim=m["fast_dim"], hidden=m["hidden"],
        transform_dim=m["transform_dim"], gamma=m["gamma"],
        with_monotonic=m["with_monotonic"],
        with_path_transform=m["with_path_transform"],
        steady_state=m["steady_state"],
        solver=_solver_config(cfg), window=_window_config(cfg))


def _residual_config(cfg: dict) -> baseline_mod.ResidualConfig:
    r = cfg["residual"]
    return baseline_mod.ResidualConfig(
        window=r["window"], healthy_len=r["healthy_len"],
        hidden=tuple(r["hidden"]), dropout=r["dropout"],
        batch_norm=r["batch_norm"], steady_state=r["steady_state"],
        lr=r["lr"], weight_decay=r["weight_decay"],
        batch_size=r["batch_size"], max_epochs=r["max_epochs"],
        min_epochs=r["min_epochs"], val_fraction=r["val_fraction"],
        plateau_patience=r["plateau_patience"],
        plateau_factor=r["plateau_factor"],
        early_stop_patience=r["early_stop_patience"])


def _train_config(cfg: dict) -> hcde_mod.TrainConfig:
    t = cfg["train"]
    return hcde_mod.TrainConfig(
        lr=t["lr"], weight_decay=t["weight_decay"],
        batch_size=t["batch_size"], max_epochs=t["max_epochs"],
        min_epochs=t["min_epochs"], val_fraction=t["val_fraction"],
        plateau_patience=t["plateau_patience"],
        plateau_factor=t["plateau_factor"],
        early_stop_patience=t["early_stop_patience"])


def _prepared_dataset(data_dir) -> TrajectoryDataset:
    dataset = load_dataset(data_dir)
    if not dataset.units_in("train"):
        raise ConfigError(f"dataset in {data_dir} has no training units")
    dataset.fit_scaler()
    return dataset


def _unit_samples(dataset: TrajectoryDataset, unit, window: WindowConfig):
    return sample_multiscale_windows(unit, window, dataset.roles,
                                     scaler=dataset.scaler)


def _train_split_samples(dataset: TrajectoryDataset, window: WindowConfig):
    samples = []
    for unit in dataset.units_in("train"):
        samples.extend(_unit_samples(dataset, unit, window))
    if not samples:
        raise ConfigError("training units produced no windows; "
                          "check window configuration vs trajectory length")
    return samples


# ------------------------------------------------------------------ simulate

def _simulate_one(task):
    unit_id, scenario, seed, start_day, sim = task
    return run_to_failure(BeamModel(), scenario, seed, start_day=start_day,
                          sim=sim, unit_id=unit_id)


def cmd_simulate(cfg: dict, out_dir: Path, force: bool) -> int:
    s = cfg["simulate"]
    sim = _sim_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["unit_*.csv"], force)
    tasks = []
    for i in range(int(s["scenario_a_units"])):
        tasks.append((f"A{i + 1}", "A", s["seed_base"] + i,
                      i * int(s["start_day_step"]), sim))
    for i in range(int(s["scenario_b_units"])):
        tasks.append((f"B{i + 1}", "B", s["seed_base"] + 1000 + i,
                      i * int(s["start_day_step"]), sim))
    n_workers = _workers()
    if n_workers > 1 and len(tasks) > 1:
        with get_context("fork").Pool(min(n_workers, len(tasks))) as pool:
            units = pool.map(_simulate_one, tasks)
    else:
        units = [_simulate_one(t) for t in tasks]

    from .datasets import Unit
    dataset = TrajectoryDataset(
        units=[Unit(unit_id=u.unit_id, scenario=u.scenario, columns=u.columns,
                    seed=u.seed, start_day=u.start_day) for u in units],
        roles=BRIDGE_ROLES)
    scenarios = {u.scenario for u in dataset.units}
    if len(scenarios) == 1:
        split_units(dataset, {"kind": "unit-holdout"})
    else:
        split_units(dataset, {"kind": "scenario", "train": "A", "ood": "B",
                              "id_test_count": int(s["id_test_count"])})
    for unit in dataset.units:
        save_unit(out_dir, unit, split=unit.split)
        print(f"simulate: unit {unit.unit_id} ({unit.split}) "
              f"{len(unit)} records")
    _write_snapshot(out_dir, cfg, "simulate")
    return 0


# -------------------------------------------------------------- train-hcde

_VARIANT_FLAGS = {
    "full": {},
    "no-mc": {"with_monotonic": False},
    "no-pt": {"with_path_transform": False},
}


def _apply_variant(cfg: dict, variant: str) -> dict:
    cfg = copy.deepcopy(cfg)
    for key, value in _VARIANT_FLAGS[variant].items():
        cfg["model"][key] = value
    return cfg


def _train_hcde_one(cfg: dict, dataset: TrajectoryDataset, seed: int,
                    out_dir: Path, tag: str = "hcde"):
    window = _window_config(cfg)
    samples = _train_split_samples(dataset, window)
    mcfg = _model_config(cfg, n_states=len(dataset.roles.states),
                         n_inputs=len(dataset.roles.inputs))
    model = hcde_mod.build_model(mcfg, seed=seed)
    result = hcde_mod.train_hcde(model, samples, _train_config(cfg), seed=seed)
    meta = {
        "kind": "hcde",
        "seed": seed,
        "model": cfg["model"],
        "window": cfg["window"],
        "n_states": len(dataset.roles.states),
        "n_inputs": len(dataset.roles.inputs),
        "scaler": dataset.scaler.to_dict(),
        "best_val": result.best_val,
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(out_dir / f"{tag}_seed{seed}.json",
                    hcde_mod.model_parameters(result.model), meta=meta)
    eval_mod.write_rows_csv(
        out_dir / f"{tag}_seed{seed}_log.csv",
        ["epoch", "train_loss", "val_loss", "lr", "mean_slow_nfe"],
        [[r["epoch"], r["train_loss"], r["val_loss"], r["lr"],
          r["mean_slow_nfe"]] for r in result.log])
    return result


def cmd_train_hcde(cfg: dict, data_dir: Path, out_dir: Path, force: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["hcde_seed*.json"], force)
    dataset = _prepared_dataset(data_dir)
    for seed in cfg["seeds"]:
        result = _train_hcde_one(cfg, dataset, int(seed), out_dir)
        print(f"train-hcde: seed {seed} best val loss "
              f"{result.best_val:.6f} (epoch {result.best_epoch})")
    _write_snapshot(out_dir, cfg, "train-hcde")
    return 0


def _load_hcde_checkpoint(path: Path):
    params, meta = load_checkpoint(path)
    cfg_stub = {"model": meta["model"], "window": meta["window"]}
    mcfg = _model_config({**cfg_stub}, n_states=meta["n_states"],
                         n_inputs=meta["n_inputs"])
    model = hcde_mod.build_model(mcfg, seed=int(meta["seed"]))
    model = hcde_mod.replace_parameters(model, params)
    return model, meta


# ---------------------------------------------------------- train-residual

def cmd_train_residual(cfg: dict, data_dir: Path, out_dir: Path,
                       force: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["residual_seed*.json"], force)
    dataset = _prepared_dataset(data_dir)
    rcfg = _residual_config(cfg)
    for seed in cfg["seeds"]:
        model = baseline_mod.train_residual(
            dataset.units_in("train"), rcfg, dataset.roles, seed=int(seed),
            scaler=dataset.scaler)
        meta = {
            "kind": "residual",
            "seed": int(seed),
            "residual": cfg["residual"],
            "n_states": model.n_states,
            "n_inputs": model.n_inputs,
            "scaler": dataset.scaler.to_dict(),
            # batch-norm running statistics are solver state, not parameters
            "bn_running": [
                None if bn is None else {"mean": bn.running_mean.tolist(),
                                         "var": bn.running_var.tolist()}
                for bn in (model.net.batch_norms or [])
            ],
        }
        params = dict(model.net.parameters())
        save_checkpoint(out_dir / f"residual_seed{seed}.json", params, meta=meta)
        print(f"train-residual: seed {seed} done")
    _write_snapshot(out_dir, cfg, "train-residual")
    return 0


def _load_residual_checkpoint(path: Path):
    params, meta = load_checkpoint(path)
    rcfg = baseline_mod.ResidualConfig(
        window=meta["residual"]["window"],
        healthy_len=meta["residual"]["healthy_len"],
        hidden=tuple(meta["residual"]["hidden"]),
        dropout=meta["residual"]["dropout"],
        batch_norm=meta["residual"]["batch_norm"],
        steady_state=meta["residual"]["steady_state"])
    rng = np.random.default_rng(0)
    widths = [baseline_mod.residual_input_dim(rcfg, meta["n_states"],
                                              meta["n_inputs"]),
              *rcfg.hidden, meta["n_states"]]
    net = init_mlp(widths, ["silu"] * len(rcfg.hidden) + ["identity"], rng,
                   batch_norm=rcfg.batch_norm, dropout=rcfg.dropout)
    net = net.with_parameters(params)
    for i, rec in enumerate(meta.get("bn_running", [])):
        if rec is not None and net.batch_norms and net.batch_norms[i]:
            net.batch_norms[i].running_mean = np.asarray(rec["mean"])
            net.batch_norms[i].running_var = np.asarray(rec["var"])
    model = baseline_mod.ResidualModel(cfg=rcfg, net=net,
                                       n_states=meta["n_states"],
                                       n_inputs=meta["n_inputs"])
    return model, meta


# ------------------------------------------------------------------ evaluate

def _truth_at_anchors(dataset: TrajectoryDataset, series) -> np.ndarray:
    unit = next(u for u in dataset.units if u.unit_id == series.unit_id)
    truth_col = dataset.roles.truth
    return unit.columns[truth_col][series.anchor_indices]


def _hcde_series_by_unit(model, dataset: TrajectoryDataset,
                         window: WindowConfig) -> dict:
    out = {}
    for unit in dataset.units:
        samples = _unit_samples(dataset, unit, window)
        if not samples:
            continue
        out[unit.unit_id] = hcde_mod.infer_degradation(model, samples)
    return out


def _residual_series_by_unit(model, dataset: TrajectoryDataset) -> dict:
    out = {}
    for unit in dataset.units:
        series = baseline_mod.residual_infer(model, unit, dataset.roles,
                                             scaler=dataset.scaler)
        out[unit.unit_id] = hcde_mod.DegradationSeries(
            unit_id=series.unit_id,
            anchor_indices=series.indices,
            anchor_times=series.times,
            embeddings=series.residuals,
            slow_nfe=0.0)
    return out


def _pooled(series_by_unit: dict, dataset: TrajectoryDataset, split: str):
    emb, truth = [], []
    for unit in dataset.units_in(split):
        series = series_by_unit.get(unit.unit_id)
        if series is None:
            continue
        emb.append(series.embeddings)
        truth.append(_truth_at_anchors(dataset, series))
    if not emb:
        return None, None
    return np.concatenate(emb), np.concatenate(truth)


def _score_method_seed(series_by_unit: dict, dataset: TrajectoryDataset):
    """Alignment/monotonicity/NFE record for one (method, seed) pair."""
    train_emb, train_truth = _pooled(series_by_unit, dataset, "train")
    record = {"alignment": {}, "monotonicity": {}, "nfe": {}}
    pca1 = eval_mod.pca_fit(train_emb, 1)
    for split in ("id-test", "ood-test"):
        test_emb, test_truth = _pooled(series_by_unit, dataset, split)
        if test_emb is None:
            continue
        record["alignment"][split] = {
            "all-dims": eval_mod.alignment_score(train_emb, train_truth,
                                                 test_emb, test_truth,
                                                 mode="all-dims"),
            "pc1": eval_mod.alignment_score(train_emb, train_truth,
                                            test_emb, test_truth, mode="pc1"),
        }
        fracs, nfes = [], []
        for unit in dataset.units_in(split):
            series = series_by_unit.get(unit.unit_id)
            if series is None or len(series.anchor_times) < 2:
                continue
            pc1_series = pca1.transform(series.embeddings)[:, 0]
            fracs.append(eval_mod.monotonicity_fraction(pc1_series))
            nfes.append(series.slow_nfe)
        if fracs:
            record["monotonicity"][split] = float(np.mean(fracs))
            record["nfe"][split] = float(np.mean(nfes))
    return record


def _aggregate_records(records: list) -> dict:
    """Per-seed records -> mean/std summary keyed by split and metric."""
    summary = {"alignment": {}, "monotonicity": {}, "nfe": {}}
    splits = sorted({s for r in records for s in r["alignment"]})
    for split in splits:
        summary["alignment"][split] = {
            mode: eval_mod.summarize_seed_scores(
                [r["alignment"][split][mode] for r in records
                 if split in r["alignment"]])
            for mode in ("all-dims", "pc1")
        }
    for key in ("monotonicity", "nfe"):
        for split in sorted({s for r in records for s in r[key]}):
            summary[key][split] = eval_mod.summarize_seed_scores(
                [r[key][split] for r in records if split in r[key]])
    return summary


def _export_transformed_path(model, dataset, window, out_path) -> None:
    """Raw slow channels vs the first PCA component of the learned drivers."""
    test_units = dataset.units_in("ood-test") or dataset.units_in("id-test")
    if not test_units or model.cfg.with_path_transform is False:
        return
    samples = _unit_samples(dataset, test_units[0], window)
    if not samples:
        return
    sample = samples[len(samples) // 2]
    batch = hcde_mod.make_batch([sample])
    y_path = hcde_mod.transform_path(model, batch)
    feats = y_path.knots.data[0, :, :-1]  # drop the time channel
    pca = eval_mod.pca_fit(feats, 1)
    pc1 = pca.transform(feats)[:, 0]
    taus = hcde_mod.slow_pseudo_times(window.w_s)
    header = (["tau"]
              + [f"x_{c}" for c in dataset.roles.states]
              + [f"u_{c}" for c in dataset.roles.inputs]
              + ["transformed_pc1"])
    rows = []
    for i, tau in enumerate(taus):
        rows.append([tau, *sample.slow_x[i], *sample.slow_u[i], pc1[i]])
    eval_mod.write_rows_csv(out_path, header, rows)


def _export_slow_trajectories(model, dataset, window, out_path,
                              max_samples: int = 12) -> None:
    """d(tau) trajectories (PC1 of slow states) for a spread of samples."""
    test_units = dataset.units_in("ood-test") or dataset.units_in("id-test")
    if not test_units:
        return
    samples = _unit_samples(dataset, test_units[0], window)
    if not samples:
        return
    step = max(1, len(samples) // max_samples)
    picked = samples[::step][:max_samples]
    batch = hcde_mod.make_batch(picked)
    y_path = hcde_mod.transform_path(model, batch)
    slow_states, _ = hcde_mod.solve_slow_cde(model, y_path, batch)
    states = np.stack([s.data for s in slow_states], axis=1)  # (B, w_s, m)
    flat = states.reshape(-1, states.shape[2])
    pca = eval_mod.pca_fit(flat, 1)
    taus = hcde_mod.slow_pseudo_times(window.w_s)
    rows = []
    truth = _truth_at_anchors(
        dataset, hcde_mod.DegradationSeries(
            unit_id=picked[0].unit_id,
            anchor_indices=np.asarray([s.anchor_index for s in picked]),
            anchor_times=np.asarray([s.anchor_time for s in picked]),
            embeddings=states[:, -1, :], slow_nfe=0.0))
    for b, sample in enumerate(picked):
        pc1 = pca.transform(states[b])[:, 0]
        for i, tau in enumerate(taus):
            rows.append([sample.anchor_index, tau, pc1[i], truth[b]])
    eval_mod.write_rows_csv(out_path,
                            ["anchor_index", "tau", "pc1", "final_d_true"],
                            rows)


def cmd_evaluate(cfg: dict, data_dir: Path, models_dir: Path, out_dir: Path,
                 force: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["report.json"], force)
    dataset = _prepared_dataset(data_dir)
    window = _window_config(cfg)
    k = int(cfg["evaluate"]["pca_components"])
    report = {"methods": {}, "seeds": {}}

    hcde_paths = sorted(models_dir.glob("hcde_seed*.json"))
    records = []
    for i, path in enumerate(hcde_paths):
        model, meta = _load_hcde_checkpoint(path)
        window_ck = WindowConfig(**meta["window"])
        series = _hcde_series_by_unit(model, dataset, window_ck)
        records.append(_score_method_seed(series, dataset))
        seed = meta["seed"]
        eval_mod.write_embeddings_csv(
            out_dir / f"embeddings_hcde_seed{seed}.csv",
            [series[u.unit_id] for u in dataset.units if u.unit_id in series])
        if i == 0:
            train_emb, _ = _pooled(series, dataset, "train")
            pca = eval_mod.pca_fit(train_emb, min(k, train_emb.shape[1]))
            eval_mod.write_pc_scatter_csv(
                out_dir / "pc_scatter_hcde.csv",
                [series[u.unit_id] for u in dataset.units
                 if u.unit_id in series],
                pca, lambda s: _truth_at_anchors(dataset, s))
            report["pca_explained_ratios"] = [
                float(r) for r in pca.explained_ratios]
            _export_transformed_path(model, dataset, window_ck,
                                     out_dir / "transformed_path.csv")
            _export_slow_trajectories(model, dataset, window_ck,
                                      out_dir / "slow_trajectories.csv")
    if records:
        report["methods"]["hcde"] = _aggregate_records(records)
        report["seeds"]["hcde"] = [
            int(load_checkpoint(p)[1]["seed"]) for p in hcde_paths]

    residual_paths = sorted(models_dir.glob("residual_seed*.json"))
    records = []
    for i, path in enumerate(residual_paths):
        model, meta = _load_residual_checkpoint(path)
        series = _residual_series_by_unit(model, dataset)
        records.append(_score_method_seed(series, dataset))
        seed = meta["seed"]
        eval_mod.write_embeddings_csv(
            out_dir / f"embeddings_residual_seed{seed}.csv",
            [series[u.unit_id] for u in dataset.units if u.unit_id in series])
        if i == 0:
            train_emb, _ = _pooled(series, dataset, "train")
            pca = eval_mod.pca_fit(train_emb, min(k, train_emb.shape[1]))
            eval_mod.write_pc_scatter_csv(
                out_dir / "pc_scatter_residual.csv",
                [series[u.unit_id] for u in dataset.units
                 if u.unit_id in series],
                pca, lambda s: _truth_at_anchors(dataset, s))
    if records:
        report["methods"]["residual"] = _aggregate_records(records)
        report["seeds"]["residual"] = [
            int(load_checkpoint(p)[1]["seed"]) for p in residual_paths]

    if not report["methods"]:
        raise ConfigError(f"no checkpoints found under {models_dir}")
    eval_mod.write_report_json(out_dir / "report.json", report)
    _write_snapshot(out_dir, cfg, "evaluate")
    for method, summary in report["methods"].items():
        for split, modes in summary["alignment"].items():
            print(f"evaluate: {method} {split} all-dims "
                  f"R^2 = {modes['all-dims']['mean']:.4f} "
                  f"+/- {modes['all-dims']['std']:.4f}")
    return 0


# -------------------------------------------------------------------- ablate

def cmd_ablate(cfg: dict, data_dir: Path, out_dir: Path, force: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["ablation_report.json"], force)
    dataset = _prepared_dataset(data_dir)
    report = {"variants": {}}
    rows = []
    for variant in cfg["ablate"]["variants"]:
        if variant not in _VARIANT_FLAGS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        vcfg = _apply_variant(cfg, variant)
        vdir = out_dir / variant.replace("-", "_")
        vdir.mkdir(parents=True, exist_ok=True)
        records = []
        for seed in cfg["seeds"]:
            result = _train_hcde_one(vcfg, dataset, int(seed), vdir, tag="hcde")
            window = _window_config(vcfg)
            series = _hcde_series_by_unit(result.model, dataset, window)
            records.append(_score_method_seed(series, dataset))
            print(f"ablate: {variant} seed {seed} done "
                  f"(best val {result.best_val:.6f})")
        summary = _aggregate_records(records)
        report["variants"][variant] = {
            "flags": {
                "with_monotonic": vcfg["model"]["with_monotonic"],
                "with_path_transform": vcfg["model"]["with_path_transform"],
            },
            "summary": summary,
            "per_seed": records,
        }
        _write_snapshot(vdir, vcfg, f"ablate:{variant}")
        for split, modes in summary["alignment"].items():
            rows.append([variant, split,
                         modes["all-dims"]["mean"], modes["all-dims"]["std"],
                         modes["pc1"]["mean"], modes["pc1"]["std"],
                         summary["nfe"].get(split, {}).get("mean", math.nan),
                         summary["monotonicity"].get(split, {}).get(
                             "mean", math.nan)])
    eval_mod.write_rows_csv(
        out_dir / "ablation_summary.csv",
        ["variant", "split", "r2_all_mean", "r2_all_std", "r2_pc1_mean",
         "r2_pc1_std", "mean_slow_nfe", "monotonicity_fraction"], rows)
    eval_mod.write_report_json(out_dir / "ablation_report.json", report)
    _write_snapshot(out_dir, cfg, "ablate")
    return 0


# ------------------------------------------------------------ sweep-slow-step

def cmd_sweep(cfg: dict, data_dir: Path, out_dir: Path, force: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _ensure_clean(out_dir, ["sweep.csv"], force)
    dataset = _prepared_dataset(data_dir)
    rows = []
    report = {"dt_s": {}}
    for dt_s in cfg["sweep"]["dt_s_values"]:
        scfg = copy.deepcopy(cfg)
        scfg["window"]["dt_s"] = int(dt_s)
        scfg["window"]["dt_f"] = 1  # the sweep varies the slow step only
        sdir = out_dir / f"dts_{dt_s}"
        sdir.mkdir(parents=True, exist_ok=True)
        records = []
        for seed in cfg["sweep"]["seeds"]:
            result = _train_hcde_one(scfg, dataset, int(seed), sdir, tag="hcde")
            window = _window_config(scfg)
            series = _hcde_series_by_unit(result.model, dataset, window)
            records.append(_score_method_seed(series, dataset))
            print(f"sweep-slow-step: dt_s={dt_s} seed {seed} done")
        summary = _aggregate_records(records)
        report["dt_s"][str(dt_s)] = summary
        _write_snapshot(sdir, scfg, f"sweep-slow-step:{dt_s}")
        for split, modes in summary["alignment"].items():
            rows.append([dt_s, split,
                         modes["all-dims"]["mean"], modes["all-dims"]["std"],
                         summary["nfe"].get(split, {}).get("mean", math.nan)])
    eval_mod.write_rows_csv(
        out_dir / "sweep.csv",
        ["dt_s", "split", "r2_all_mean", "r2_all_std", "mean_slow_nfe"], rows)
    eval_mod.write_report_json(out_dir / "sweep_report.json", report)
    _write_snapshot(out_dir, cfg, "sweep-slow-step")
    return 0


# ---------------------------------------------------------------------- main

def dispatch(argv: list) -> int:
    parser = argparse.ArgumentParser(
        prog="hcdelab",
        description="simulate, train, and evaluate slow-fast degradation models")
    parser.add_argument("command",
                        choices=["simulate", "train-hcde", "train-residual",
                                 "evaluate", "ablate", "sweep-slow-step"])
    parser.add_argument("--config", default=None, help="YAML config path")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--data", default=None,
                        help="dataset directory (defaults to config data_dir)")
    parser.add_argument("--models", default=None,
                        help="checkpoint directory for evaluate")
    parser.add_argument("--seed", type=int, default=None,
                        help="restrict to a single seed")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="dotted-key config override (repeatable)")
    args = parser.parse_args(argv)

    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
        cfg["sweep"]["seeds"] = [args.seed]
    out_dir = Path(args.out or cfg["out_dir"])
    data_dir = Path(args.data or cfg["data_dir"])

    if args.command == "simulate":
        return cmd_simulate(cfg, out_dir, args.force)
    if args.command == "train-hcde":
        return cmd_train_hcde(cfg, data_dir, out_dir, args.force)
    if args.command == "train-residual":
        return cmd_train_residual(cfg, data_dir, out_dir, args.force)
    if args.command == "evaluate":
        models_dir = Path(args.models or out_dir)
        return cmd_evaluate(cfg, data_dir, models_dir, out_dir, args.force)
    if args.command == "ablate":
        return cmd_ablate(cfg, data_dir, out_dir, args.force)
    if args.command == "sweep-slow-step":
        return cmd_sweep(cfg, data_dir, out_dir, args.force)
    raise AssertionError(f"unhandled command {args.command}")


def main() -> None:
    try:
        sys.exit(dispatch(sys.argv[1:]))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
