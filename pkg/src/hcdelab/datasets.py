"""Trajectory datasets: persistence, splits, standardization, windowing.

A dataset is a list of units; each unit is a table of time-aligned columns
plus (scenario, split) metadata. Channel roles declare which columns are
observable states, which are control inputs, and which single column is the
ground-truth degradation. The truth column never enters the model-facing
sample structures built here; only the evaluation stack reads it.

Multiscale windowing (the heart of the slow/fast sampling scheme): one
sample anchored at record index T carries a long coarse sequence of w_s
points spaced dt_s ending at T, a short dense sequence of w_f points spaced
dt_f also ending at T, and the next-step target at T + dt_f.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .beamsim import UNIT_COLUMNS, SimulatedUnit

__all__ = [
    "ChannelRoles",
    "Scaler",
    "SlowFastSample",
    "TrajectoryDataset",
    "Unit",
    "WindowConfig",
    "BRIDGE_ROLES",
    "ingest_tabular",
    "load_dataset",
    "sample_multiscale_windows",
    "save_unit",
    "split_units",
    "validation_indices",
    "window_anchor_indices",
]

SPLITS = ("train", "id-test", "ood-test")


@dataclass(frozen=True)
class ChannelRoles:
    """Column-name roles; truth is reachable only by evaluation code."""

    states: tuple
    inputs: tuple
    truth: str | None = None
    time: str = "t_s"


BRIDGE_ROLES = ChannelRoles(
    states=("v_quarter", "v_third", "v_mid"),
    inputs=("q", "T_ambient"),
    truth="D_true",
    time="t_s",
)


@dataclass
class Unit:
    unit_id: str
    scenario: str
    columns: dict
    split: str | None = None
    seed: int | None = None
    start_day: int | None = None

    def __len__(self) -> int:
        return len(next(iter(self.columns.values())))


@dataclass
class Scaler:
    """Per-channel standardization fitted on training units only."""

    mean: dict
    std: dict

    @classmethod
    def fit(cls, units, channels) -> "Scaler":
        mean, std = {}, {}
        for ch in channels:
            stacked = np.concatenate([u.columns[ch] for u in units])
            mean[ch] = float(stacked.mean())
            s = float(stacked.std())
            std[ch] = s if s > 1e-12 else 1.0
        return cls(mean=mean, std=std)

    def transform(self, unit: Unit) -> Unit:
        cols = dict(unit.columns)
        for ch, mu in self.mean.items():
            cols[ch] = (unit.columns[ch] - mu) / self.std[ch]
        return replace(unit, columns=cols)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, blob: dict) -> "Scaler":
        return cls(mean=dict(blob["mean"]), std=dict(blob["std"]))


@dataclass
class TrajectoryDataset:
    units: list
    roles: ChannelRoles
    scaler: Scaler | None = None

    def units_in(self, split: str) -> list:
        return [u for u in self.units if u.split == split]

    def fit_scaler(self) -> None:
        """Standardize states+inputs on training units; truth stays untouched."""
        train = self.units_in("train")
        if not train:
            raise ValueError("cannot fit a scaler without training units")
        channels = tuple(self.roles.states) + tuple(self.roles.inputs)
        self.scaler = Scaler.fit(train, channels)

    def standardized(self, unit: Unit) -> Unit:
        if self.scaler is None:
            raise ValueError("scaler not fitted")
        return self.scaler.transform(unit)


# ------------------------------------------------------------- persistence

def _format_float(x: float) -> str:
    return repr(float(x))


def save_unit(out_dir, unit: Unit | SimulatedUnit, split: str | None = None,
              columns: tuple = UNIT_COLUMNS) -> Path:
    """One CSV per unit plus a JSON sidecar manifest; byte-deterministic.

    Floats are written with repr (shortest round-trip), so identical inputs
    reproduce identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"unit_{unit.unit_id}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        data = [unit.columns[c] for c in columns]
        for row in zip(*data):
            writer.writerow([_format_float(v) for v in row])
    manifest = {
        "unit_id": unit.unit_id,
        "scenario": unit.scenario,
        "seed": unit.seed,
        "start_day": unit.start_day,
        "split": split if split is not None else getattr(unit, "split", None),
        "n_records": len(unit.columns[columns[0]]),
        "columns": list(columns),
    }
    with open(out_dir / f"unit_{unit.unit_id}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path


def _read_csv_columns(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {name: [] for name in header}
        for row in reader:
            for name, v in zip(header, row):
                cols[name].append(float(v))
    return {name: np.asarray(vals) for name, vals in cols.items()}


def load_dataset(data_dir, roles: ChannelRoles = BRIDGE_ROLES) -> TrajectoryDataset:
    """Load every unit_*.json manifest (sorted by filename) under data_dir."""
    data_dir = Path(data_dir)
    manifests = sorted(data_dir.glob("unit_*.json"))
    if not manifests:
        raise FileNotFoundError(f"no unit manifests found in {data_dir}")
    units = []
    for mpath in manifests:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
        cols = _read_csv_columns(data_dir / f"unit_{manifest['unit_id']}.csv")
        units.append(Unit(
            unit_id=manifest["unit_id"],
            scenario=manifest["scenario"],
            columns=cols,
            split=manifest.get("split"),
            seed=manifest.get("seed"),
            start_day=manifest.get("start_day"),
        ))
    return TrajectoryDataset(units=units, roles=roles)


def ingest_tabular(path, roles: ChannelRoles, downsample: int = 1,
                   unit_id: str | None = None, scenario: str = "external") -> Unit:
    """Generic adapter for external tabular trajectories.

    Maps CSV columns onto roles, optionally decimating by an integer factor.
    Columns may appear in any order; only role-mapped columns are kept.
    Time must be strictly increasing.
    """
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    cols = _read_csv_columns(path)
    wanted = [roles.time, *roles.states, *roles.inputs]
    if roles.truth:
        wanted.append(roles.truth)
    missing = [c for c in wanted if c not in cols]
    if missing:
        raise ValueError(f"missing required columns: {missing}")
    t = cols[roles.time]
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("time column must be strictly increasing")
    out = {c: cols[c][::downsample] for c in wanted}
    return Unit(unit_id=unit_id or Path(path).stem, scenario=scenario, columns=out)


# ------------------------------------------------------------------ splits

def split_units(dataset: TrajectoryDataset, policy: dict) -> None:
    """Assign each unit a split role in place; deterministic given inputs.

    Policies:
      {"kind": "scenario", "train": "A", "ood": "B", "id_test_count": k}
          scenario-`train` units: all but the last k become training, the
          last k the in-distribution test; scenario-`ood` units are all
          out-of-distribution test.
      {"kind": "unit-holdout"}
          fallback when every unit shares one scenario: last unit is the
          in-distribution test, the rest train.
    """
    for u in dataset.units:
        if not u.scenario:
            raise ValueError(f"unit {u.unit_id} has no scenario tag")
    kind = policy.get("kind", "scenario")
    if kind == "unit-holdout":
        for u in dataset.units:
            u.split = "train"
        dataset.units[-1].split = "id-test"
        return
    if kind != "scenario":
        raise ValueError(f"unknown split policy {kind!r}")
    train_scn = policy.get("train", "A")
    ood_scn = policy.get("ood", "B")
    k_id = int(policy.get("id_test_count", 1))
    train_units = [u for u in dataset.units if u.scenario == train_scn]
    if k_id >= len(train_units):
        raise ValueError("id_test_count leaves no training units")
    for u in dataset.units:
        if u.scenario == ood_scn:
            u.split = "ood-test"
    cut = len(train_units) - k_id
    for u in train_units[:cut]:
        u.split = "train"
    for u in train_units[cut:]:
        u.split = "id-test"


def validation_indices(n_samples: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic window-level validation subset (sorted indices)."""
    rng = np.random.default_rng(seed)
    n_val = int(round(n_samples * fraction))
    return np.sort(rng.permutation(n_samples)[:n_val])


# --------------------------------------------------------------- windowing

@dataclass(frozen=True)
class WindowConfig:
    """Two-rate sliding-window scheme; both sequences end at the anchor."""

    w_s: int = 100
    dt_s: int = 12
    w_f: int = 11
    dt_f: int = 1
    stride: int = 2

    def __post_init__(self):
        if min(self.w_s, self.dt_s, self.w_f, self.dt_f, self.stride) < 1:
            raise ValueError("window parameters must be positive integers")

    @property
    def min_length(self) -> int:
        # room for the slow span plus the next-step target
        return (self.w_s - 1) * self.dt_s + 1 + self.dt_f


@dataclass
class SlowFastSample:
    """Model-facing sample: standardized sequences, no truth channel.

    Index arrays refer to records of the source unit; pseudo-times for the
    solver are attached downstream by the model, not here.
    """

    unit_id: str
    anchor_index: int
    anchor_time: float
    slow_x: np.ndarray  # (w_s, n_states)
    slow_u: np.ndarray  # (w_s, n_inputs)
    fast_x: np.ndarray  # (w_f, n_states)
    fast_u: np.ndarray  # (w_f, n_inputs)
    target_x: np.ndarray  # (n_states,) at anchor + dt_f


def window_anchor_indices(n_records: int, cfg: WindowConfig) -> np.ndarray:
    """Valid anchors: slow window fits behind, next-step target fits ahead."""
    first = (cfg.w_s - 1) * cfg.dt_s
    last = n_records - 1 - cfg.dt_f
    if last < first:
        return np.empty(0, dtype=int)
    return np.arange(first, last + 1, cfg.stride)


def sample_multiscale_windows(unit: Unit, cfg: WindowConfig,
                              roles: ChannelRoles,
                              scaler: Scaler | None = None) -> list:
    """All two-rate windows of one unit at the configured stride.

    Units too short for a single window are skipped with a warning (empty
    list). Anchors whose fast window would underrun the record start -
    possible only when w_f dt_f exceeds w_s dt_s - are dropped.
    """
    n = len(unit)
    anchors = window_anchor_indices(n, cfg)
    if anchors.size == 0:
        warnings.warn(f"unit {unit.unit_id}: trajectory of length {n} is too "
                      f"short for the window configuration; skipped")
        return []
    source = scaler.transform(unit) if scaler is not None else unit
    x = np.column_stack([source.columns[c] for c in roles.states])
    u = np.column_stack([source.columns[c] for c in roles.inputs])
    t = source.columns[roles.time]

    samples = []
    for anchor in anchors:
        slow_idx = anchor - cfg.dt_s * np.arange(cfg.w_s - 1, -1, -1)
        fast_idx = anchor - cfg.dt_f * np.arange(cfg.w_f - 1, -1, -1)
        if fast_idx[0] < 0:
            continue
        samples.append(SlowFastSample(
            unit_id=unit.unit_id,
            anchor_index=int(anchor),
            anchor_time=float(t[anchor]),
            slow_x=x[slow_idx],
            slow_u=u[slow_idx],
            fast_x=x[fast_idx],
            fast_u=u[fast_idx],
            target_x=x[anchor + cfg.dt_f],
        ))
    return samples
