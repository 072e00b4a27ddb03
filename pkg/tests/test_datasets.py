import dataclasses
import warnings

import numpy as np
import pytest

from hcdelab.beamsim import BeamModel, SimConfig, run_to_failure
from hcdelab.datasets import (
    BRIDGE_ROLES,
    ChannelRoles,
    Scaler,
    SlowFastSample,
    TrajectoryDataset,
    Unit,
    WindowConfig,
    ingest_tabular,
    load_dataset,
    sample_multiscale_windows,
    save_unit,
    split_units,
    validation_indices,
    window_anchor_indices,
)


def _toy_unit(uid="u0", scenario="A", n=400, seed=0, truth_sentinel=None):
    rng = np.random.default_rng(seed)
    cols = {
        "t_s": 600.0 * np.arange(1, n + 1),
        "v_quarter": rng.normal(size=n),
        "v_third": rng.normal(size=n),
        "v_mid": rng.normal(size=n),
        "q": rng.uniform(10, 300, size=n),
        "T_ambient": rng.normal(10, 5, size=n),
        "D_true": (np.full(n, truth_sentinel) if truth_sentinel is not None
                   else np.linspace(0, 0.3, n)),
    }
    return Unit(unit_id=uid, scenario=scenario, columns=cols, seed=seed)


# ----------------------------------------------------------- window counts

def test_spec_window_count_1300():
    cfg = WindowConfig(w_s=100, dt_s=12, w_f=11, dt_f=1, stride=2)
    anchors = window_anchor_indices(1300, cfg)
    assert anchors[0] == 1188
    assert anchors[-1] == 1298
    assert anchors.size == 56


def test_spec_window_boundary_single_sample():
    cfg = WindowConfig(w_s=100, dt_s=12, w_f=11, dt_f=1, stride=2)
    assert cfg.min_length == 1190
    assert window_anchor_indices(1190, cfg).size == 1
    assert window_anchor_indices(1189, cfg).size == 0


def test_degenerate_single_point_windows():
    cfg = WindowConfig(w_s=1, dt_s=1, w_f=1, dt_f=1, stride=1)
    unit = _toy_unit(n=5)
    samples = sample_multiscale_windows(unit, cfg, BRIDGE_ROLES)
    assert len(samples) == 4  # anchors 0..3, target exists for each
    s = samples[0]
    assert s.slow_x.shape == (1, 3)
    assert s.fast_x.shape == (1, 3)
    np.testing.assert_array_equal(
        s.target_x, np.column_stack(
            [unit.columns[c] for c in BRIDGE_ROLES.states])[1])


def test_window_count_matches_bruteforce_enumeration(rng):
    for _ in range(50):
        n = int(rng.integers(5, 400))
        w_s = int(rng.integers(1, 12))
        dt_s = int(rng.integers(1, 9))
        stride = int(rng.integers(1, 7))
        cfg = WindowConfig(w_s=w_s, dt_s=dt_s, w_f=1, dt_f=1, stride=stride)
        # brute force: anchor valid iff slow window fits and target exists
        brute = [a for a in range(0, n, 1)
                 if a - (w_s - 1) * dt_s >= 0 and a + 1 <= n - 1]
        brute = brute[:: 1]
        first = (w_s - 1) * dt_s
        brute = [a for a in brute if (a - first) % stride == 0]
        assert window_anchor_indices(n, cfg).tolist() == brute


def test_too_short_unit_warns_and_skips():
    cfg = WindowConfig(w_s=100, dt_s=12, w_f=11, dt_f=1, stride=2)
    unit = _toy_unit(n=50)
    with pytest.warns(UserWarning, match="too short"):
        samples = sample_multiscale_windows(unit, cfg, BRIDGE_ROLES)
    assert samples == []


def test_sample_sequences_end_at_anchor():
    cfg = WindowConfig(w_s=8, dt_s=5, w_f=4, dt_f=2, stride=3)
    unit = _toy_unit(n=120)
    x = np.column_stack([unit.columns[c] for c in BRIDGE_ROLES.states])
    for s in sample_multiscale_windows(unit, cfg, BRIDGE_ROLES):
        np.testing.assert_array_equal(s.slow_x[-1], x[s.anchor_index])
        np.testing.assert_array_equal(s.fast_x[-1], x[s.anchor_index])
        np.testing.assert_array_equal(s.target_x, x[s.anchor_index + cfg.dt_f])


# ------------------------------------------------------------ leakage guard

def test_samples_never_carry_truth_channel():
    sentinel = 777.777
    unit = _toy_unit(truth_sentinel=sentinel)
    cfg = WindowConfig(w_s=6, dt_s=4, w_f=3, dt_f=1, stride=2)
    samples = sample_multiscale_windows(unit, cfg, BRIDGE_ROLES)
    assert samples
    field_names = {f.name for f in dataclasses.fields(SlowFastSample)}
    assert "truth" not in field_names and "d_true" not in field_names
    for s in samples:
        for arr in (s.slow_x, s.slow_u, s.fast_x, s.fast_u, s.target_x):
            assert not np.any(arr == sentinel)


def test_scaler_never_touches_truth():
    units = [_toy_unit(uid="a"), _toy_unit(uid="b", seed=1)]
    scaler = Scaler.fit(units, ("v_mid", "q"))
    out = scaler.transform(units[0])
    np.testing.assert_array_equal(out.columns["D_true"],
                                  units[0].columns["D_true"])
    assert abs(out.columns["v_mid"].mean()) < 0.2


# ------------------------------------------------------------------ splits

def _units_for_split():
    units = [_toy_unit(uid=f"A{i}", scenario="A", seed=i) for i in range(6)]
    units += [_toy_unit(uid=f"B{i}", scenario="B", seed=10 + i) for i in range(6)]
    return TrajectoryDataset(units=units, roles=BRIDGE_ROLES)


def test_paper_split_5_1_6():
    ds = _units_for_split()
    split_units(ds, {"kind": "scenario", "train": "A", "ood": "B",
                     "id_test_count": 1})
    assert len(ds.units_in("train")) == 5
    assert len(ds.units_in("id-test")) == 1
    assert len(ds.units_in("ood-test")) == 6
    assert ds.units_in("id-test")[0].unit_id == "A5"


def test_unit_holdout_fallback():
    units = [_toy_unit(uid=f"A{i}", scenario="A", seed=i) for i in range(3)]
    ds = TrajectoryDataset(units=units, roles=BRIDGE_ROLES)
    split_units(ds, {"kind": "unit-holdout"})
    assert [u.split for u in ds.units] == ["train", "train", "id-test"]


def test_split_requires_scenarios():
    ds = _units_for_split()
    ds.units[0].scenario = ""
    with pytest.raises(ValueError):
        split_units(ds, {"kind": "scenario"})


def test_validation_indices_deterministic():
    a = validation_indices(100, 0.2, seed=5)
    b = validation_indices(100, 0.2, seed=5)
    assert np.array_equal(a, b)
    assert a.size == 20
    c = validation_indices(100, 0.2, seed=6)
    assert not np.array_equal(a, c)


# ------------------------------------------------------- persistence + io

def test_unit_roundtrip_identity(tmp_path):
    model = BeamModel()
    sim = SimConfig(beta_damage=3.2e-4 * 40, max_days=10)
    unit = run_to_failure(model, "A", seed=3, sim=sim, unit_id="A1")
    save_unit(tmp_path, unit, split="train")
    ds = load_dataset(tmp_path)
    assert len(ds.units) == 1
    loaded = ds.units[0]
    assert loaded.split == "train"
    assert loaded.scenario == "A"
    for col, vals in unit.columns.items():
        assert np.array_equal(loaded.columns[col], vals), col


def test_save_unit_byte_identical(tmp_path):
    unit = _toy_unit()
    p1 = save_unit(tmp_path / "a", unit)
    p2 = save_unit(tmp_path / "b", unit)
    assert p1.read_bytes() == p2.read_bytes()


def test_ingest_roundtrip_and_downsample(tmp_path):
    unit = _toy_unit(n=100)
    save_unit(tmp_path, unit)
    path = tmp_path / "unit_u0.csv"
    ingested = ingest_tabular(path, BRIDGE_ROLES, unit_id="u0")
    for col in ("t_s", "v_mid", "q", "D_true"):
        assert np.array_equal(ingested.columns[col], unit.columns[col])
    deci = ingest_tabular(path, BRIDGE_ROLES, downsample=10)
    assert len(deci) == 10
    assert np.array_equal(deci.columns["t_s"], unit.columns["t_s"][::10])


def test_ingest_shuffled_columns_land_in_roles(tmp_path):
    # write a file whose column order differs from the role declaration
    rng = np.random.default_rng(0)
    n = 20
    cols = {
        "sensor_b": rng.normal(size=n),
        "time": np.arange(n, dtype=float),
        "load": rng.uniform(size=n),
        "sensor_a": rng.normal(size=n),
    }
    path = tmp_path / "ext.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(cols[c][i])) for c in cols) + "\n")
    roles = ChannelRoles(states=("sensor_a", "sensor_b"), inputs=("load",),
                         truth=None, time="time")
    unit = ingest_tabular(path, roles)
    np.testing.assert_array_equal(unit.columns["sensor_a"], cols["sensor_a"])
    np.testing.assert_array_equal(unit.columns["sensor_b"], cols["sensor_b"])


def test_ingest_missing_column_and_bad_time(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_s,v_mid\n1.0,0.1\n0.5,0.2\n")
    roles = ChannelRoles(states=("v_mid",), inputs=(), truth=None)
    with pytest.raises(ValueError, match="strictly increasing"):
        ingest_tabular(path, roles)
    roles_missing = ChannelRoles(states=("nope",), inputs=(), truth=None)
    with pytest.raises(ValueError, match="missing"):
        ingest_tabular(path, roles_missing)
