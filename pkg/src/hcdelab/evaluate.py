"""Evaluation stack: PCA projection, alignment scores, monotonicity, NFE.

The alignment score asks how linearly recoverable the true degradation is
from a learned embedding: an ordinary-least-squares regressor (with
intercept) is fitted on training-split embeddings and scored as R^2 on a
test split. "pc1" mode first projects both sets through a PCA fitted on the
training embeddings, probing whether a single component already carries the
degradation trend (the health-index use case).

Everything here is a pure function of arrays; rendering is left to external
tooling fed by the CSV exporters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PcaProjection",
    "pca_fit",
    "pca_fit_transform",
    "alignment_score",
    "monotonicity_fraction",
    "ols_fit",
    "ols_predict",
    "summarize_seed_scores",
    "write_embeddings_csv",
    "write_pc_scatter_csv",
    "write_report_json",
    "write_rows_csv",
]


@dataclass(frozen=True)
class PcaProjection:
    """Mean-centered principal axes with a deterministic sign convention."""

    mean: np.ndarray
    components: np.ndarray  # (k, d), rows are components
    explained_ratios: np.ndarray  # all d ratios; they sum to 1

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.components.T

    def inverse(self, projected: np.ndarray) -> np.ndarray:
        return projected @ self.components + self.mean


def pca_fit(x: np.ndarray, k: int) -> PcaProjection:
    """Eigen-decomposition of the covariance; no variance scaling.

    Sign convention: the largest-magnitude loading of each component is
    made positive, so projections are reproducible across runs/platforms.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D (samples, dims) array")
    n, d = x.shape
    if k < 1 or k > d:
        raise ValueError(f"k={k} outside [1, {d}]")
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    comps = eigvecs[:, order].T
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0.0:
            comps[i] = -comps[i]
    total = eigvals.sum()
    ratios = eigvals / total if total > 0.0 else np.full(d, 1.0 / d)
    return PcaProjection(mean=mean, components=comps[:k],
                         explained_ratios=ratios)


def pca_fit_transform(x: np.ndarray, k: int):
    pca = pca_fit(x, k)
    return pca, pca.transform(x)


def ols_fit(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares coefficients with intercept; shape (d+1,)."""
    a = np.column_stack([np.ones(len(features)), features])
    beta, *_ = np.linalg.lstsq(a, np.asarray(targets, dtype=np.float64),
                               rcond=None)
    return beta


def ols_predict(beta: np.ndarray, features: np.ndarray) -> np.ndarray:
    a = np.column_stack([np.ones(len(features)), features])
    return a @ beta


def alignment_score(train_emb, train_truth, test_emb, test_truth,
                    mode: str = "all-dims") -> float:
    """Test-split R^2 of the train-fitted linear readout of true degradation.

    In "pc1" mode both sets are first projected through a train-fitted
    one-component PCA. Returns NaN when the test truth is constant
    (SS_tot = 0 leaves R^2 undefined).
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_truth = np.asarray(train_truth, dtype=np.float64)
    test_truth = np.asarray(test_truth, dtype=np.float64)
    if mode == "pc1":
        pca = pca_fit(train_emb, 1)
        train_emb = pca.transform(train_emb)
        test_emb = pca.transform(test_emb)
    elif mode != "all-dims":
        raise ValueError(f"unknown mode {mode!r}")
    beta = ols_fit(train_emb, train_truth)
    pred = ols_predict(beta, test_emb)
    ss_res = float(np.sum((test_truth - pred) ** 2))
    ss_tot = float(np.sum((test_truth - test_truth.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - ss_res / ss_tot


def monotonicity_fraction(series: np.ndarray, tol: float = 1e-9) -> float:
    """Fraction of consecutive non-decreasing steps of a scalar series."""
    series = np.asarray(series, dtype=np.float64).ravel()
    if series.size < 2:
        raise ValueError("need at least 2 points")
    steps = np.diff(series)
    return float(np.mean(steps >= -tol))


def summarize_seed_scores(values: list) -> dict:
    """mean +/- std (population) over seeds, NaNs propagated explicitly."""
    arr = np.asarray(values, dtype=np.float64)
    return {
        "values": [float(v) for v in arr],
        "mean": float(np.mean(arr)),
        "std": float(np.std(arr)),
        "n_seeds": int(arr.size),
    }


# ----------------------------------------------------------------- exports

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows_csv(path, header: list, rows: list) -> None:
    """Deterministic CSV: floats via repr, no timestamps."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_embeddings_csv(path, series_list) -> None:
    """unit-id, anchor time, embedding dims - common schema for all methods."""
    dim = series_list[0].embeddings.shape[1]
    header = ["unit_id", "anchor_t"] + [f"d{i + 1}" for i in range(dim)]
    rows = []
    for series in series_list:
        for t, e in zip(series.anchor_times, series.embeddings):
            rows.append([series.unit_id, t, *e])
    write_rows_csv(path, header, rows)


def write_pc_scatter_csv(path, series_list, pca: PcaProjection,
                         truth_lookup) -> None:
    """Per-anchor (pc1, pc2, true degradation) for embedding-space plots."""
    rows = []
    for series in series_list:
        proj = pca.transform(series.embeddings)
        truth = truth_lookup(series)
        for i in range(len(series.anchor_times)):
            pc2 = proj[i, 1] if proj.shape[1] > 1 else 0.0
            rows.append([series.unit_id, series.anchor_times[i],
                         proj[i, 0], pc2, truth[i]])
    write_rows_csv(path, ["unit_id", "anchor_t", "pc1", "pc2", "d_true"], rows)


def write_report_json(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
