"""Residual baseline: healthy-phase regression, residuals as degradation proxy.

A feedforward network is fitted on the assumed-healthy head of each training
trajectory to predict the current state from recent states and inputs (or,
for steady-state systems, from the current input alone). On later data the
prediction error is the degradation embedding fed to the same evaluation
pipeline as the hierarchical model's latents. Residuals are computed in
standardized units so alignment scores are comparable across methods.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import ChannelRoles, Scaler, Unit
from .nn import (
    AdamWState,
    Mlp,
    adamw_step,
    init_mlp,
    mlp_forward,
    plateau_update,
)
from .tape import Tape, Tensor, backward_gradients, sub, sum_all

__all__ = [
    "ResidualConfig",
    "ResidualModel",
    "ResidualSeries",
    "healthy_windows",
    "residual_infer",
    "residual_input_dim",
    "train_residual",
]


@dataclass(frozen=True)
class ResidualConfig:
    """Window construction plus the training stack of the baseline net."""

    window: int = 5
    healthy_len: int = 1000
    hidden: tuple = (50, 50, 20, 10)
    dropout: float = 0.2
    batch_norm: bool = True
    steady_state: bool = False  # map u_k -> x_k directly
    lr: float = 5e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    max_epochs: int = 30
    min_epochs: int = 5
    val_fraction: float = 0.2
    plateau_patience: int = 5
    plateau_factor: float = 0.95
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")


def residual_input_dim(cfg: ResidualConfig, n_states: int, n_inputs: int) -> int:
    """(w-1) past states plus w inputs, flattened; steady-state: inputs only."""
    if cfg.steady_state:
        return n_inputs
    return (cfg.window - 1) * n_states + cfg.window * n_inputs


@dataclass
class ResidualModel:
    cfg: ResidualConfig
    net: Mlp
    n_states: int
    n_inputs: int


@dataclass
class ResidualSeries:
    """Per-time residual vectors over one unit's usable record range."""

    unit_id: str
    indices: np.ndarray
    times: np.ndarray
    residuals: np.ndarray  # (n, n_states)


def _window_matrix(x: np.ndarray, u: np.ndarray, cfg: ResidualConfig,
                   start: int, stop: int):
    """Inputs/targets for prediction indices k in [start, stop)."""
    w = cfg.window
    ks = np.arange(start, stop)
    if cfg.steady_state:
        return u[ks], x[ks], ks
    feats = []
    for k in ks:
        past_x = x[k - w + 1:k].ravel()  # w-1 states, empty when w == 1
        past_u = u[k - w + 1:k + 1].ravel()  # w inputs, incl. current
        feats.append(np.concatenate([past_x, past_u]))
    return np.asarray(feats), x[ks], ks


def healthy_windows(unit: Unit, cfg: ResidualConfig, roles: ChannelRoles,
                    scaler: Scaler | None = None):
    """Training pairs from the assumed-healthy head of one trajectory."""
    source = scaler.transform(unit) if scaler is not None else unit
    x = np.column_stack([source.columns[c] for c in roles.states])
    u = np.column_stack([source.columns[c] for c in roles.inputs])
    stop = min(cfg.healthy_len, len(unit))
    start = cfg.window - 1 if not cfg.steady_state else 0
    if stop <= start:
        raise ValueError(
            f"unit {unit.unit_id}: {len(unit)} records leave no healthy windows")
    feats, targets, _ = _window_matrix(x, u, cfg, start, stop)
    return feats, targets


def train_residual(units: list, cfg: ResidualConfig, roles: ChannelRoles,
                   seed: int, scaler: Scaler | None = None) -> ResidualModel:
    """Fit the healthy-behavior net on pooled healthy windows of the units.

    Only the first ``healthy_len`` records of each unit are ever touched;
    nothing after the hold-out (and no truth column) can leak into training.
    """
    feats, targets = [], []
    for u in units:
        f, t = healthy_windows(u, cfg, roles, scaler)
        feats.append(f)
        targets.append(t)
    feats = np.concatenate(feats)
    targets = np.concatenate(targets)
    n_states = targets.shape[1]
    n_inputs = len(roles.inputs)

    rng = np.random.default_rng(seed)
    widths = [residual_input_dim(cfg, n_states, n_inputs), *cfg.hidden, n_states]
    activations = ["silu"] * len(cfg.hidden) + ["identity"]
    net = init_mlp(widths, activations, rng,
                   batch_norm=cfg.batch_norm, dropout=cfg.dropout)

    n = feats.shape[0]
    order = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ValueError("not enough healthy windows to train on")

    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay,
                       plateau_patience=cfg.plateau_patience,
                       plateau_factor=cfg.plateau_factor)
    best_val = float("inf")
    best_params = dict(net.parameters())
    bad = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(train_idx.size)
        for lo in range(0, train_idx.size, cfg.batch_size):
            idx = train_idx[perm[lo:lo + cfg.batch_size]]
            if idx.size < 2 and cfg.batch_norm:
                continue  # batch stats need >= 2 rows
            params = net.parameters()
            with Tape() as tp:
                pred = mlp_forward(net, Tensor(feats[idx]), training=True, rng=rng)
                resid = sub(pred, targets[idx])
                loss = sum_all(resid * resid) * (1.0 / idx.size)
            grads_t = backward_gradients(tp, loss, params.values())
            grads = {name: grads_t[t] for name, t in params.items()}
            new_params = adamw_step(params, grads, state)
            net = net.with_parameters(new_params)
        val_pred = mlp_forward(net, Tensor(feats[val_idx])).data
        val_loss = float(np.mean(np.sum((val_pred - targets[val_idx]) ** 2, axis=1)))
        plateau_update(state, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = dict(net.parameters())
            bad = 0
        else:
            bad += 1
        if epoch + 1 >= cfg.min_epochs and bad >= cfg.early_stop_patience:
            break
    net = net.with_parameters(best_params)
    return ResidualModel(cfg=cfg, net=net, n_states=n_states, n_inputs=n_inputs)


def residual_infer(model: ResidualModel, unit: Unit, roles: ChannelRoles,
                   scaler: Scaler | None = None) -> ResidualSeries:
    """r_k = x_k - x_hat_k over the whole trajectory, deterministic.

    Dropout is off and batch norm runs on its frozen running statistics.
    """
    cfg = model.cfg
    source = scaler.transform(unit) if scaler is not None else unit
    x = np.column_stack([source.columns[c] for c in roles.states])
    u = np.column_stack([source.columns[c] for c in roles.inputs])
    start = cfg.window - 1 if not cfg.steady_state else 0
    feats, targets, ks = _window_matrix(x, u, cfg, start, len(unit))
    preds = mlp_forward(model.net, Tensor(feats), training=False).data
    t = source.columns[roles.time]
    return ResidualSeries(unit_id=unit.unit_id, indices=ks, times=t[ks],
                          residuals=targets - preds)
