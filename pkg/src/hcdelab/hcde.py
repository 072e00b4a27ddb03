"""Hierarchical CDE model: slow degradation layer driving a fast dynamics layer.

Per window, the model

1. maps the coarse sequence through a learned path transform into latent
   degradation drivers, spline-interpolated into a control path Y;
2. integrates the slow latent state d along Y with a bounded vector field,
   optionally squashed by the monotonic activation (the slow layer);
3. interpolates d onto the fast time axis, splices it into the fast control
   path alongside raw states/inputs/time, and integrates the fast latent z
   along that path, with the field conditioned on d (the fast layer);
4. reads each fast latent out as a one-step-ahead state prediction and
   scores the rollout by mean squared error.

Both layers integrate in pseudo-time: the slow span is rescaled to [0, 1]
and the fast span to [0.9, 1.0], so every window shares one solver grid and
whole batches can be solved jointly (error control uses the worst sample).
Training is discretize-then-optimize: solver steps are recorded on the tape
and differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import WindowConfig, validation_indices
from .nn import (
    AdamWState,
    Mlp,
    adamw_step,
    init_mlp,
    mlp_forward,
    monotonic_sigma,
    monotonic_sigma_min,
    plateau_update,
)
from .odeint import SolverConfig, solve_ivp
from .paths import derivative_weights, second_derivative_matrix, value_weights
from .tape import (
    Tape,
    Tensor,
    backward_gradients,
    concat_last,
    field_apply,
    knot_eval,
    lincomb,
    reshape,
    stack_axis1,
    sum_all,
)

__all__ = [
    "HcdeConfig",
    "HcdeModel",
    "Batch",
    "LatentTrajectory",
    "TrainConfig",
    "TrainResult",
    "KnotSpline",
    "build_model",
    "make_batch",
    "model_parameters",
    "replace_parameters",
    "transform_path",
    "solve_slow_cde",
    "solve_fast_cde",
    "rollout_loss",
    "train_hcde",
    "infer_degradation",
    "slow_pseudo_times",
    "fast_pseudo_times",
]

FAST_SPAN = 0.1  # fast window occupies the tail tenth of the pseudo-time axis


@dataclass(frozen=True)
class HcdeConfig:
    """Architecture and integration knobs of the hierarchical model."""

    n_states: int
    n_inputs: int
    slow_dim: int = 10
    fast_dim: int = 10
    hidden: int = 64
    transform_dim: int = 10
    gamma: float = 10.0
    with_monotonic: bool = True
    with_path_transform: bool = True
    steady_state: bool = False  # drop z from the fast field inputs
    solver: SolverConfig = field(default_factory=SolverConfig)
    window: WindowConfig = field(default_factory=WindowConfig)

    @property
    def slow_path_channels(self) -> int:
        """Channels of Y including the appended time channel."""
        if self.with_path_transform:
            return self.transform_dim + 1
        return self.n_states + self.n_inputs + 1

    @property
    def fast_path_channels(self) -> int:
        """Raw states + inputs + interpolated slow latent + time."""
        return self.n_states + self.n_inputs + self.slow_dim + 1


@dataclass
class HcdeModel:
    """Parameter bundle; every learned map is a 2-layer MLP."""

    cfg: HcdeConfig
    transform: Mlp | None  # observed (x, u, t) -> latent degradation drivers
    slow_encoder: Mlp  # (x, u, t) at the slow start -> initial slow latent
    slow_field: Mlp  # slow latent -> (slow_dim x slow channels) matrix
    fast_encoder: Mlp  # (x, u, d, t) at the fast start -> initial fast latent
    fast_field: Mlp  # (z [, d]) -> (fast_dim x fast channels) matrix
    readout: Mlp  # fast latent -> next-state prediction


def build_model(cfg: HcdeConfig, seed: int) -> HcdeModel:
    """Seeded init. Vector fields end in tanh to stay bounded for the
    adaptive solver; encoders, transform, and readout end linear."""
    rng = np.random.default_rng(seed)
    enc_in = cfg.n_states + cfg.n_inputs + 1
    transform = None
    if cfg.with_path_transform:
        transform = init_mlp([enc_in, cfg.hidden, cfg.transform_dim],
                             ["silu", "identity"], rng)
    slow_encoder = init_mlp([enc_in, cfg.hidden, cfg.slow_dim],
                            ["silu", "identity"], rng)
    slow_field = init_mlp(
        [cfg.slow_dim, cfg.hidden, cfg.slow_dim * cfg.slow_path_channels],
        ["silu", "tanh"], rng)
    fast_enc_in = cfg.n_states + cfg.n_inputs + cfg.slow_dim + 1
    fast_encoder = init_mlp([fast_enc_in, cfg.hidden, cfg.fast_dim],
                            ["silu", "identity"], rng)
    fast_field_in = cfg.slow_dim if cfg.steady_state else cfg.fast_dim + cfg.slow_dim
    fast_field = init_mlp(
        [fast_field_in, cfg.hidden, cfg.fast_dim * cfg.fast_path_channels],
        ["silu", "tanh"], rng)
    readout = init_mlp([cfg.fast_dim, cfg.hidden, cfg.n_states],
                       ["silu", "identity"], rng)
    return HcdeModel(cfg=cfg, transform=transform, slow_encoder=slow_encoder,
                     slow_field=slow_field, fast_encoder=fast_encoder,
                     fast_field=fast_field, readout=readout)


_COMPONENTS = ("transform", "slow_encoder", "slow_field",
               "fast_encoder", "fast_field", "readout")


def model_parameters(model: HcdeModel) -> dict:
    out = {}
    for name in _COMPONENTS:
        mlp = getattr(model, name)
        if mlp is not None:
            out.update(mlp.parameters(prefix=f"{name}."))
    return out


def replace_parameters(model: HcdeModel, updated: dict) -> HcdeModel:
    """Fresh model with parameter tensors swapped from a name->Tensor map."""
    fields = {}
    for name in _COMPONENTS:
        mlp = getattr(model, name)
        fields[name] = None if mlp is None else mlp.with_parameters(
            updated, prefix=f"{name}.")
    return HcdeModel(cfg=model.cfg, **fields)


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    unit_ids: list
    anchor_indices: np.ndarray
    anchor_times: np.ndarray
    slow_x: np.ndarray  # (B, w_s, n_states)
    slow_u: np.ndarray
    fast_x: np.ndarray  # (B, w_f, n_states)
    fast_u: np.ndarray
    target_x: np.ndarray  # (B, n_states)

    @property
    def size(self) -> int:
        return self.slow_x.shape[0]


def make_batch(samples: list) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    return Batch(
        unit_ids=[s.unit_id for s in samples],
        anchor_indices=np.asarray([s.anchor_index for s in samples]),
        anchor_times=np.asarray([s.anchor_time for s in samples]),
        slow_x=np.stack([s.slow_x for s in samples]),
        slow_u=np.stack([s.slow_u for s in samples]),
        fast_x=np.stack([s.fast_x for s in samples]),
        fast_u=np.stack([s.fast_u for s in samples]),
        target_x=np.stack([s.target_x for s in samples]),
    )


def slow_pseudo_times(w_s: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, w_s)


def fast_pseudo_times(w_f: int) -> np.ndarray:
    return np.linspace(1.0 - FAST_SPAN, 1.0, w_f)


# ------------------------------------------------------------ control paths

class KnotSpline:
    """Natural cubic spline whose knot values live on the tape.

    Evaluation at a fixed time is a constant linear functional of the knot
    values, so values/derivatives stay differentiable w.r.t. learned knots.
    Weight vectors are cached per query time (solver stages revisit times).
    """

    def __init__(self, times: np.ndarray, knots: Tensor):
        self.times = np.asarray(times, dtype=np.float64)
        self.knots = knots  # (B, n, c)
        self._dmat = second_derivative_matrix(self.times)
        self._wcache = {}

    def value(self, t: float) -> Tensor:
        w = self._wcache.get(("v", t))
        if w is None:
            w = value_weights(self.times, self._dmat, t)
            self._wcache[("v", t)] = w
        return knot_eval(self.knots, w)

    def derivative(self, t: float) -> Tensor:
        w = self._wcache.get(("d", t))
        if w is None:
            w = derivative_weights(self.times, self._dmat, t)
            self._wcache[("d", t)] = w
        return knot_eval(self.knots, w)


def transform_path(model: HcdeModel, batch: Batch) -> KnotSpline:
    """Slow control path Y over the window's pseudo-time axis.

    With the path transform on, knot features are the learned map of
    (x_i, u_i, tau_i) and gradients flow into the transform; without it the
    raw observations are interpolated directly. Either way the time channel
    is appended last.
    """
    cfg = model.cfg
    b, w_s, _ = batch.slow_x.shape
    taus = slow_pseudo_times(w_s)
    time_col = np.broadcast_to(taus[None, :, None], (b, w_s, 1))
    base = np.concatenate([batch.slow_x, batch.slow_u, time_col], axis=2)
    if not cfg.with_path_transform:
        return KnotSpline(taus, Tensor(base))
    flat = Tensor(base.reshape(b * w_s, -1))
    feats = mlp_forward(model.transform, flat)
    knots = concat_last([
        reshape(feats, (b, w_s, cfg.transform_dim)),
        Tensor(time_col),
    ])
    return KnotSpline(taus, knots)


def _interp_states(times: np.ndarray, states: list, t: float) -> Tensor:
    """Linear interpolation between solver checkpoints, on tape."""
    if t <= times[0]:
        return states[0]
    if t >= times[-1]:
        return states[-1]
    k = int(np.searchsorted(times, t, side="right") - 1)
    k = min(k, len(times) - 2)
    w = (t - times[k]) / (times[k + 1] - times[k])
    if w == 0.0:
        return states[k]
    return lincomb([states[k], states[k + 1]], [1.0 - w, w])


# ------------------------------------------------------------------ solves

def solve_slow_cde(model: HcdeModel, y_path: KnotSpline, batch: Batch):
    """Integrate the slow latent along Y; checkpoints at every slow knot.

    Returns (checkpoint states, SolveResult). The slow rate is the field
    matrix applied to dY/dtau, squashed elementwise by the monotonic
    activation when enabled (zero response is preserved either way: a zero
    field or a flat path contributes exactly nothing).
    """
    cfg = model.cfg
    taus = y_path.times
    enc_in = np.concatenate([
        batch.slow_x[:, 0, :], batch.slow_u[:, 0, :],
        np.full((batch.size, 1), taus[0]),
    ], axis=1)
    d0 = mlp_forward(model.slow_encoder, Tensor(enc_in))

    def field_fn(d, t):
        f_mat = mlp_forward(model.slow_field, d)
        dy = y_path.derivative(float(t))
        rate = field_apply(f_mat, dy, cfg.slow_dim)
        if cfg.with_monotonic:
            rate = monotonic_sigma(rate, cfg.gamma)
        return rate

    res = solve_ivp(field_fn, d0, taus, cfg.solver)
    return res.states, res


def build_fast_path(model: HcdeModel, batch: Batch, slow_times: np.ndarray,
                    slow_states: list) -> KnotSpline:
    """Fast control path: raw states, inputs, interpolated slow latent, time."""
    b, w_f, _ = batch.fast_x.shape
    times = fast_pseudo_times(w_f)
    d_knots = stack_axis1([
        _interp_states(slow_times, slow_states, float(t)) for t in times
    ])
    time_col = np.broadcast_to(times[None, :, None], (b, w_f, 1))
    knots = concat_last([
        Tensor(batch.fast_x), Tensor(batch.fast_u), d_knots, Tensor(time_col),
    ])
    return KnotSpline(times, knots)


def solve_fast_cde(model: HcdeModel, x_path: KnotSpline, batch: Batch,
                   slow_times: np.ndarray, slow_states: list):
    """Integrate the fast latent along the fast control path.

    The field is conditioned on the interpolated slow latent; in
    steady-state mode the latent state itself is dropped from the field
    inputs (the response is driven by inputs and degradation alone).
    """
    cfg = model.cfg
    times = x_path.times
    d_t0 = _interp_states(slow_times, slow_states, float(times[0]))
    enc_in = concat_last([
        Tensor(batch.fast_x[:, 0, :]), Tensor(batch.fast_u[:, 0, :]),
        d_t0, Tensor(np.full((batch.size, 1), times[0])),
    ])
    z0 = mlp_forward(model.fast_encoder, enc_in)

    def field_fn(z, t):
        d_t = _interp_states(slow_times, slow_states, float(t))
        inp = d_t if cfg.steady_state else concat_last([z, d_t])
        f_mat = mlp_forward(model.fast_field, inp)
        dx = x_path.derivative(float(t))
        return field_apply(f_mat, dx, cfg.fast_dim)

    res = solve_ivp(field_fn, z0, times, cfg.solver)
    return res.states, res


# ------------------------------------------------------------ loss/rollout

@dataclass
class LatentTrajectory:
    """Detached latent trajectories and predictions of one forward pass."""

    slow_times: np.ndarray
    slow_states: np.ndarray  # (B, w_s, slow_dim)
    fast_times: np.ndarray
    fast_states: np.ndarray  # (B, w_f, fast_dim)
    predictions: np.ndarray  # (B, w_f, n_states)
    slow_nfe: int
    fast_nfe: int


def rollout_loss(model: HcdeModel, batch: Batch):
    """Mean squared multi-step rollout error, plus the latent trajectories.

    Prediction j (for fast knot j = 1..M and the horizon M+1) is read out
    from the latent at the previous fast knot, so the final prediction is a
    genuine one-step forecast from z at the anchor. The loss averages the
    squared residual norm over the M+1 steps and the batch; inputs are
    expected in standardized units.
    """
    slow_times = slow_pseudo_times(batch.slow_x.shape[1])
    y_path = transform_path(model, batch)
    slow_states, slow_res = solve_slow_cde(model, y_path, batch)
    x_path = build_fast_path(model, batch, slow_times, slow_states)
    fast_states, fast_res = solve_fast_cde(model, x_path, batch,
                                           slow_times, slow_states)
    preds = stack_axis1([mlp_forward(model.readout, z) for z in fast_states])
    targets = np.concatenate([batch.fast_x[:, 1:, :],
                              batch.target_x[:, None, :]], axis=1)
    resid = preds - Tensor(targets)
    n_steps = targets.shape[1]  # M + 1
    loss = sum_all(resid * resid) * (1.0 / (batch.size * n_steps))
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite rollout loss for units {sorted(set(batch.unit_ids))}")
    traj = LatentTrajectory(
        slow_times=slow_times,
        slow_states=np.stack([s.data for s in slow_states], axis=1),
        fast_times=x_path.times,
        fast_states=np.stack([z.data for z in fast_states], axis=1),
        predictions=preds.data,
        slow_nfe=slow_res.nfe,
        fast_nfe=fast_res.nfe,
    )
    return loss, traj


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    max_epochs: int = 30
    min_epochs: int = 5
    val_fraction: float = 0.2
    plateau_patience: int = 5
    plateau_factor: float = 0.95
    early_stop_patience: int = 10


@dataclass
class TrainResult:
    model: HcdeModel
    log: list  # one dict per epoch
    best_val: float
    best_epoch: int


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _eval_loss(model: HcdeModel, samples: list, batch_size: int) -> float:
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        batch = make_batch(samples[i:i + batch_size])
        loss, _ = rollout_loss(model, batch)
        total += float(loss.data) * batch.size
        count += batch.size
    return total / max(count, 1)


def train_hcde(model: HcdeModel, samples: list, train_cfg: TrainConfig,
               seed: int) -> TrainResult:
    """Minimize the rollout loss with AdamW + plateau-scheduled lr.

    A window-level validation subset (val_fraction, seeded) drives the lr
    schedule and early stopping; the best-validation parameters are
    restored at the end. The log records per-epoch train/val loss, lr, and
    the mean slow-solve NFE seen during training batches.
    """
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    val_idx = validation_indices(len(samples), train_cfg.val_fraction, seed)
    val_mask = np.zeros(len(samples), dtype=bool)
    val_mask[val_idx] = True
    train_samples = [s for s, m in zip(samples, val_mask) if not m]
    val_samples = [s for s, m in zip(samples, val_mask) if m]
    if not train_samples:
        raise ValueError("validation split consumed every sample")
    if not val_samples:
        val_samples = train_samples  # tiny datasets: validate in-sample

    state = AdamWState(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                       plateau_patience=train_cfg.plateau_patience,
                       plateau_factor=train_cfg.plateau_factor)
    log = []
    best_val = float("inf")
    best_epoch = -1
    best_params = {k: v for k, v in model_parameters(model).items()}
    bad_epochs = 0

    for epoch in range(train_cfg.max_epochs):
        epoch_loss, epoch_n = 0.0, 0
        nfe_sum, nfe_batches = 0, 0
        for idx in _epoch_batches(len(train_samples), train_cfg.batch_size, rng):
            batch = make_batch([train_samples[i] for i in idx])
            params = model_parameters(model)
            with Tape() as tp:
                loss, traj = rollout_loss(model, batch)
            grads_by_tensor = backward_gradients(tp, loss, params.values())
            grads = {name: grads_by_tensor[t] for name, t in params.items()}
            new_params = adamw_step(params, grads, state)
            model = replace_parameters(model, new_params)
            epoch_loss += float(loss.data) * batch.size
            epoch_n += batch.size
            nfe_sum += traj.slow_nfe
            nfe_batches += 1
        val_loss = _eval_loss(model, val_samples, train_cfg.batch_size)
        if not np.isfinite(val_loss):
            raise FloatingPointError(
                f"validation loss diverged at epoch {epoch}")
        plateau_update(state, val_loss)
        log.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(epoch_n, 1),
            "val_loss": val_loss,
            "lr": state.lr,
            "mean_slow_nfe": nfe_sum / max(nfe_batches, 1),
        })
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = dict(model_parameters(model))
            bad_epochs = 0
        else:
            bad_epochs += 1
        if (epoch + 1 >= train_cfg.min_epochs
                and bad_epochs >= train_cfg.early_stop_patience):
            break

    model = replace_parameters(model, best_params)
    return TrainResult(model=model, log=log, best_val=best_val,
                       best_epoch=best_epoch)


# --------------------------------------------------------------- inference

@dataclass
class DegradationSeries:
    """Per-anchor slow-latent endpoints for one unit."""

    unit_id: str
    anchor_indices: np.ndarray
    anchor_times: np.ndarray
    embeddings: np.ndarray  # (n_anchors, slow_dim)
    slow_nfe: int  # NFE of the batched slow solve over all anchors


def infer_degradation(model: HcdeModel, samples: list,
                      batch_size: int = 512) -> DegradationSeries:
    """Slow-CDE terminal state d(T) per window, batched per unit.

    Only the slow layer runs (the fast layer does not move d). Windows of a
    unit share the pseudo-time grid, so they are solved jointly; the
    reported NFE is the cost of those joint solves. No tape is recorded.
    """
    if not samples:
        raise ValueError("no samples to embed")
    unit_ids = {s.unit_id for s in samples}
    if len(unit_ids) != 1:
        raise ValueError("infer_degradation expects samples of a single unit")
    emb, nfe_total = [], 0
    for i in range(0, len(samples), batch_size):
        batch = make_batch(samples[i:i + batch_size])
        y_path = transform_path(model, batch)
        slow_states, res = solve_slow_cde(model, y_path, batch)
        emb.append(slow_states[-1].data)
        nfe_total += res.nfe
    return DegradationSeries(
        unit_id=samples[0].unit_id,
        anchor_indices=np.asarray([s.anchor_index for s in samples]),
        anchor_times=np.asarray([s.anchor_time for s in samples]),
        embeddings=np.concatenate(emb, axis=0),
        slow_nfe=nfe_total,
    )
