"""Small feedforward networks and the AdamW optimizer on the autodiff tape.

Every learned map in the model zoo (vector fields, encoders, readouts, the
degradation path transform, the residual baseline) is an :class:`Mlp`. The
baseline variant additionally carries batch normalization and dropout; both
are off by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .tape import (
    Tensor,
    TapeError,
    add,
    div,
    matmul,
    mean_axis0,
    mul,
    sigmoid,
    silu,
    sqrt,
    sub,
    tanh,
)

__all__ = [
    "Mlp",
    "BatchNormState",
    "AdamWState",
    "monotonic_sigma",
    "monotonic_sigma_min",
    "init_mlp",
    "mlp_forward",
    "parameter_count",
    "adamw_step",
    "plateau_update",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("identity", "silu", "tanh", "sigmoid", "monotonic-sigma")


def monotonic_sigma(x, gamma: float = 10.0):
    """Bounded, zero-preserving, negativity-suppressing activation.

    sigmoid(gamma * x) * tanh(x): strictly inside (-1, 1), exactly zero at
    zero, and for large gamma the negative branch is squashed to a small
    leak (about -0.0277 at gamma=10). Works on Tensors and plain arrays.
    """
    if isinstance(x, Tensor):
        return mul(sigmoid(mul(x, gamma)), tanh(x))
    from scipy.special import expit

    x = np.asarray(x, dtype=np.float64)
    return expit(gamma * x) * np.tanh(x)


def monotonic_sigma_min(gamma: float = 10.0) -> float:
    """Most negative value the activation can produce (the leak bound).

    Found by dense scan + golden-section refinement on the negative axis;
    the minimum sits near x = -1.3/gamma.
    """
    xs = np.linspace(-10.0 / gamma, 0.0, 2001)
    ys = monotonic_sigma(xs, gamma)
    lo = max(0, int(np.argmin(ys)) - 2)
    hi = min(len(xs) - 1, int(np.argmin(ys)) + 2)
    a, b = xs[lo], xs[hi]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(200):
        c = b - phi * (b - a)
        d = a + phi * (b - a)
        if monotonic_sigma(c, gamma) < monotonic_sigma(d, gamma):
            b = d
        else:
            a = c
    return float(monotonic_sigma(0.5 * (a + b), gamma))


def _activate(name: str, x: Tensor, gamma: float) -> Tensor:
    if name == "identity":
        return x
    if name == "silu":
        return silu(x)
    if name == "tanh":
        return tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "monotonic-sigma":
        return monotonic_sigma(x, gamma)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class BatchNormState:
    """Per-feature affine parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class Mlp:
    """Fully connected network: weights/biases per layer plus activations.

    ``batch_norms[i]`` (when present) normalizes the output of layer i before
    its activation; ``dropout`` masks hidden activations during training.
    """

    weights: list
    biases: list
    activations: list
    gamma: float = 10.0
    batch_norms: list | None = None
    dropout: float = 0.0

    @property
    def widths(self):
        ws = [self.weights[0].shape[0]]
        ws += [w.shape[1] for w in self.weights]
        return ws

    def parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        if self.batch_norms:
            for i, bn in enumerate(self.batch_norms):
                if bn is not None:
                    out[f"{prefix}bn{i}.gamma"] = bn.gamma
                    out[f"{prefix}bn{i}.beta"] = bn.beta
        return out

    def with_parameters(self, updated: dict, prefix: str = "") -> "Mlp":
        """Fresh Mlp with tensors replaced from a name->Tensor map."""
        weights = [updated.get(f"{prefix}w{i}", w) for i, w in enumerate(self.weights)]
        biases = [updated.get(f"{prefix}b{i}", b) for i, b in enumerate(self.biases)]
        bns = None
        if self.batch_norms:
            bns = []
            for i, bn in enumerate(self.batch_norms):
                if bn is None:
                    bns.append(None)
                else:
                    bns.append(replace(
                        bn,
                        gamma=updated.get(f"{prefix}bn{i}.gamma", bn.gamma),
                        beta=updated.get(f"{prefix}bn{i}.beta", bn.beta),
                    ))
        return Mlp(weights, biases, list(self.activations), self.gamma, bns, self.dropout)


def init_mlp(widths, activations, rng, gamma: float = 10.0,
             batch_norm: bool = False, dropout: float = 0.0) -> Mlp:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    if len(activations) != len(widths) - 1:
        raise ValueError("need one activation per layer")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")
    weights, biases, bns = [], [], []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(w_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(w_in, w_out)),
                              requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, size=(w_out,)),
                             requires_grad=True))
        bns.append(BatchNormState(
            gamma=Tensor(np.ones(w_out), requires_grad=True),
            beta=Tensor(np.zeros(w_out), requires_grad=True),
            running_mean=np.zeros(w_out),
            running_var=np.ones(w_out),
        ) if batch_norm else None)
    return Mlp(weights, biases, list(activations), gamma,
               bns if batch_norm else None, dropout)


def _batch_norm(x: Tensor, bn: BatchNormState, training: bool) -> Tensor:
    if training:
        if x.shape[0] < 2:
            raise TapeError("batch norm in training mode needs batch size >= 2")
        mu = mean_axis0(x)
        xc = sub(x, mu)
        var = mean_axis0(mul(xc, xc))
        xn = mul(xc, div(1.0, sqrt(add(var, bn.eps))))
        n = x.shape[0]
        # running stats track the unbiased batch variance, torch-style
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu.data
        bn.running_var = ((1 - bn.momentum) * bn.running_var
                          + bn.momentum * var.data * n / max(n - 1, 1))
    else:
        xc = sub(x, bn.running_mean)
        xn = mul(xc, 1.0 / np.sqrt(bn.running_var + bn.eps))
    return add(mul(xn, bn.gamma), bn.beta)


def mlp_forward(params: Mlp, x, training: bool = False, rng=None) -> Tensor:
    """Forward pass; records on the active tape when one is open.

    Dropout requires ``rng`` when training so masks are reproducible.
    Raises on input-width mismatch and on non-finite outputs.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise TapeError(
            f"mlp_forward: input width {x.shape[-1]} != first layer width "
            f"{params.weights[0].shape[0]}")
    if x.ndim != 2:
        raise TapeError("mlp_forward expects a 2-D (batch, features) input")
    n_layers = len(params.weights)
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases,
                                        params.activations)):
        x = add(matmul(x, w), b)
        if params.batch_norms and params.batch_norms[i] is not None:
            x = _batch_norm(x, params.batch_norms[i], training)
        x = _activate(act, x, params.gamma)
        hidden = i < n_layers - 1
        if hidden and training and params.dropout > 0.0:
            if rng is None:
                raise TapeError("dropout in training mode needs an rng")
            keep = 1.0 - params.dropout
            mask = (rng.random(x.shape) < keep) / keep
            x = mul(x, mask)
    if not np.all(np.isfinite(x.data)):
        raise TapeError("non-finite activation output in mlp_forward")
    return x


def parameter_count(params: Mlp) -> int:
    n = sum(w.size for w in params.weights) + sum(b.size for b in params.biases)
    if params.batch_norms:
        n += sum(bn.gamma.size + bn.beta.size
                 for bn in params.batch_norms if bn is not None)
    return n


# ------------------------------------------------------------------- AdamW

@dataclass
class AdamWState:
    """Moment estimates keyed by parameter name, plus scheduler bookkeeping."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    plateau_patience: int = 5
    plateau_factor: float = 0.95
    plateau_best: float = float("inf")
    plateau_count: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One decoupled-weight-decay Adam update; returns fresh parameter tensors.

    ``params`` maps name -> Tensor, ``grads`` name -> ndarray. The decay term
    multiplies the pre-update parameter value. State moments are updated in
    place; parameter tensors are replaced, never mutated.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise TapeError(f"gradient shape {g.shape} != parameter shape "
                            f"{p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TapeError(f"non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data - state.lr * update - state.lr * state.weight_decay * p.data
        out[name] = Tensor(new, requires_grad=True)
    return out


def plateau_update(state: AdamWState, val_loss: float) -> bool:
    """ReduceLROnPlateau bookkeeping; returns True when the lr was reduced.

    Mirrors the usual semantics: the lr drops after strictly more than
    ``plateau_patience`` consecutive non-improving validations.
    """
    if val_loss < state.plateau_best:
        state.plateau_best = val_loss
        state.plateau_count = 0
        return False
    state.plateau_count += 1
    if state.plateau_count > state.plateau_patience:
        state.lr *= state.plateau_factor
        state.plateau_count = 0
        return True
    return False


# ------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write a name->Tensor map as versioned JSON; round-trip is bit-exact.

    Floats are serialized with repr (shortest round-trip form), so reading
    the file back reproduces the exact IEEE-754 doubles.
    """
    blob = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    params = {
        name: Tensor(np.asarray(rec["values"]).reshape(rec["shape"]),
                     requires_grad=True)
        for name, rec in blob["params"].items()
    }
    return params, blob.get("meta", {})
