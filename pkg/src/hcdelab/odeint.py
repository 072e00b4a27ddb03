"""Fixed-step RK4 and adaptive Dormand-Prince 5(4) integrators.

Both integrators run on :class:`~hcdelab.tape.Tensor` states, so recording a
solve on an open tape makes the whole trajectory differentiable w.r.t. any
parameters the vector field touches (discretize-then-optimize). Step-size
control and error norms are computed on detached data and never enter the
tape.

Conventions:

* every vector-field evaluation increments ``nfe`` by one, batched or not;
* adaptive steps are truncated to land exactly on requested grid points
  (no dense-output interpolant);
* the step controller is the elementary rule
  ``h <- h * clip(0.9 * err_norm**(-1/5), 0.2, 5)``;
* the Dormand-Prince first-same-as-last stage is reused, so a continuous
  solve costs ``1 + 6 * (accepted + rejected)`` field evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, as_tensor, lincomb

__all__ = [
    "SolverConfig",
    "SolveResult",
    "OdeError",
    "MaxStepsExceeded",
    "NonFiniteState",
    "solve_ivp",
    "step_dopri5",
    "step_rk4",
]


class OdeError(RuntimeError):
    pass


class MaxStepsExceeded(OdeError):
    """Budget exhausted before reaching the grid end - stiffness signal."""


class NonFiniteState(OdeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-3
    atol: float = 1e-5
    initial_step: float | None = None
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rtol <= 0.0 or self.atol <= 0.0:
            raise ValueError("rtol and atol must be positive")


@dataclass
class SolveResult:
    """States at the requested checkpoints plus solver cost counters."""

    times: np.ndarray
    states: list = field(default_factory=list)
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


# Dormand-Prince 5(4) tableau. b row propagates the 5th-order solution;
# err_coeffs = b5 - b4 gives the embedded 4th-order error estimate.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def _combine(z: Tensor, ks, coeffs) -> Tensor:
    """z + sum_i coeffs[i] * ks[i], skipping zero coefficients."""
    tensors, weights = [z], [1.0]
    for k, c in zip(ks, coeffs):
        if c != 0.0:
            tensors.append(k)
            weights.append(c)
    if len(tensors) == 1:
        return z
    return lincomb(tensors, weights)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteState(f"non-finite {what} during integration")


def step_dopri5(field_fn, z: Tensor, t: float, h: float, k1: Tensor | None = None):
    """Single Dormand-Prince step.

    Returns ``(z_next, err_estimate, k_last, nfe_inc)``. ``err_estimate`` is
    the raw embedded 4th-order error (detached ndarray). Passing the previous
    step's ``k_last`` as ``k1`` exploits the FSAL property (6 evaluations
    instead of 7).
    """
    if h <= 0.0:
        raise OdeError("step size must be positive")
    nfe = 0
    if k1 is None:
        k1 = field_fn(z, t)
        nfe += 1
    ks = [k1]
    for i in range(1, 7):
        coeffs = [h * a for a in _DP_A[i]]
        z_stage = _combine(z, ks, coeffs)
        ks.append(field_fn(z_stage, t + _DP_C[i] * h))
        nfe += 1
        _check_finite(ks[-1].data, "stage value")
    z_next = _combine(z, ks, [h * b for b in _DP_B])
    err = h * sum(e * k.data for e, k in zip(_DP_E, ks) if e != 0.0)
    return z_next, np.asarray(err), ks[6], nfe


def step_rk4(field_fn, z: Tensor, t: float, h: float):
    """Classic fixed-step RK4; returns (z_next, nfe_inc=4)."""
    k1 = field_fn(z, t)
    k2 = field_fn(_combine(z, [k1], [h / 2]), t + h / 2)
    k3 = field_fn(_combine(z, [k2], [h / 2]), t + h / 2)
    k4 = field_fn(_combine(z, [k3], [h]), t + h)
    z_next = _combine(z, [k1, k2, k3, k4], [h / 6, h / 3, h / 3, h / 6])
    return z_next, 4


def _error_norm(err: np.ndarray, z0: np.ndarray, z1: np.ndarray,
                rtol: float, atol: float) -> float:
    """Tolerance-scaled RMS error; the max over batch rows for 2-D states.

    Taking the max (not the mean) over the batch keeps the tolerance honest
    for every sample in a jointly solved batch.
    """
    scale = atol + rtol * np.maximum(np.abs(z0), np.abs(z1))
    r = err / scale
    if r.ndim >= 2:
        per_sample = np.sqrt(np.mean(r * r, axis=tuple(range(1, r.ndim))))
        return float(per_sample.max())
    return float(np.sqrt(np.mean(r * r)))


def _controller_factor(err_norm: float) -> float:
    if err_norm <= 0.0:
        return 5.0
    return float(np.clip(0.9 * err_norm ** -0.2, 0.2, 5.0))


def solve_ivp(field_fn, z0, t_grid, cfg: SolverConfig | None = None) -> SolveResult:
    """Integrate dz/dt = field(z, t) reporting the state at every grid time.

    ``field_fn(z, t)`` maps a Tensor state (and float time) to the state
    derivative. The result's ``states[i]`` corresponds to ``t_grid[i]``,
    including the initial state.
    """
    cfg = cfg or SolverConfig()
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 2 or np.any(np.diff(t_grid) <= 0.0):
        raise OdeError("t_grid must contain at least 2 strictly increasing times")
    z = as_tensor(z0)
    _check_finite(z.data, "initial state")

    res = SolveResult(times=t_grid, states=[z])
    if cfg.method == "rk4":
        _solve_rk4(field_fn, z, t_grid, cfg, res)
    else:
        _solve_dopri5(field_fn, z, t_grid, cfg, res)
    return res


def _solve_rk4(field_fn, z, t_grid, cfg, res) -> None:
    h_target = cfg.initial_step or (t_grid[1] - t_grid[0]) / 10.0
    for lo, hi in zip(t_grid[:-1], t_grid[1:]):
        span = hi - lo
        n_sub = max(1, int(np.ceil(span / h_target - 1e-12)))
        h = span / n_sub
        if res.accepted + n_sub > cfg.max_steps:
            raise MaxStepsExceeded(f"rk4 budget of {cfg.max_steps} steps exceeded")
        for i in range(n_sub):
            z, inc = step_rk4(field_fn, z, lo + i * h, h)
            res.nfe += inc
            res.accepted += 1
        _check_finite(z.data, "state")
        res.states.append(z)


def _solve_dopri5(field_fn, z, t_grid, cfg, res) -> None:
    h = cfg.initial_step or (t_grid[1] - t_grid[0]) / 10.0
    k1 = None
    t = float(t_grid[0])
    for target in t_grid[1:]:
        target = float(target)
        while t < target:
            remaining = target - t
            if remaining <= 1e-14 * max(1.0, abs(target)):
                break
            h_try = min(h, remaining)
            landing = h_try >= remaining * (1.0 - 1e-12)
            z_new, err, k_last, inc = step_dopri5(field_fn, z, t, h_try, k1)
            res.nfe += inc
            if res.accepted + res.rejected + 1 > cfg.max_steps:
                raise MaxStepsExceeded(
                    f"dopri5 budget of {cfg.max_steps} steps exceeded "
                    f"(stiffness?) at t={t:.6g}")
            norm = _error_norm(err, z.data, z_new.data, cfg.rtol, cfg.atol)
            h = h_try * _controller_factor(norm)
            if norm <= 1.0:
                res.accepted += 1
                _check_finite(z_new.data, "state")
                z = z_new
                k1 = k_last
                t = target if landing else t + h_try
            else:
                res.rejected += 1
        t = target
        res.states.append(z)
