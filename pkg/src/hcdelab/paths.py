"""Natural cubic spline control paths with analytic first derivatives.

Fitting solves the classic tridiagonal system for knot second derivatives
(natural boundary: zero curvature at both ends). Evaluation returns value
and derivative from the same segment polynomial, so the derivative is the
exact analytic derivative of the interpolant, not a difference quotient.

Two views of the same math live here:

* :class:`SplinePath` — a fitted, immutable path over plain arrays.
* the weight-vector form (:func:`second_derivative_matrix`,
  :func:`value_weights`, :func:`derivative_weights`) — expresses evaluation
  at a fixed query time as a constant linear functional of the knot values,
  which is what lets learned knot values stay differentiable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "SplinePath",
    "fit_natural_cubic",
    "eval_path",
    "second_derivative_matrix",
    "value_weights",
    "derivative_weights",
]


def _check_times(times: np.ndarray) -> None:
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need at least 2 knots")
    dt = np.diff(times)
    if np.any(dt == 0.0):
        raise ValueError("duplicate knot times")
    if np.any(dt < 0.0):
        raise ValueError("knot times must be strictly increasing")


def _solve_second_derivatives(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Second derivatives (c, n) for channel-major values (c, n), natural BC."""
    n = times.size
    if n == 2:
        return np.zeros_like(values)
    h = np.diff(times)
    # banded tridiagonal system; rows 0 and n-1 pin M=0
    ab = np.zeros((3, n))
    ab[1, 0] = ab[1, -1] = 1.0
    ab[1, 1:-1] = 2.0 * (h[:-1] + h[1:])
    ab[0, 2:] = h[1:]
    ab[2, :-2] = h[:-1]
    slopes = np.diff(values, axis=1) / h
    rhs = np.zeros_like(values)
    rhs[:, 1:-1] = 6.0 * np.diff(slopes, axis=1)
    return solve_banded((1, 1), ab, rhs.T).T


@dataclass(frozen=True)
class SplinePath:
    """Immutable natural cubic spline: C2 inside, zero curvature at the ends.

    ``values`` and ``second_derivs`` are channel-major (c, n); the segment
    cubic on [t_k, t_k+1] is determined by the (value, second-derivative)
    pairs at its two knots. When ``has_time_channel`` is set, the last
    channel is the identity map of time: value t, derivative exactly 1.
    """

    times: np.ndarray
    values: np.ndarray
    second_derivs: np.ndarray
    has_time_channel: bool = False

    @property
    def n_channels(self) -> int:
        return self.values.shape[0] + (1 if self.has_time_channel else 0)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])


def fit_natural_cubic(times, values, append_time: bool = False) -> SplinePath:
    """Fit one natural cubic spline per channel.

    ``values`` is channel-major: shape (channels, len(times)). A 1-D array
    is treated as a single channel. ``append_time`` adds the exact identity
    time channel used by CDE control paths.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    _check_times(times)
    if values.shape[1] != times.size:
        raise ValueError(
            f"values have {values.shape[1]} columns for {times.size} knot times")
    second = _solve_second_derivatives(times, values)
    return SplinePath(times, values, second, has_time_channel=append_time)


def _locate(times: np.ndarray, t: float) -> tuple[int, float, bool]:
    """Segment index and clamped evaluation time."""
    clamped = False
    if t < times[0]:
        t, clamped = float(times[0]), True
    elif t > times[-1]:
        t, clamped = float(times[-1]), True
    k = int(np.searchsorted(times, t, side="right") - 1)
    k = min(max(k, 0), times.size - 2)
    return k, t, clamped


def eval_path(path: SplinePath, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Value and analytic derivative at t, both of shape (n_channels,).

    Outside [t0, t1] the path extrapolates as a constant (endpoint value,
    zero derivative) and a warning flags the clamp. The appended time
    channel, when present, has derivative exactly 1.
    """
    t_in = float(t)
    k, t, clamped = _locate(path.times, t_in)
    if clamped:
        warnings.warn(
            f"eval_path: t={t_in} outside [{path.t0}, {path.t1}]; clamped",
            stacklevel=2)
    h = path.times[k + 1] - path.times[k]
    a = (path.times[k + 1] - t) / h
    b = (t - path.times[k]) / h
    y0, y1 = path.values[:, k], path.values[:, k + 1]
    m0, m1 = path.second_derivs[:, k], path.second_derivs[:, k + 1]
    value = a * y0 + b * y1 + ((a**3 - a) * m0 + (b**3 - b) * m1) * h * h / 6.0
    deriv = ((y1 - y0) / h
             - (3.0 * a * a - 1.0) / 6.0 * h * m0
             + (3.0 * b * b - 1.0) / 6.0 * h * m1)
    if clamped:
        deriv = np.zeros_like(deriv)
    if path.has_time_channel:
        value = np.concatenate([value, [t]])
        deriv = np.concatenate([deriv, [0.0 if clamped else 1.0]])
    return value, deriv


# ----------------------------------------------------- weight-vector form

def second_derivative_matrix(times) -> np.ndarray:
    """Dense (n, n) map D with M = D @ y per channel, for fixed knot times.

    Row-fed through the tridiagonal inverse; cost O(n^2) once per knot grid,
    acceptable for the window sizes used here (n <= a few hundred).
    """
    times = np.asarray(times, dtype=np.float64)
    _check_times(times)
    n = times.size
    # columns of the solve are the responses to unit knot values; transpose
    # so that rows index the output second derivatives: M = D @ y
    return _solve_second_derivatives(times, np.eye(n)).T


def _segment_geometry(times: np.ndarray, t: float):
    k, t, clamped = _locate(times, t)
    if clamped:
        raise ValueError("weight-vector evaluation requires t inside the knot span")
    h = times[k + 1] - times[k]
    a = (times[k + 1] - t) / h
    b = (t - times[k]) / h
    return k, h, a, b


def value_weights(times, dmat: np.ndarray, t: float) -> np.ndarray:
    """w with S(t) = w @ y (per channel), y being the knot values."""
    times = np.asarray(times, dtype=np.float64)
    k, h, a, b = _segment_geometry(times, float(t))
    w = np.zeros(times.size)
    w[k] += a
    w[k + 1] += b
    w += ((a**3 - a) * dmat[k] + (b**3 - b) * dmat[k + 1]) * h * h / 6.0
    return w


def derivative_weights(times, dmat: np.ndarray, t: float) -> np.ndarray:
    """w with S'(t) = w @ y (per channel)."""
    times = np.asarray(times, dtype=np.float64)
    k, h, a, b = _segment_geometry(times, float(t))
    w = np.zeros(times.size)
    w[k] -= 1.0 / h
    w[k + 1] += 1.0 / h
    w += (-(3.0 * a * a - 1.0) / 6.0 * h * dmat[k]
          + (3.0 * b * b - 1.0) / 6.0 * h * dmat[k + 1])
    return w
