"""Run-to-failure simulator for a degrading simply supported beam.

A 2-D Euler-Bernoulli beam (axial + bending, 3 DOF per node) carries a
uniformly distributed traffic load and thermal loads from ambient
temperature. Dynamics are integrated with the Newmark average-acceleration
scheme under Rayleigh damping; a scalar damage variable accumulates whenever
the mid-span deflection exceeds a threshold and uniformly reduces the
effective stiffness, E_eff = E (1 - D), I_eff = I (1 - D).

Two deliberate quirks of the setup, kept as configured rather than retuned:

* the Rayleigh coefficients (0.1, 0.015) put the fundamental-mode damping
  ratio near 18%, not a nominal few percent - see ``rayleigh_damping_ratio``;
* the 60 s substep cannot resolve the ~0.26 s fundamental period, so the
  integrated response is quasi-static (the unconditionally stable implicit
  scheme damps what it cannot resolve).

Synthetic load/temperature generators stand in for the original traffic and
weather sources, which are not redistributable; ``ingest_tabular`` in the
datasets module accepts real series when available.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

__all__ = [
    "BeamModel",
    "DamageState",
    "LoadProfile",
    "SimulatedUnit",
    "SystemMatrices",
    "NewmarkOperator",
    "SimConfig",
    "SimulationError",
    "DurationGuardExceeded",
    "UNIT_COLUMNS",
    "assemble_system",
    "assemble_unconstrained",
    "stiffness_matrix",
    "fundamental_frequency",
    "analytic_fundamental_frequency",
    "rayleigh_damping_ratio",
    "static_midspan_deflection",
    "distributed_load_vector",
    "thermal_load",
    "newmark_step",
    "update_damage",
    "gen_loads",
    "run_to_failure",
    "sensor_nodes",
]

UNIT_COLUMNS = ("t_s", "v_quarter", "v_third", "v_mid", "q", "T_ambient", "D_true")

T_REFERENCE_C = 20.0
BETA_THERMAL = 1.0
GRADIENT_SMOOTHING = 0.1  # exponential smoothing update factor


class SimulationError(RuntimeError):
    pass


class DurationGuardExceeded(SimulationError):
    """The unit refused to fail within the configured wall of simulated time."""


@dataclass(frozen=True)
class BeamModel:
    """Geometry, material, and damping of the simulated bridge (MDF-like)."""

    length: float = 10.0
    n_elements: int = 20
    elastic_modulus: float = 4.0e9
    inertia: float = 5.0e-4
    area: float = 0.06
    density: float = 550.0
    alpha_thermal: float = 5.0e-6
    alpha_damp: float = 0.1
    beta_damp: float = 0.015

    @property
    def n_nodes(self) -> int:
        return self.n_elements + 1

    @property
    def element_length(self) -> float:
        return self.length / self.n_elements

    @property
    def fixed_dofs(self) -> tuple:
        # pinned left end (u, v), roller right end (v); rotations free
        last = 3 * self.n_elements
        return (0, 1, last + 1)


@dataclass
class DamageState:
    """Monotone scalar damage with the displacement-threshold growth law."""

    d: float = 0.0
    u_ref: float = 0.0125
    beta_damage: float = 3.2e-4
    exponent: float = 2.0


@dataclass(frozen=True)
class LoadProfile:
    """Hourly traffic/temperature realization for one unit."""

    scenario: str
    base_scale: float
    hourly_factors: np.ndarray  # 24 values, percent of daily traffic
    daily_factors: np.ndarray  # one N(1, 0.1) draw per day
    temperature: np.ndarray  # hourly ambient temperature, deg C
    start_day: int

    def q_at(self, t_seconds: float) -> float:
        hour_abs = int(t_seconds // 3600.0)
        day = hour_abs // 24
        return float(self.base_scale * self.hourly_factors[hour_abs % 24]
                     * self.daily_factors[day])

    def temperature_at(self, t_seconds: float) -> float:
        return float(self.temperature[int(t_seconds // 3600.0)])


@dataclass
class SimulatedUnit:
    """One run-to-failure record table plus the metadata that produced it."""

    unit_id: str
    scenario: str
    seed: int
    start_day: int
    columns: dict


@dataclass(frozen=True)
class SystemMatrices:
    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    free_dofs: np.ndarray


# ------------------------------------------------------------ FEM assembly

def _element_matrices(model: BeamModel):
    """Per-element pieces: axial stiffness (unit E), bending (unit EI), mass."""
    le = model.element_length
    a = model.area
    k_axial = a / le * np.array([[1.0, -1.0], [-1.0, 1.0]])
    k_bend = 1.0 / le**3 * np.array([
        [12, 6 * le, -12, 6 * le],
        [6 * le, 4 * le**2, -6 * le, 2 * le**2],
        [-12, -6 * le, 12, -6 * le],
        [6 * le, 2 * le**2, -6 * le, 4 * le**2],
    ])
    rho_al = model.density * a * le
    m = np.zeros((6, 6))
    ax = [0, 3]
    m[np.ix_(ax, ax)] = rho_al / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    bd = [1, 2, 4, 5]
    m[np.ix_(bd, bd)] = rho_al / 420.0 * np.array([
        [156, 22 * le, 54, -13 * le],
        [22 * le, 4 * le**2, 13 * le, -3 * le**2],
        [54, 13 * le, 156, -22 * le],
        [-13 * le, -3 * le**2, -22 * le, 4 * le**2],
    ])
    return k_axial, k_bend, m


def assemble_unconstrained(model: BeamModel):
    """Global (K_axial at unit E, K_bending at unit EI, M), unconstrained."""
    n_dof = 3 * model.n_nodes
    k_ax = np.zeros((n_dof, n_dof))
    k_bd = np.zeros((n_dof, n_dof))
    m_g = np.zeros((n_dof, n_dof))
    k_axial_el, k_bend_el, m_el = _element_matrices(model)
    for e in range(model.n_elements):
        base = 3 * e
        ax = [base, base + 3]
        bd = [base + 1, base + 2, base + 4, base + 5]
        k_ax[np.ix_(ax, ax)] += k_axial_el
        k_bd[np.ix_(bd, bd)] += k_bend_el
        dofs = np.arange(base, base + 6)
        m_g[np.ix_(dofs, dofs)] += m_el
    return k_ax, k_bd, m_g


def _free_dofs(model: BeamModel) -> np.ndarray:
    n_dof = 3 * model.n_nodes
    mask = np.ones(n_dof, dtype=bool)
    mask[list(model.fixed_dofs)] = False
    return np.flatnonzero(mask)


def stiffness_matrix(model: BeamModel, d: float) -> np.ndarray:
    """Unconstrained global stiffness at damage level d."""
    if not 0.0 <= d < 1.0:
        raise SimulationError(f"damage {d} outside [0, 1)")
    k_ax, k_bd, _ = assemble_unconstrained(model)
    e_eff = model.elastic_modulus * (1.0 - d)
    return e_eff * k_ax + e_eff * model.inertia * k_bd


def assemble_system(model: BeamModel, d: float = 0.0) -> SystemMatrices:
    """Constrained (M, C, K) at damage level d, with C = alpha M + beta K."""
    k_g = stiffness_matrix(model, d)
    _, _, m_g = assemble_unconstrained(model)
    free = _free_dofs(model)
    k = k_g[np.ix_(free, free)]
    m = m_g[np.ix_(free, free)]
    c = model.alpha_damp * m + model.beta_damp * k
    cond = np.linalg.cond(k)
    if not np.isfinite(cond) or cond > 1e14:
        raise SimulationError("constrained stiffness is singular; check boundary handling")
    return SystemMatrices(mass=m, damping=c, stiffness=k, free_dofs=free)


def fundamental_frequency(model: BeamModel, d: float = 0.0) -> float:
    """First natural frequency in Hz from the generalized eigenproblem."""
    sys = assemble_system(model, d)
    w2 = eigh(sys.stiffness, sys.mass, eigvals_only=True,
              subset_by_index=(0, 0))[0]
    return float(np.sqrt(w2) / (2.0 * np.pi))


def analytic_fundamental_frequency(model: BeamModel) -> float:
    """Simply supported closed form: (pi/L)^2 sqrt(EI / rho A) / 2 pi."""
    ei = model.elastic_modulus * model.inertia
    rho_a = model.density * model.area
    return float((np.pi / model.length) ** 2 * np.sqrt(ei / rho_a) / (2.0 * np.pi))


def rayleigh_damping_ratio(model: BeamModel, frequency_hz: float | None = None) -> float:
    """zeta(f) = alpha/(2 w) + beta w/2 at the given (default: fundamental) mode."""
    f = frequency_hz if frequency_hz is not None else analytic_fundamental_frequency(model)
    w = 2.0 * np.pi * f
    return float(model.alpha_damp / (2.0 * w) + model.beta_damp * w / 2.0)


def sensor_nodes(model: BeamModel) -> tuple:
    """Nodes nearest quarter-, third-, and mid-span (L/3 rounds to the grid)."""
    le = model.element_length
    return (int(round(model.length / 4.0 / le)),
            int(round(model.length / 3.0 / le)),
            int(round(model.length / 2.0 / le)))


def _vertical_positions(free: np.ndarray, nodes) -> list:
    lookup = {dof: i for i, dof in enumerate(free)}
    return [lookup[3 * n + 1] for n in nodes]


# ------------------------------------------------------------------- loads

def distributed_load_vector(model: BeamModel, q: float) -> np.ndarray:
    """Consistent nodal loads for a uniform vertical load q (positive down)."""
    n_dof = 3 * model.n_nodes
    f = np.zeros(n_dof)
    le = model.element_length
    for e in range(model.n_elements):
        base = 3 * e
        f[base + 1] += q * le / 2.0
        f[base + 2] += q * le**2 / 12.0
        f[base + 4] += q * le / 2.0
        f[base + 5] -= q * le**2 / 12.0
    return f


def thermal_load(model: BeamModel, d: float, t_ambient: float,
                 smoothed: float) -> tuple:
    """Thermal nodal forces and the updated smoother state.

    Axial: equivalent end forces E_eff A alpha (T - T_ref). Bending: the
    through-depth gradient is ambient minus the smoothed interior
    temperature, which tracks the ambient history through an exponential
    smoothing filter (update factor 0.1) to represent thermal inertia;
    equivalent end moments E_eff I_eff alpha * gradient * beta_thermal.
    """
    smoothed = smoothed + GRADIENT_SMOOTHING * (t_ambient - smoothed)
    gradient = (t_ambient - smoothed) * BETA_THERMAL
    delta_t = t_ambient - T_REFERENCE_C
    e_eff = model.elastic_modulus * (1.0 - d)
    i_eff = model.inertia * (1.0 - d)
    axial = e_eff * model.area * model.alpha_thermal * delta_t
    moment = e_eff * i_eff * model.alpha_thermal * gradient
    n_dof = 3 * model.n_nodes
    f = np.zeros(n_dof)
    for e in range(model.n_elements):
        base = 3 * e
        f[base + 0] -= axial
        f[base + 3] += axial
        f[base + 2] -= moment
        f[base + 5] += moment
    return f, smoothed


_HOURLY_SHAPE = {
    # broad two-peak commuter curve
    "A": np.array([1.2, 0.8, 0.6, 0.6, 1.0, 2.4, 5.2, 7.6, 8.0, 6.6, 5.2, 5.0,
                   5.2, 5.0, 4.8, 5.2, 6.6, 8.0, 7.8, 6.0, 4.4, 3.4, 2.8, 2.4]),
    # narrow high-amplitude peaks
    "B": np.array([1.1, 0.8, 0.6, 0.6, 1.0, 2.6, 6.0, 8.8, 8.2, 4.6, 3.8, 3.5,
                   3.8, 3.6, 3.5, 4.4, 6.4, 8.8, 9.0, 5.8, 4.6, 3.6, 2.6, 1.9]),
}
_SEASONAL_PHASE = {"A": np.pi / 2.0, "B": np.pi / 2.0 + 0.6}


def gen_loads(scenario: str, seed: int, duration_days: int,
              start_day: int = 0, base_scale: float = 36.0) -> LoadProfile:
    """Deterministic synthetic load/temperature realization.

    Hourly traffic shares are normalized to sum to 100 per day and scaled by
    one N(1, 0.1) daily factor (clipped at zero). Temperature is a yearly
    sinusoid with a scenario-specific phase ("different years"), a diurnal
    sinusoid, and AR(1) noise (phi=0.8, unit-variance innovations), rounded
    to 0.1 degC.
    """
    if scenario not in _HOURLY_SHAPE:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    shape = _HOURLY_SHAPE[scenario]
    hourly = shape / shape.sum() * 100.0
    daily = np.clip(rng.normal(1.0, 0.1, size=duration_days), 0.0, None)

    hours = np.arange(duration_days * 24)
    day = start_day + hours / 24.0
    seasonal = 10.0 + 10.0 * np.sin(2.0 * np.pi * day / 365.0
                                    - _SEASONAL_PHASE[scenario])
    diurnal = 5.0 * np.sin(2.0 * np.pi * (hours % 24) / 24.0 - np.pi / 2.0)
    eps = rng.normal(0.0, 1.0, size=hours.size)
    noise = np.empty(hours.size)
    prev = 0.0
    for i in range(hours.size):
        prev = 0.8 * prev + eps[i]
        noise[i] = prev
    temperature = np.round((seasonal + diurnal + noise) * 10.0) / 10.0
    return LoadProfile(scenario=scenario, base_scale=base_scale,
                       hourly_factors=hourly, daily_factors=daily,
                       temperature=temperature, start_day=start_day)


# ---------------------------------------------------------------- dynamics

class NewmarkOperator:
    """Average-acceleration Newmark stepper with a cached factorization."""

    def __init__(self, mass, damping, stiffness, dt, beta=0.25, gamma=0.5):
        self.mass = mass
        self.damping = damping
        self.dt = dt
        self.beta = beta
        self.gamma = gamma
        self._a1 = 1.0 / (beta * dt * dt)
        self._a2 = 1.0 / (beta * dt)
        self._a3 = 1.0 / (2.0 * beta) - 1.0
        self._b1 = gamma / (beta * dt)
        self._b2 = gamma / beta - 1.0
        self._b3 = dt * (gamma / (2.0 * beta) - 1.0)
        k_eff = stiffness + self._b1 * damping + self._a1 * mass
        try:
            self._chol = cho_factor(k_eff)
        except np.linalg.LinAlgError as exc:
            raise SimulationError("effective stiffness factorization failed") from exc

    def step(self, x, v, a, f):
        rhs = (f
               + self.mass @ (self._a1 * x + self._a2 * v + self._a3 * a)
               + self.damping @ (self._b1 * x + self._b2 * v + self._b3 * a))
        x_new = cho_solve(self._chol, rhs)
        a_new = self._a1 * (x_new - x) - self._a2 * v - self._a3 * a
        v_new = v + self.dt * ((1.0 - self.gamma) * a + self.gamma * a_new)
        return x_new, v_new, a_new


def newmark_step(m, c, k, state, f, dt):
    """One average-acceleration step; state is the (x, xdot, xddot) triple."""
    op = NewmarkOperator(m, c, k, dt)
    return op.step(*state, f)


# ------------------------------------------------------------------ damage

def update_damage(state: DamageState, v_max: float) -> DamageState:
    """Threshold growth law, applied once per main step.

    delta D = beta (1 - D) ((v_max - U_ref)/U_ref)^p when v_max > U_ref,
    zero otherwise; the result saturates just below 1.
    """
    if v_max < 0.0:
        raise SimulationError("v_max must be non-negative")
    if v_max <= state.u_ref:
        return state
    over = (v_max - state.u_ref) / state.u_ref
    delta = state.beta_damage * (1.0 - state.d) * over ** state.exponent
    return replace(state, d=min(state.d + delta, 1.0 - 1e-12))


# --------------------------------------------------------------- main loop

@dataclass(frozen=True)
class SimConfig:
    """Knobs of one run-to-failure simulation."""

    dt_main: float = 600.0  # record cadence, 10 min
    dt_sub: float = 60.0  # Newmark substep
    failure_damage: float = 0.3
    max_days: float = 183.0  # ~6 months duration guard
    beta_damage: float = 3.2e-4
    u_ref: float = 0.0125
    damage_exponent: float = 2.0
    base_scale: float = 36.0


def run_to_failure(model: BeamModel, scenario: str, seed: int,
                   start_day: int = 0, sim: SimConfig | None = None,
                   unit_id: str | None = None) -> SimulatedUnit:
    """Simulate one unit from pristine state until D >= failure threshold.

    Emits one record per main step: sensor deflections at quarter/third/mid
    span, the applied load, ambient temperature, and the ground-truth damage
    (withheld from models downstream). Fully determined by
    (scenario, seed, start_day, sim). Matrices are reassembled and damage is
    updated once per main step; the within-step stiffness change (at most
    one damage increment) is negligible.
    """
    sim = sim or SimConfig()
    n_sub = int(round(sim.dt_main / sim.dt_sub))
    if n_sub < 1 or abs(n_sub * sim.dt_sub - sim.dt_main) > 1e-9:
        raise SimulationError("dt_main must be an integer multiple of dt_sub")
    profile = gen_loads(scenario, seed, duration_days=int(sim.max_days) + 2,
                        start_day=start_day, base_scale=sim.base_scale)
    damage = DamageState(d=0.0, u_ref=sim.u_ref, beta_damage=sim.beta_damage,
                         exponent=sim.damage_exponent)
    free = _free_dofs(model)
    v_pos = _vertical_positions(free, sensor_nodes(model))
    mid_pos = v_pos[2]

    x = np.zeros(free.size)
    v = np.zeros(free.size)
    a = None
    smoothed_t = profile.temperature_at(0.0)  # filter starts at ambient

    rows = {name: [] for name in UNIT_COLUMNS}
    t = 0.0
    guard_s = sim.max_days * 86400.0
    while damage.d < sim.failure_damage:
        if t >= guard_s:
            raise DurationGuardExceeded(
                f"unit did not fail within {sim.max_days} simulated days "
                f"(D={damage.d:.4f})")
        sys = assemble_system(model, damage.d)
        op = NewmarkOperator(sys.mass, sys.damping, sys.stiffness, sim.dt_sub)
        f_thermal, smoothed_t = thermal_load(
            model, damage.d, profile.temperature_at(t), smoothed_t)
        if a is None:
            f0 = (distributed_load_vector(model, profile.q_at(t)) + f_thermal)[free]
            a = np.linalg.solve(sys.mass,
                                f0 - sys.damping @ v - sys.stiffness @ x)
        v_max = 0.0
        for i in range(1, n_sub + 1):
            t_sub = t + i * sim.dt_sub
            f_full = distributed_load_vector(model, profile.q_at(t_sub)) + f_thermal
            x, v, a = op.step(x, v, a, f_full[free])
            v_max = max(v_max, abs(x[mid_pos]))
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"substep diverged at t={t}")
        t += sim.dt_main
        damage = update_damage(damage, v_max)
        rows["t_s"].append(t)
        rows["v_quarter"].append(x[v_pos[0]])
        rows["v_third"].append(x[v_pos[1]])
        rows["v_mid"].append(x[v_pos[2]])
        rows["q"].append(profile.q_at(t))
        rows["T_ambient"].append(profile.temperature_at(t))
        rows["D_true"].append(damage.d)

    columns = {name: np.asarray(vals) for name, vals in rows.items()}
    return SimulatedUnit(
        unit_id=unit_id or f"{scenario}{seed}",
        scenario=scenario, seed=seed, start_day=start_day, columns=columns)


def static_midspan_deflection(model: BeamModel, q: float, d: float = 0.0) -> float:
    """Mid-span deflection under uniform q from a static solve."""
    sys = assemble_system(model, d)
    f = distributed_load_vector(model, q)[sys.free_dofs]
    x = np.linalg.solve(sys.stiffness, f)
    mid = _vertical_positions(sys.free_dofs, [sensor_nodes(model)[2]])[0]
    return float(x[mid])
