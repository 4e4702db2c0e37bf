"""Time evolution of the coupled particle-field system.

Two independent schemes share the exact free flow:

* ``strang``: the symmetric splitting Phi^0_{dt/2} o Kick_dt o Phi^0_{dt/2},
  where the kick integrates du/dt = G(u) with one classical 4-stage
  Runge-Kutta step.  The linear part (ballistic drift and the e^{-i t |k|}
  field rotation) is applied exactly, so the |k| multiplier never limits the
  step size at large cutoffs.
* ``interaction-rk4``: non-autonomous RK4 on the interaction-picture field
  du~/dt = vartheta(t, u~); the recorded samples are mapped back to physical
  variables through the free flow at each sample time.

Both schemes are second-order accurate in the physical variables and are
tested against each other.  Steps are fixed; adaptivity is deliberately
excluded so that convergence-order measurements and property tests are
reproducible.

Diagnostics (energy and the X^sigma norms at sigma = 0, 1/2, 1) are
recomputed from the state at every step, never interpolated.  Particle
positions and momenta are recorded every step; field snapshots are kept at a
configurable stride (endpoints always included).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import KGrid, PolarizationBasis
from .interaction import (
    HypothesisReport,
    PotentialSpec,
    check_hypotheses,
    default_basis,
    hamiltonian,
    nonlinearity_G,
    vartheta,
)
from .state import (
    FieldState,
    ParticleSpec,
    ParticleState,
    PhaseSpacePoint,
    free_flow,
    phase_norm,
    point_to_json,
)

__all__ = [
    "Trajectory",
    "DivergenceReport",
    "FlaggedHypothesesError",
    "NumericalBlowupError",
    "strang_step",
    "rk4_interaction_step",
    "evolve",
    "divergence_report",
    "trajectory_to_csv",
    "export_states_json",
]

SCHEMES = ("strang", "interaction-rk4")
NORM_SIGMAS = (0.0, 0.5, 1.0)


class FlaggedHypothesesError(RuntimeError):
    """Raised when evolution is requested for a spec whose form-factor norms
    fail the resolution-stability check and no override was given."""


class NumericalBlowupError(RuntimeError):
    """Raised when the state stops being finite; carries the last state."""

    def __init__(self, message: str, time: float, state: PhaseSpacePoint):
        super().__init__(message)
        self.time = time
        self.state = state


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniform-step trajectory with per-step diagnostics.

    ``times``/``energies``/``norms``/``p``/``q`` cover every step;
    ``stored_indices`` marks the steps whose field snapshot is retained, so
    full phase-space states can be reconstructed there (endpoints always).
    ``norms`` columns are phase_norm at sigma = 0, 1/2, 1 (inhomogeneous).
    """

    scheme: str
    dt: float
    times: np.ndarray
    energies: np.ndarray
    norms: np.ndarray
    p: np.ndarray
    q: np.ndarray
    store_every: int
    stored_indices: np.ndarray
    stored_fields: tuple

    def __post_init__(self):
        if np.any(np.diff(self.times) * np.sign(self.dt) <= 0):
            raise ValueError("trajectory times must be strictly monotone")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def stored_times(self) -> np.ndarray:
        return self.times[self.stored_indices]

    def stored_states(self) -> list[PhaseSpacePoint]:
        """Full phase-space states at the field-snapshot steps."""
        return [
            PhaseSpacePoint(ParticleState(self.p[k], self.q[k]), fld)
            for k, fld in zip(self.stored_indices, self.stored_fields)
        ]

    def endpoint(self) -> PhaseSpacePoint:
        return PhaseSpacePoint(
            ParticleState(self.p[-1], self.q[-1]), self.stored_fields[-1]
        )


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    """Separation of two nearby trajectories against a Gronwall envelope.

    ``fitted_c`` is the least-squares slope of log(d(t)/epsilon) against t;
    ``envelope_c`` is the smallest constant with d(t) <= epsilon e^{c t} at
    every sample, so ``envelope_violations`` counts violations of that bound
    (with a relative rounding allowance) and is the reported check.
    """

    epsilon: float
    times: np.ndarray
    divergence: np.ndarray
    fitted_c: float
    envelope_c: float
    envelope_violations: int

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "times": self.times.tolist(),
            "divergence": self.divergence.tolist(),
            "fitted_c": self.fitted_c,
            "envelope_c": self.envelope_c,
            "envelope_violations": self.envelope_violations,
        }


def _rk4_kick(u: PhaseSpacePoint, dt: float, spec, pot, grid, basis) -> PhaseSpacePoint:
    k1 = nonlinearity_G(u, spec, pot, grid, basis)
    k2 = nonlinearity_G(u + (dt / 2.0) * k1, spec, pot, grid, basis)
    k3 = nonlinearity_G(u + (dt / 2.0) * k2, spec, pot, grid, basis)
    k4 = nonlinearity_G(u + dt * k3, spec, pot, grid, basis)
    return u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def strang_step(u: PhaseSpacePoint, dt: float, spec: ParticleSpec, pot: PotentialSpec,
                grid: KGrid, basis: Optional[PolarizationBasis] = None) -> PhaseSpacePoint:
    """One symmetric splitting step; dt may be negative (time reversal)."""
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    basis = default_basis(grid) if basis is None else basis
    half = free_flow(u, dt / 2.0, spec)
    kicked = _rk4_kick(half, dt, spec, pot, grid, basis)
    return free_flow(kicked, dt / 2.0, spec)


def rk4_interaction_step(t: float, u: PhaseSpacePoint, dt: float, spec: ParticleSpec,
                         pot: PotentialSpec, grid: KGrid,
                         basis: Optional[PolarizationBasis] = None) -> PhaseSpacePoint:
    """One RK4 step on the interaction-picture equation du/dt = vartheta(t, u)."""
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    basis = default_basis(grid) if basis is None else basis
    k1 = vartheta(t, u, spec, pot, grid, basis)
    k2 = vartheta(t + dt / 2.0, u + (dt / 2.0) * k1, spec, pot, grid, basis)
    k3 = vartheta(t + dt / 2.0, u + (dt / 2.0) * k2, spec, pot, grid, basis)
    k4 = vartheta(t + dt, u + dt * k3, spec, pot, grid, basis)
    return u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_count(T: float, dt: float) -> int:
    ratio = T / dt
    n = int(round(ratio))
    if n < 0 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise ValueError(f"dt={dt} must divide T={T} into a whole number of forward steps")
    return n


def evolve(u0: PhaseSpacePoint, T: float, dt: float, spec: ParticleSpec,
           pot: PotentialSpec, grid: KGrid, scheme: str = "strang",
           store_every: int = 1, basis: Optional[PolarizationBasis] = None,
           allow_flagged: bool = False,
           hypothesis_report: Optional[HypothesisReport] = None) -> Trajectory:
    """Evolve u0 over [0, T] in steps of dt, recording diagnostics each step.

    Refuses to start when the form-factor integrability check flags the spec,
    unless allow_flagged is set; a precomputed report may be passed to avoid
    re-checking (ensemble pushes reuse one report for every sample).
    Recorded samples are physical variables for both schemes.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if store_every < 1:
        raise ValueError("store_every must be >= 1")
    n = _step_count(T, dt) if T != 0.0 else 0
    if hypothesis_report is None:
        hypothesis_report = check_hypotheses(spec, 0.5, grid)
    if hypothesis_report.flagged and not allow_flagged:
        raise FlaggedHypothesesError(
            "form-factor norms are not resolution-stable on this grid "
            "(see check_hypotheses); pass allow_flagged=True to override"
        )
    basis = default_basis(grid) if basis is None else basis

    n_part, d = u0.p.shape
    times = np.arange(n + 1) * dt
    energies = np.empty(n + 1)
    norms = np.empty((n + 1, 3))
    p_hist = np.empty((n + 1, n_part, d))
    q_hist = np.empty((n + 1, n_part, d))
    stored_indices = [0]
    stored_fields = [u0.field]

    def record(k: int, physical: PhaseSpacePoint) -> None:
        energies[k] = hamiltonian(physical, spec, pot, grid, basis)
        norms[k] = [phase_norm(physical, s) for s in NORM_SIGMAS]
        p_hist[k] = physical.p
        q_hist[k] = physical.q
        if k > 0 and (k % store_every == 0 or k == n):
            stored_indices.append(k)
            stored_fields.append(physical.field)

    record(0, u0)
    state = u0
    for k in range(1, n + 1):
        if scheme == "strang":
            state = strang_step(state, dt, spec, pot, grid, basis)
            physical = state
        else:
            state = rk4_interaction_step(times[k - 1], state, dt, spec, pot, grid, basis)
            physical = free_flow(state, times[k], spec)
        if not physical.is_finite():
            raise NumericalBlowupError(
                f"non-finite state at t={times[k]:.6g} (step {k}); "
                f"last finite |p|={np.abs(p_hist[k - 1]).max():.3e}, "
                f"norm_X0={norms[k - 1, 0]:.3e}",
                time=float(times[k]),
                state=physical,
            )
        record(k, physical)

    return Trajectory(
        scheme=scheme,
        dt=float(dt),
        times=times,
        energies=energies,
        norms=norms,
        p=p_hist,
        q=q_hist,
        store_every=store_every,
        stored_indices=np.asarray(stored_indices),
        stored_fields=tuple(stored_fields),
    )


def divergence_report(u0: PhaseSpacePoint, epsilon: float, direction: PhaseSpacePoint,
                      T: float, dt: float, spec: ParticleSpec, pot: PotentialSpec,
                      grid: KGrid, scheme: str = "strang",
                      basis: Optional[PolarizationBasis] = None,
                      allow_flagged: bool = False) -> DivergenceReport:
    """Track the X^0 separation of u0 and u0 + epsilon*direction.

    direction must be X^0-normalized, so the separation at t=0 equals
    epsilon.  The least-squares constant fits log(d/d(0)) = c t; the
    envelope constant is the largest per-sample slope, giving a bound
    d(t) <= d(0) e^{c t} whose violations are counted.  Both anchor at the
    *measured* d(0) rather than epsilon: forming u0 + epsilon*direction and
    subtracting u0 again reproduces epsilon only up to a cancellation error
    of relative size ~1e-16 |u0|/epsilon, which would otherwise dwarf any
    roundoff slack in the violation count.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    dir_norm = phase_norm(direction, 0.0)
    if abs(dir_norm - 1.0) > 1e-8:
        raise ValueError(f"direction must have unit X^0 norm, got {dir_norm}")
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    report = check_hypotheses(spec, 0.5, grid)
    if report.flagged and not allow_flagged:
        raise FlaggedHypothesesError(
            "form-factor norms are not resolution-stable on this grid"
        )
    basis = default_basis(grid) if basis is None else basis

    n = _step_count(T, dt) if T != 0.0 else 0
    times = np.arange(n + 1) * dt
    dist = np.empty(n + 1)
    a = u0
    b = u0 + epsilon * direction
    dist[0] = phase_norm(b - a, 0.0)
    ta = a
    tb = b
    for k in range(1, n + 1):
        if scheme == "strang":
            ta = strang_step(ta, dt, spec, pot, grid, basis)
            tb = strang_step(tb, dt, spec, pot, grid, basis)
            pa, pb = ta, tb
        else:
            ta = rk4_interaction_step(times[k - 1], ta, dt, spec, pot, grid, basis)
            tb = rk4_interaction_step(times[k - 1], tb, dt, spec, pot, grid, basis)
            pa = free_flow(ta, times[k], spec)
            pb = free_flow(tb, times[k], spec)
        if not (pa.is_finite() and pb.is_finite()):
            raise NumericalBlowupError("non-finite state in divergence run",
                                       time=float(times[k]), state=pb)
        dist[k] = phase_norm(pb - pa, 0.0)

    safe = np.maximum(dist, 1e-300)
    log_ratio = np.log(safe / safe[0])
    tpos = times[1:]
    fitted_c = float(np.sum(tpos * log_ratio[1:]) / np.sum(tpos**2)) if n else 0.0
    envelope_c = float(np.max(log_ratio[1:] / tpos)) if n else 0.0
    envelope = safe[0] * np.exp(envelope_c * times)
    violations = int(np.sum(dist > envelope * (1.0 + 1e-12)))
    return DivergenceReport(
        epsilon=float(epsilon),
        times=times,
        divergence=dist,
        fitted_c=fitted_c,
        envelope_c=envelope_c,
        envelope_violations=violations,
    )


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write per-step diagnostics: t, H, the three norms, then flat p and q."""
    n_part, d = traj.p.shape[1:]
    header = ["t", "H", "norm_X0", "norm_X12", "norm_X1"]
    header += [f"p_{i}_{mu}" for i in range(n_part) for mu in range(d)]
    header += [f"q_{i}_{mu}" for i in range(n_part) for mu in range(d)]
    steps = traj.times.size
    table = np.column_stack([
        traj.times,
        traj.energies,
        traj.norms,
        traj.p.reshape(steps, -1),
        traj.q.reshape(steps, -1),
    ])
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="")


def export_states_json(traj: Trajectory, path) -> None:
    """Dump the retained full states (with field snapshots) as a JSON list."""
    payload = []
    for t, state in zip(traj.stored_times, traj.stored_states()):
        entry = {"t": float(t)}
        entry.update(point_to_json(state))
        payload.append(entry)
    with open(path, "w") as fh:
        json.dump(payload, fh)
