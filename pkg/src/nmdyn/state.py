"""Phase-space data model: particles plus transverse field, and the X^sigma norms.

A phase-space point is u = (p, q, alpha): n particle momenta/positions in R^d
and one complex amplitude alpha_lam(k_j) per polarization and grid node.  The
norms are

    ||alpha||^2_{hdot^sigma} = sum_lam int |k|^{2 sigma} |alpha_lam(k)|^2 dk
    ||alpha||^2_{h^sigma}    = sum_lam int (1+|k|^2)^sigma |alpha_lam(k)|^2 dk
    ||u||^2_{X^sigma}        = sum_i (|p_i|^2 + |q_i|^2) + ||alpha||^2_{h^sigma}

with every integral routed through the grid quadrature, so all tolerances
downstream are grid-consistent.  The particle block carries the complex
structure z = q + i p; the real inner product on X^sigma is

    Re<a, b>_sigma = sum Re(conj(z_a) z_b) + Re sum_lam int conj(alpha_a) (1+|k|^2)^sigma alpha_b dk

(antilinear in the first slot before taking the real part).

The free flow is exact:  Phi_t^0 (p, q, alpha) = (p, q_i + t p_i/m_i,
e^{-i t |k|} alpha_lam), a one-parameter group.

All containers are value-semantic and treated as immutable; operations return
new objects.  Finiteness is *not* validated here (the integrator checks it
after every step, where a failure has diagnostic context).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import KGrid, integrate_k

__all__ = [
    "ParticleState",
    "ParticleSpec",
    "FieldState",
    "PhaseSpacePoint",
    "SobolevWeight",
    "field_norm",
    "phase_norm",
    "real_inner",
    "free_flow",
    "point_to_json",
    "point_from_json",
]

HOMOGENEOUS = "homogeneous"
INHOMOGENEOUS = "inhomogeneous"


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Momenta and positions, arrays of shape (n, d)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 2:
            raise ValueError(f"p and q must share shape (n, d), got {p.shape} vs {q.shape}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]


@dataclass(frozen=True, eq=False)
class ParticleSpec:
    """Masses and one form factor per particle (form factors are duck-typed
    radial profiles; see the interaction module)."""

    masses: np.ndarray
    form_factors: Sequence

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        if masses.ndim != 1 or not np.all(masses > 0):
            raise ValueError("masses must be a 1-d array of positive numbers")
        if len(self.form_factors) != masses.shape[0]:
            raise ValueError(
                f"{len(self.form_factors)} form factors for {masses.shape[0]} masses"
            )
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "form_factors", tuple(self.form_factors))

    @property
    def n(self) -> int:
        return self.masses.shape[0]


@dataclass(frozen=True, eq=False)
class FieldState:
    """Complex amplitudes alpha_lam(k_j), array of shape (d-1, M) on a KGrid."""

    grid: KGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        expected = (self.grid.d - 1, self.grid.node_count)
        if values.shape != expected:
            raise ValueError(f"field values must have shape {expected}, got {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class PhaseSpacePoint:
    """u = (p, q, alpha); doubles as its own tangent type for the integrators."""

    particles: ParticleState
    field: FieldState

    @property
    def p(self) -> np.ndarray:
        return self.particles.p

    @property
    def q(self) -> np.ndarray:
        return self.particles.q

    @property
    def alpha(self) -> np.ndarray:
        return self.field.values

    @property
    def grid(self) -> KGrid:
        return self.field.grid

    # -- linear-space operations used by the Runge-Kutta stages -------------
    def __add__(self, other: "PhaseSpacePoint") -> "PhaseSpacePoint":
        return PhaseSpacePoint(
            ParticleState(self.p + other.p, self.q + other.q),
            FieldState(self.grid, self.alpha + other.alpha),
        )

    def __sub__(self, other: "PhaseSpacePoint") -> "PhaseSpacePoint":
        return PhaseSpacePoint(
            ParticleState(self.p - other.p, self.q - other.q),
            FieldState(self.grid, self.alpha - other.alpha),
        )

    def __rmul__(self, c: float) -> "PhaseSpacePoint":
        return PhaseSpacePoint(
            ParticleState(c * self.p, c * self.q),
            FieldState(self.grid, c * self.alpha),
        )

    def is_finite(self) -> bool:
        return (
            bool(np.all(np.isfinite(self.p)))
            and bool(np.all(np.isfinite(self.q)))
            and bool(np.all(np.isfinite(self.alpha)))
        )


@dataclass(frozen=True)
class SobolevWeight:
    """Exponent and flavor of a field weight; sigma in [0, 1] operationally.

    The inhomogeneous weight is what enters the X^sigma block operator
    diag(1, 1, (1+|k|^2)^sigma) used by real_inner.
    """

    sigma: float
    flavor: str = INHOMOGENEOUS

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.flavor not in (HOMOGENEOUS, INHOMOGENEOUS):
            raise ValueError(f"unknown flavor {self.flavor!r}")

    def field_weights(self, grid: KGrid) -> np.ndarray:
        if self.flavor == HOMOGENEOUS:
            return grid.absk ** (2.0 * self.sigma)
        return (1.0 + grid.absk**2) ** self.sigma


def field_norm(alpha: FieldState, sigma: float, flavor: str = INHOMOGENEOUS) -> float:
    """Weighted L^2 norm of the field, sqrt(sum_lam int weight |alpha_lam|^2 dk)."""
    w = SobolevWeight(sigma, flavor).field_weights(alpha.grid)
    dens = np.sum(np.abs(alpha.values) ** 2, axis=0) * w
    return float(np.sqrt(integrate_k(alpha.grid, dens)))


def phase_norm(u: PhaseSpacePoint, sigma: float, flavor: str = INHOMOGENEOUS) -> float:
    """||u||_{X^sigma} = sqrt( sum_i (|p_i|^2 + |q_i|^2) + ||alpha||^2 )."""
    particle = float(np.sum(u.p**2) + np.sum(u.q**2))
    return float(np.sqrt(particle + field_norm(u.field, sigma, flavor) ** 2))


def real_inner(a: PhaseSpacePoint, b: PhaseSpacePoint, sigma: float) -> float:
    """Re<a, b>_{X^sigma}: z = q + i p on particles, (1+|k|^2)^sigma on the field.

    Symmetric and bilinear over the reals; real_inner(u, u, sigma) equals
    phase_norm(u, sigma, inhomogeneous)**2.
    """
    if a.grid.node_count != b.grid.node_count or a.grid.d != b.grid.d:
        raise ValueError("phase-space points live on incompatible grids")
    za = a.q + 1j * a.p
    zb = b.q + 1j * b.p
    particle = float(np.sum(np.conj(za) * zb).real)
    w = SobolevWeight(sigma, INHOMOGENEOUS).field_weights(a.grid)
    dens = np.sum(np.conj(a.alpha) * b.alpha, axis=0) * w
    return particle + float(np.real(integrate_k(a.grid, dens)))


def free_flow(u: PhaseSpacePoint, t: float, spec: ParticleSpec) -> PhaseSpacePoint:
    """Exact free flow Phi_t^0: ballistic particles, unimodular field phases.

    (p, q, alpha) -> (p, q_i + t p_i/m_i, e^{-i t |k|} alpha_lam).  Exact
    group law and norm preservation up to rounding.
    """
    q_new = u.q + t * u.p / spec.masses[:, None]
    phases = np.exp(-1j * t * u.grid.absk)
    return PhaseSpacePoint(
        ParticleState(u.p.copy(), q_new),
        FieldState(u.grid, u.alpha * phases),
    )


def point_to_json(u: PhaseSpacePoint) -> dict:
    """JSON-serializable dict {p, q, alpha_re, alpha_im}; alpha flattened C-order."""
    return {
        "p": u.p.tolist(),
        "q": u.q.tolist(),
        "alpha_re": u.alpha.real.ravel().tolist(),
        "alpha_im": u.alpha.imag.ravel().tolist(),
    }


def point_from_json(data: dict, grid: KGrid) -> PhaseSpacePoint:
    """Inverse of :func:`point_to_json` for a known grid."""
    p = np.asarray(data["p"], dtype=float)
    q = np.asarray(data["q"], dtype=float)
    shape = (grid.d - 1, grid.node_count)
    re = np.asarray(data["alpha_re"], dtype=float)
    im = np.asarray(data["alpha_im"], dtype=float)
    if re.size != shape[0] * shape[1] or im.size != re.size:
        raise ValueError(
            f"alpha arrays of length {re.size} incompatible with grid ({shape[0]}x{shape[1]})"
        )
    alpha = (re + 1j * im).reshape(shape)
    return PhaseSpacePoint(ParticleState(p, q), FieldState(grid, alpha))
