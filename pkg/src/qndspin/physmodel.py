"""Physical parameters and the continuous-time spin/measurement models.

Spins are counted in units of hbar, fields in tesla, rates in 1/s, and
vapour quantities in cgs (cm, cm^2, cm^3) as is customary for alkali cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# 2*pi * 28 GHz/T
GAMMA_ELECTRON = 2.0 * np.pi * 28e9


@dataclass(frozen=True)
class PhysicalParams:
    n_rb: float = 3.6e14
    sigma_se: float = 1.9e-14
    v_bar: float = 4.75e4
    gamma_e: float = GAMMA_ELECTRON
    q_slow: float = 6.0
    nuclear_spin: float = 1.5
    cell_length: float = 3.0
    beam_area: float = 0.049

    def __post_init__(self):
        for name in ("sigma_se", "v_bar", "gamma_e", "q_slow", "cell_length", "beam_area"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        # zero density is accepted so that limits like n_rb -> 0 stay expressible
        if not self.n_rb >= 0:
            raise ValueError("n_rb must be non-negative")
        if self.nuclear_spin <= 0 or not float(2 * self.nuclear_spin).is_integer():
            raise ValueError("nuclear_spin must be a positive half-integer")

    @property
    def gamma(self) -> float:
        """Slowed-down gyromagnetic ratio of the coupled electron-nuclear spin."""
        return self.gamma_e / self.q_slow

    @property
    def volume(self) -> float:
        return self.cell_length * self.beam_area


@dataclass(frozen=True)
class RelaxationRates:
    t1_inv: float
    t2_inv: float

    def __post_init__(self):
        if self.t1_inv < 0:
            raise ValueError("t1_inv must be non-negative")
        if self.t2_inv < self.t1_inv:
            raise ValueError(
                f"t2_inv ({self.t2_inv}) must not be smaller than t1_inv ({self.t1_inv})"
            )

    def plus(self, rate: float, transverse_only: bool = False) -> "RelaxationRates":
        """Return rates with an extra relaxation channel added."""
        if transverse_only:
            return RelaxationRates(self.t1_inv, self.t2_inv + rate)
        return RelaxationRates(self.t1_inv + rate, self.t2_inv + rate)


@dataclass(frozen=True)
class DynamicsModel:
    f_matrix: np.ndarray
    q_eq: np.ndarray
    sigma_noise: np.ndarray
    b_field: np.ndarray
    omega_l: float


@dataclass(frozen=True)
class MeasurementModel:
    g_coupling: float
    eta: float
    photon_flux: float
    delta: float

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.photon_flux < 0:
            raise ValueError("photon_flux must be non-negative")

    @property
    def gain(self) -> float:
        """Photocurrent per unit J_z, eta * g * Ndot."""
        return self.eta * self.g_coupling * self.photon_flux

    @property
    def h_row(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.gain])

    @property
    def r_delta(self) -> float:
        """Shot-noise variance of one sample, eta * Ndot / delta."""
        return self.eta * self.photon_flux / self.delta

    @property
    def strength(self) -> float:
        """Measurement rate per spin^2, (gain^2 / noise power density)."""
        return self.eta * self.g_coupling**2 * self.photon_flux


def atom_number(p: PhysicalParams) -> float:
    return p.n_rb * p.cell_length * p.beam_area


def se_rate(p: PhysicalParams) -> float:
    return p.sigma_se * p.n_rb * p.v_bar


def cross_matrix(v) -> np.ndarray:
    """Matrix [v]_x with [v]_x @ u == np.cross(v, u)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def relaxation_matrix(b_field, rates: RelaxationRates) -> np.ndarray:
    b = np.asarray(b_field, dtype=float)
    norm = np.linalg.norm(b)
    if norm == 0.0:
        return rates.t1_inv * np.eye(3)
    bhat = b / norm
    return rates.t2_inv * np.eye(3) + (rates.t1_inv - rates.t2_inv) * np.outer(bhat, bhat)


def fdt_noise(f, q) -> np.ndarray:
    """Diffusion matrix F Q + Q F^T that keeps Q stationary under drift -F."""
    f = np.asarray(f, dtype=float)
    q = np.asarray(q, dtype=float)
    sigma = f @ q + q @ f.T
    return 0.5 * (sigma + sigma.T)


def build_dynamics(
    p: PhysicalParams, b_field, rates: RelaxationRates, n_atoms: float
) -> DynamicsModel:
    """Drift, stationary covariance and noise strength for dJ = -F J dt + sqrt(sigma) dW.

    The precession part -gamma [B]_x rotates a spin along z onto x after a
    third of a Larmor period when B points along [1, 1, 1].
    """
    if not isinstance(rates, RelaxationRates):
        raise TypeError("rates must be a RelaxationRates")
    b = np.array(b_field, dtype=float).reshape(3)
    if not np.all(np.isfinite(b)):
        raise ValueError("b_field must be finite")
    if n_atoms < 0:
        raise ValueError("n_atoms must be non-negative")
    f = -p.gamma * cross_matrix(b) + relaxation_matrix(b, rates)
    q = (n_atoms / 4.0) * np.eye(3)
    b.setflags(write=False)
    for arr in (f, q):
        arr.setflags(write=False)
    sigma = fdt_noise(f, q)
    sigma.setflags(write=False)
    return DynamicsModel(
        f_matrix=f,
        q_eq=q,
        sigma_noise=sigma,
        b_field=b,
        omega_l=p.gamma * float(np.linalg.norm(b)),
    )


def equilibrium_variation(n_atoms: float) -> tuple[float, float]:
    """(TSS, SQL) total-variance levels for an unpolarized ensemble."""
    if n_atoms < 0:
        raise ValueError("n_atoms must be non-negative")
    return 3.0 * n_atoms / 4.0, n_atoms / 2.0


def field_for_larmor(p: PhysicalParams, larmor_hz: float, direction=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Field vector [T] giving Larmor frequency ``larmor_hz`` along ``direction``."""
    d = np.asarray(direction, dtype=float)
    nd = np.linalg.norm(d)
    if nd == 0:
        raise ValueError("field direction must be non-zero")
    return (2.0 * np.pi * larmor_hz / p.gamma) * d / nd


@dataclass(frozen=True)
class SystemModel:
    """Everything needed to simulate and filter one experimental condition."""

    params: PhysicalParams
    b_field: tuple
    rates: RelaxationRates
    measurement: MeasurementModel
    n_atoms_override: float | None = field(default=None)

    @property
    def n_atoms(self) -> float:
        if self.n_atoms_override is not None:
            return self.n_atoms_override
        return atom_number(self.params)

    def dynamics(self) -> DynamicsModel:
        return build_dynamics(self.params, self.b_field, self.rates, self.n_atoms)

    def with_rates(self, rates: RelaxationRates) -> "SystemModel":
        return replace(self, rates=rates)

    def with_measurement(self, **changes) -> "SystemModel":
        return replace(self, measurement=replace(self.measurement, **changes))
