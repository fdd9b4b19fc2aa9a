"""Squeezing / entanglement witnesses and gradient-induced singlet decay."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .estimator import steady_state_covariance, total_variation
from .physmodel import SystemModel, equilibrium_variation
from .simulator import discretize


class DecayFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class WitnessReport:
    total_variation: float
    xi_squared: float
    squeezing_db: float
    entangled_lower_bound: float
    per_component_variance: np.ndarray
    n_atoms: float


@dataclass(frozen=True)
class DecayFit:
    rate: float
    uncertainty: float
    v0: float
    flat: bool = False


@dataclass(frozen=True)
class GradientScanResult:
    gradient: float
    injected_rate: float
    decay_rate: float
    rate_uncertainty: float
    variance_series: np.ndarray
    steady_state_covariance: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class GradientScanConfig:
    """Knobs of the post-measurement decay experiment.

    ``delta_z`` defaults to the r.m.s. separation L/sqrt(24) of two uniformly
    placed atoms. ``gamma_choice`` selects the slowed (gamma_e/q) or bare
    electron gyromagnetic ratio for the dephasing rate.
    """

    delta_z: float | None = None
    gamma_choice: str = "slowed"
    duration: float = 2e-3
    anisotropic: bool = False
    asymptote: float | None = None

    def __post_init__(self):
        if self.gamma_choice not in ("slowed", "electron"):
            raise ValueError("gamma_choice must be 'slowed' or 'electron'")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


def squeezing_parameter(total_variation: float, n_atoms: float) -> float:
    if not n_atoms > 0:
        raise ValueError("n_atoms must be positive")
    return total_variation / (n_atoms / 2.0)


def squeezing_db(xi_squared: float) -> float:
    """Power-dB squeezing, -10 log10(xi^2)."""
    if xi_squared <= 0:
        return math.inf
    return -10.0 * math.log10(xi_squared)


def entangled_bound(xi_squared: float, n_atoms: float) -> float:
    if n_atoms < 0:
        raise ValueError("n_atoms must be non-negative")
    return max(0.0, (1.0 - xi_squared) * n_atoms)


def witness_report(cov, n_atoms: float) -> WitnessReport:
    cov = np.asarray(cov, dtype=float)
    tv = total_variation(cov)
    xi2 = squeezing_parameter(tv, n_atoms)
    return WitnessReport(
        total_variation=tv,
        xi_squared=xi2,
        squeezing_db=squeezing_db(xi2),
        entangled_lower_bound=entangled_bound(xi2, n_atoms),
        per_component_variance=np.diagonal(cov).copy(),
        n_atoms=n_atoms,
    )


def gradient_omega(gamma: float, b_prime: float, delta_z: float) -> float:
    """Singlet-triplet conversion frequency gamma * B' * dz [rad/s]."""
    return gamma * b_prime * delta_z


def singlet_separation_estimate(added_rate: float, gamma: float, b_prime: float) -> float:
    """Separation spread implied by an added relaxation rate, rate / (gamma B')."""
    if not b_prime > 0:
        raise ValueError("b_prime must be positive")
    return added_rate / (gamma * b_prime)


def rms_separation(cell_length: float) -> float:
    """Singlet separation scale L/sqrt(24) for pairs spread uniformly along the cell."""
    return cell_length / math.sqrt(24.0)


def decay_fit(series, asymptote: float) -> DecayFit:
    """Fit V(t) = A - (A - V0) exp(-r t) with the asymptote A held fixed.

    ``series`` is an (n, 2) array of (time, variance). A series that does
    not move returns rate 0 with infinite uncertainty and ``flat=True``.
    """
    data = np.asarray(series, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 4:
        raise ValueError("series must hold at least 4 (time, variance) pairs")
    if not asymptote > 0:
        raise ValueError("asymptote must be positive")
    t, v = data[:, 0], data[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ValueError("series times must be strictly increasing")
    if np.ptp(v) <= 1e-12 * asymptote:
        return DecayFit(rate=0.0, uncertainty=math.inf, v0=float(v[0]), flat=True)

    t = t - t[0]
    y = v / asymptote
    gap = 1.0 - y
    # log-linear start from the points that are clearly off the asymptote
    use = np.abs(gap) > 0.05 * np.max(np.abs(gap))
    sign = np.sign(gap[0]) or 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log(sign * gap[use])
    ok = np.isfinite(lg)
    if ok.sum() >= 2:
        slope = np.polyfit(t[use][ok], lg[ok], 1)[0]
        r0 = max(-slope, 1e-6 / max(t[-1], 1e-300))
    else:
        r0 = 1.0 / max(t[-1], 1e-300)

    def resid(x):
        v0, r = x
        return 1.0 - (1.0 - v0) * np.exp(-r * t) - y

    def jac(x):
        v0, r = x
        e = np.exp(-r * t)
        return np.column_stack([e, (1.0 - v0) * t * e])

    res = least_squares(resid, x0=[y[0], r0], jac=jac, method="lm", x_scale=[1.0, r0],
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    if not res.success and res.status <= 0:
        raise DecayFitError(f"exponential fit failed: {res.message}")
    v0, r = res.x
    dof = max(len(t) - 2, 1)
    s2 = float(res.fun @ res.fun) / dof
    try:
        cov = s2 * np.linalg.inv(res.jac.T @ res.jac)
        unc = float(np.sqrt(max(cov[1, 1], 0.0)))
    except np.linalg.LinAlgError:
        unc = math.inf
    return DecayFit(rate=float(r), uncertainty=unc, v0=float(v0 * asymptote))


def free_decay_series(dm, start_cov, n_points: int) -> np.ndarray:
    """(time, Tr Sigma) while the covariance relaxes by prediction steps only."""
    covs = np.empty(n_points)
    c = np.asarray(start_cov, dtype=float)
    for k in range(n_points):
        covs[k] = np.trace(c)
        c = dm.phi @ c @ dm.phi.T + dm.q_delta
    return np.column_stack([dm.delta * np.arange(n_points), covs])


def _scan_point(args):
    model, b_prime, cfg = args
    p = model.params
    gamma = p.gamma if cfg.gamma_choice == "slowed" else p.gamma_e
    dz = cfg.delta_z if cfg.delta_z is not None else rms_separation(p.cell_length * 1e-2)
    added = gradient_omega(gamma, b_prime, dz)
    m = model.with_rates(model.rates.plus(added, transverse_only=cfg.anisotropic))
    dyn = m.dynamics()
    dm = discretize(dyn, m.measurement.delta)
    sigma_ss = steady_state_covariance(dm, m.measurement, dyn.q_eq)
    n_points = max(int(round(cfg.duration / dm.delta)) + 1, 4)
    series = free_decay_series(dm, sigma_ss, n_points)
    tss = equilibrium_variation(m.n_atoms)[0]
    fit = decay_fit(series, cfg.asymptote if cfg.asymptote is not None else tss)
    return GradientScanResult(
        gradient=float(b_prime),
        injected_rate=float(added),
        decay_rate=fit.rate,
        rate_uncertainty=fit.uncertainty,
        variance_series=series,
        steady_state_covariance=sigma_ss,
    )


def gradient_scan(
    base_model: SystemModel, gradients, scan_config: GradientScanConfig | None = None, jobs: int = 1
) -> list[GradientScanResult]:
    """Post-measurement variance decay for each field gradient B' [T/m].

    Each gradient adds a relaxation channel gamma * B' * dz to the spin
    rates (both, or only the transverse one when ``anisotropic``). The
    filter runs to steady state under that condition, then the covariance
    is propagated without measurements and its trace is fitted with
    ``decay_fit``. ``decay_rate`` is therefore a variance rate: an amplitude
    rate a shows up as 2a.
    """
    cfg = scan_config or GradientScanConfig()
    grads = [float(g) for g in gradients]
    if any(g < 0 for g in grads):
        raise ValueError("gradients must be non-negative")
    tasks = [(base_model, g, cfg) for g in grads]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_scan_point, tasks))
    return [_scan_point(t) for t in tasks]


def recovered_added_rates(results: list[GradientScanResult]) -> np.ndarray:
    """Amplitude-rate excess over the B' = 0 point, (r - r_0) / 2."""
    base = next((r for r in results if r.gradient == 0), None)
    if base is None:
        raise ValueError("scan lacks a zero-gradient reference point")
    return np.array([(r.decay_rate - base.decay_rate) / 2.0 for r in results])
