"""Continuous-discrete Kalman filter for the polarimeter record.

Convention: the prior N(init_mean, init_cov) describes the spin one sample
before the first observation, so every observation I_k is preceded by a
prediction step and ``FilterRun`` holds the posterior (k|k) for each k.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .physmodel import MeasurementModel
from .simulator import CSV_FMT, DiscreteModel, PhotocurrentRecord, SpinTrajectory

STEADY_RTOL = 1e-9
STEADY_WINDOW = 100
PSD_TOL = 1e-10


class NotConvergedError(RuntimeError):
    """The filter covariance did not reach a steady state within the record."""


@dataclass(frozen=True)
class FilterState:
    estimate: np.ndarray
    covariance: np.ndarray
    time_index: int


@dataclass(frozen=True)
class FilterRun:
    times: np.ndarray
    estimates: np.ndarray
    covariances: np.ndarray
    prior_traces: np.ndarray
    innovations: np.ndarray
    steady_state_covariance: np.ndarray
    converged_at: int | None

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k) -> FilterState:
        k = range(len(self))[k]
        return FilterState(self.estimates[k], self.covariances[k], k)

    @property
    def states(self) -> list[FilterState]:
        return [self[k] for k in range(len(self))]


def kf_predict(prev: FilterState, dm: DiscreteModel) -> FilterState:
    phi = dm.phi
    cov = phi @ prev.covariance @ phi.T + dm.q_delta
    return FilterState(phi @ prev.estimate, 0.5 * (cov + cov.T), prev.time_index + 1)


def _gain(cov, h, r):
    ph = cov @ h
    s = r + h @ ph
    return ph / s, s


def kf_update(prior: FilterState, obs: float, m: MeasurementModel) -> FilterState:
    """Incorporate one photocurrent sample (Joseph-form covariance update)."""
    if not np.isfinite(obs):
        raise ValueError(f"observation must be finite, got {obs}")
    r = m.r_delta
    if not r > 0:
        raise ValueError("measurement noise power must be positive")
    h = m.h_row
    k, _ = _gain(prior.covariance, h, r)
    est = prior.estimate + k * (obs - h @ prior.estimate)
    a = np.eye(3) - np.outer(k, h)
    cov = a @ prior.covariance @ a.T + r * np.outer(k, k)
    return FilterState(est, 0.5 * (cov + cov.T), prior.time_index)


def _relative_change(new, old):
    denom = np.linalg.norm(new)
    if denom == 0:
        return 0.0 if np.linalg.norm(old) == 0 else np.inf
    return np.linalg.norm(new - old) / denom


def covariance_sequence(dm: DiscreteModel, m: MeasurementModel, init_cov, n_steps: int):
    """Prior/posterior covariances and gains for ``n_steps`` filter cycles.

    The covariance recursion does not depend on the data, so this is shared
    by ``kf_run`` and by callers that only need the steady state.
    """
    r = m.r_delta
    if not r > 0:
        raise ValueError("measurement noise power must be positive")
    h = m.h_row
    phi, qd = dm.phi, dm.q_delta
    eye = np.eye(3)
    post = np.empty((n_steps, 3, 3))
    prior_tr = np.empty(n_steps)
    gains = np.empty((n_steps, 3))
    cov = np.array(init_cov, dtype=float)
    for k in range(n_steps):
        p = phi @ cov @ phi.T + qd
        p = 0.5 * (p + p.T)
        prior_tr[k] = np.trace(p)
        g, _ = _gain(p, h, r)
        a = eye - np.outer(g, h)
        cov = a @ p @ a.T + r * np.outer(g, g)
        cov = 0.5 * (cov + cov.T)
        post[k] = cov
        gains[k] = g
    return post, prior_tr, gains


def detect_steady_state(covs, rtol: float = STEADY_RTOL, window: int = STEADY_WINDOW):
    """Index after which the covariance changed by < rtol for ``window`` steps."""
    run = 0
    for k in range(1, len(covs)):
        if _relative_change(covs[k], covs[k - 1]) < rtol:
            run += 1
            if run >= window:
                return k
        else:
            run = 0
    return None


def steady_state_covariance(
    dm: DiscreteModel, m: MeasurementModel, init_cov, max_steps: int = 200_000
) -> np.ndarray:
    """Iterate the filter covariance recursion to its fixed point."""
    chunk = 2000
    cov = np.array(init_cov, dtype=float)
    done = 0
    while done < max_steps:
        post, _, _ = covariance_sequence(dm, m, cov, chunk)
        k = detect_steady_state(np.concatenate([cov[None], post]))
        if k is not None:
            return post[k - 1]
        cov = post[-1]
        done += chunk
    raise NotConvergedError(f"no steady state within {max_steps} steps")


def kf_run(
    record: PhotocurrentRecord,
    dm: DiscreteModel,
    m: MeasurementModel,
    init_mean=None,
    init_cov=None,
    require_convergence: bool = True,
) -> FilterRun:
    n = len(record)
    if n == 0:
        raise ValueError("photocurrent record is empty")
    if init_mean is None:
        init_mean = np.zeros(3)
    if init_cov is None:
        raise ValueError("init_cov is required (use the thermal covariance q_eq)")
    init_cov = np.asarray(init_cov, dtype=float)
    if not np.allclose(init_cov, init_cov.T):
        raise ValueError("init_cov must be symmetric")
    obs = np.asarray(record.samples, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise ValueError("record contains non-finite samples")

    post, prior_tr, gains = covariance_sequence(dm, m, init_cov, n)
    h = m.h_row
    phi = dm.phi
    est = np.empty((n, 3))
    innov = np.empty(n)
    x = np.asarray(init_mean, dtype=float)
    for k in range(n):
        x = phi @ x
        innov[k] = obs[k] - h @ x
        x = x + gains[k] * innov[k]
        est[k] = x

    mins = np.linalg.eigvalsh(post).min(axis=1)
    traces = np.trace(post, axis1=1, axis2=2)
    if np.any(mins < -PSD_TOL * np.maximum(traces, np.finfo(float).tiny)):
        raise np.linalg.LinAlgError("posterior covariance lost positive semidefiniteness")

    k_ss = detect_steady_state(np.concatenate([init_cov[None], post]))
    if k_ss is None:
        if require_convergence:
            raise NotConvergedError(
                f"filter covariance did not settle within {n} samples"
            )
        converged_at, sigma_ss = None, post[-1]
    else:
        converged_at = k_ss - STEADY_WINDOW
        sigma_ss = post[k_ss - 1]
    return FilterRun(
        times=np.asarray(record.times, dtype=float),
        estimates=est,
        covariances=post,
        prior_traces=prior_tr,
        innovations=innov,
        steady_state_covariance=sigma_ss,
        converged_at=converged_at,
    )


def total_variation(cov) -> float:
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=0):
        raise ValueError("covariance must be symmetric")
    return float(np.trace(cov))


def rms_estimation_error(run: FilterRun, truth: SpinTrajectory, start: int | None = None) -> np.ndarray:
    """Per-component mean squared error after the filter transient."""
    if len(run) != len(truth):
        raise ValueError(f"length mismatch: filter {len(run)} vs truth {len(truth)}")
    if start is None:
        start = run.converged_at or 0
    err = run.estimates[start:] - truth.spins[start:]
    return np.mean(err**2, axis=0)


def normalized_innovations(run: FilterRun, dm: DiscreteModel, m: MeasurementModel, init_cov) -> np.ndarray:
    """Innovations divided by their predicted standard deviation."""
    h = m.h_row
    prev = np.concatenate([np.asarray(init_cov, dtype=float)[None], run.covariances[:-1]])
    prior = dm.phi @ prev @ dm.phi.T + dm.q_delta
    s = m.r_delta + np.einsum("i,kij,j->k", h, prior, h)
    return run.innovations / np.sqrt(s)


def write_filter_csv(run: FilterRun, path) -> Path:
    path = Path(path)
    diag = np.diagonal(run.covariances, axis1=1, axis2=2)
    data = np.column_stack([run.times, run.estimates, diag, diag.sum(axis=1)])
    np.savetxt(
        path, data, fmt=CSV_FMT, delimiter=",", comments="",
        header="time,Jx_hat,Jy_hat,Jz_hat,var_x,var_y,var_z,trace",
    )
    return path
