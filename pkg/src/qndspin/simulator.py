"""Exact-discretization sampling of the spin Langevin dynamics and the polarimeter record."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .physmodel import DynamicsModel, MeasurementModel

NPZ_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiscreteModel:
    phi: np.ndarray
    q_delta: np.ndarray
    delta: float


@dataclass(frozen=True)
class SpinTrajectory:
    times: np.ndarray
    spins: np.ndarray
    seed: int | None

    def __len__(self):
        return len(self.times)

    @property
    def delta(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else float("nan")


@dataclass(frozen=True)
class PhotocurrentRecord:
    times: np.ndarray
    samples: np.ndarray
    seed: int | None

    def __len__(self):
        return len(self.times)


def discretize(dyn: DynamicsModel, delta: float) -> DiscreteModel:
    """Transition matrix exp(-F delta) and the matching process-noise covariance.

    For a process whose stationary covariance is Q, the covariance added
    over one step is exactly Q - Phi Q Phi^T.
    """
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise ValueError(f"delta must be finite and non-negative, got {delta}")
    phi = expm(-np.asarray(dyn.f_matrix) * delta)
    q = np.asarray(dyn.q_eq)
    q_delta = q - phi @ q @ phi.T
    q_delta = 0.5 * (q_delta + q_delta.T)
    return DiscreteModel(phi=phi, q_delta=q_delta, delta=delta)


def psd_sqrt(cov, tol: float = 1e-12) -> np.ndarray:
    """Symmetric square root of a covariance, clamping tiny negative eigenvalues."""
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(sym)
    scale = max(abs(np.trace(sym)), np.finfo(float).tiny)
    if w.min() < -tol * scale:
        raise np.linalg.LinAlgError(
            f"covariance is indefinite beyond tolerance (min eigenvalue {w.min():.3g})"
        )
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _trajectory_noise(dm: DiscreteModel, q_eq, n_steps: int, n_paths: int | None, seed: int, j0):
    rng = np.random.default_rng(seed)
    shape = (n_paths,) if n_paths is not None else ()
    if j0 is None:
        start = rng.standard_normal(shape + (3,)) @ psd_sqrt(q_eq).T
    else:
        start = np.broadcast_to(np.asarray(j0, dtype=float), shape + (3,)).copy()
    # generated as one block so the stream is fixed by (seed, n_steps)
    w = rng.standard_normal((n_steps - 1,) + shape + (3,)) @ psd_sqrt(dm.q_delta).T
    return start, w


def simulate_spin(
    dm: DiscreteModel, q_eq, n_steps: int, seed: int, j0=None
) -> SpinTrajectory:
    """Sample J_0..J_{n_steps-1} with J_k = Phi J_{k-1} + w_k.

    J_0 is drawn from the stationary distribution N(0, q_eq) unless ``j0``
    is given.
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    start, w = _trajectory_noise(dm, q_eq, n_steps, None, seed, j0)
    spins = np.empty((n_steps, 3))
    spins[0] = start
    phi = dm.phi
    j = start
    for k in range(1, n_steps):
        j = phi @ j + w[k - 1]
        spins[k] = j
    times = dm.delta * np.arange(n_steps)
    return SpinTrajectory(times=times, spins=spins, seed=seed)


def simulate_ensemble(
    dm: DiscreteModel, q_eq, n_steps: int, n_paths: int, seed: int, j0=None
) -> np.ndarray:
    """Final states of ``n_paths`` independent trajectories, shape (n_paths, 3).

    Vectorized over paths; used for Monte-Carlo checks where only the end
    point matters.
    """
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be >= 1")
    start, w = _trajectory_noise(dm, q_eq, n_steps, n_paths, seed, j0)
    j = start
    phi_t = dm.phi.T
    for k in range(n_steps - 1):
        j = j @ phi_t + w[k]
    return j


def measure_photocurrent(
    traj: SpinTrajectory, m: MeasurementModel, seed: int
) -> PhotocurrentRecord:
    """Sampled polarimeter photocurrent I_k = eta g Ndot J_z,k + shot noise."""
    if len(traj) > 1 and not np.isclose(traj.delta, m.delta, rtol=1e-9):
        raise ValueError(
            f"trajectory step {traj.delta} does not match measurement delta {m.delta}"
        )
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(traj)) * np.sqrt(m.r_delta)
    samples = m.gain * traj.spins[:, 2] + noise
    return PhotocurrentRecord(times=traj.times.copy(), samples=samples, seed=seed)


def euler_maruyama(dyn: DynamicsModel, dt: float, n_steps: int, seed: int, j0) -> np.ndarray:
    """Reference Euler-Maruyama integrator; only meant as a cross-check."""
    rng = np.random.default_rng(seed)
    root = psd_sqrt(dyn.sigma_noise)
    f = np.asarray(dyn.f_matrix)
    out = np.empty((n_steps, 3))
    j = np.asarray(j0, dtype=float)
    out[0] = j
    for k in range(1, n_steps):
        j = j - f @ j * dt + root @ rng.standard_normal(3) * np.sqrt(dt)
        out[k] = j
    return out


# ---------------------------------------------------------------------------
# file formats

CSV_FMT = "%.17g"


def write_trajectory_csv(traj: SpinTrajectory, path) -> Path:
    path = Path(path)
    data = np.column_stack([traj.times, traj.spins])
    np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header="time,Jx,Jy,Jz", comments="")
    return path


def read_trajectory_csv(path, seed: int | None = None) -> SpinTrajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SpinTrajectory(times=data[:, 0], spins=data[:, 1:4], seed=seed)


def write_photocurrent_csv(record: PhotocurrentRecord, path) -> Path:
    path = Path(path)
    data = np.column_stack([record.times, record.samples])
    np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header="time,I", comments="")
    return path


def read_photocurrent_csv(path, seed: int | None = None) -> PhotocurrentRecord:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected columns time,I")
    return PhotocurrentRecord(times=data[:, 0], samples=data[:, 1], seed=seed)


def save_npz(path, traj: SpinTrajectory | None = None, record: PhotocurrentRecord | None = None):
    """Binary round-trip of a trajectory and/or record, tagged with a format version."""
    arrays = {"format_version": np.array(NPZ_FORMAT_VERSION)}
    if traj is not None:
        arrays.update(traj_times=traj.times, traj_spins=traj.spins,
                      traj_seed=np.array(-1 if traj.seed is None else traj.seed))
    if record is not None:
        arrays.update(rec_times=record.times, rec_samples=record.samples,
                      rec_seed=np.array(-1 if record.seed is None else record.seed))
    np.savez(path, **arrays)


def load_npz(path):
    with np.load(path) as f:
        version = int(f["format_version"])
        if version != NPZ_FORMAT_VERSION:
            raise ValueError(f"unsupported npz format version {version}")
        traj = rec = None
        if "traj_times" in f:
            seed = int(f["traj_seed"])
            traj = SpinTrajectory(f["traj_times"], f["traj_spins"], None if seed < 0 else seed)
        if "rec_times" in f:
            seed = int(f["rec_seed"])
            rec = PhotocurrentRecord(f["rec_times"], f["rec_samples"], None if seed < 0 else seed)
    return traj, rec
