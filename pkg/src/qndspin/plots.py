"""Optional SVG figures drawn from the same arrays that go into the CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "qndspin"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_filter(path, rec, run, system, truth=None):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    n = min(len(rec), 2000)
    t = rec.times[:n] * 1e3
    ax.plot(t, rec.samples[:n] / system.measurement.gain, color="tab:blue", lw=0.5, label="signal / gain")
    ax.plot(t, run.estimates[:n, 2], color="tab:red", lw=1.2, label="KF estimate J_z")
    if truth is not None:
        ax.plot(t, truth.spins[:n, 2], color="k", lw=0.6, ls="--", label="true J_z")
    ax.set_xlabel("time [ms]")
    ax.set_ylabel("J_z")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_spectra(path, results):
    fig, ax = plt.subplots(figsize=(6, 4))
    for nu, _, s, fit in results:
        ax.semilogy(s.frequencies * 1e-3, s.psd, lw=0.6, label=f"{nu / 1e3:g} kHz")
        sel = np.abs(s.frequencies - fit.center) < 5 * fit.fwhm
        ax.semilogy(s.frequencies[sel] * 1e-3, fit(s.frequencies[sel]), color="k", lw=0.8)
    ax.set_xlabel("frequency [kHz]")
    ax.set_ylabel("PSD [signal$^2$/Hz]")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_calibration(path, points, res, p):
    from .spectra import se_linewidth

    fig, ax = plt.subplots(figsize=(5, 3.5))
    w = np.linspace(0, points[:, 0].max() * 1.05, 200)
    r_se = p.sigma_se * res.n_rb * p.v_bar
    ax.plot(points[:, 0], points[:, 1], "x", color="tab:blue")
    ax.plot(w, res.delta_nu_0 + se_linewidth(w, r_se, p.nuclear_spin), color="tab:red")
    ax.set_xlabel("omega_L [rad/s]")
    ax.set_ylabel("FWHM [Hz]")
    _save(fig, path)


def plot_tracking(path, t, tr, tss, sql):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(t * 1e3, tr, color="tab:red")
    ax.axhline(tss, color="k", ls="--")
    ax.axhline(sql, color="k")
    ax.set_xlabel("tracking time [ms]")
    ax.set_ylabel("|dJ|^2")
    _save(fig, path)


def plot_scan_field(path, rows):
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(rows[:, 0], rows[:, 5], "o-", color="tab:red")
    ax.axhline(rows[0, 10], color="k", ls="--")
    ax.axhline(rows[0, 11], color="k")
    ax.set_xlabel("Larmor frequency [Hz]")
    ax.set_ylabel("|dJ|^2")
    _save(fig, path)


def plot_scan_gradient(path, results, tss, sql):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for r in results:
        s = r.variance_series
        a1.plot(s[:, 0] * 1e3, s[:, 1], lw=1, label=f"{r.gradient * 1e6:g} nT/mm")
    a1.axhline(tss, color="k", ls="--")
    a1.axhline(sql, color="k")
    a1.set_xlabel("time since last data point [ms]")
    a1.set_ylabel("|dJ|^2")
    a1.legend(fontsize=7)
    g = np.array([r.gradient * 1e6 for r in results])
    var = np.array([np.diagonal(r.steady_state_covariance) for r in results])
    for i, lab in enumerate("xyz"):
        a2.plot(g, var[:, i], "o-", label=f"|dJ_{lab}|^2")
    a2.axhline(tss / 3, color="k", ls="--")
    a2.axhline(sql / 3, color="k")
    a2.set_xlabel("gradient [nT/mm]")
    a2.legend(fontsize=7)
    _save(fig, path)
