"""Experiment commands: compose the modules, write CSV/JSON outputs and a manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, SYNTHETIC_FIELDS, ConfigError, RunConfig
from .estimator import covariance_sequence, kf_run, rms_estimation_error, steady_state_covariance, write_filter_csv
from .physmodel import equilibrium_variation
from .simulator import (
    CSV_FMT,
    PhotocurrentRecord,
    discretize,
    measure_photocurrent,
    read_photocurrent_csv,
    simulate_spin,
    write_photocurrent_csv,
    write_trajectory_csv,
)
from .spectra import density_calibration, lorentzian_fit, psd_welch, read_calibration_csv, synthetic_linewidths
from .witness import GradientScanConfig, gradient_scan, recovered_added_rates, witness_report

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "filter", "spectrum", "calibrate", "witness", "scan-field", "scan-gradient")
NT_PER_MM = 1e-6  # T/m


@dataclass
class RunManifest:
    command: str
    schema_version: int
    config_hash: str
    seeds: dict
    files: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    synthetic_parameters: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def derive_seeds(seed: int) -> dict:
    """Independent integer seeds for the spin noise, shot noise and calibration data."""
    children = np.random.SeedSequence(seed).spawn(3)
    spin, shot, calib = (int(c.generate_state(1)[0]) for c in children)
    return {"root": int(seed), "spin": spin, "shot": shot, "calibration": calib}


def write_table(path: Path, header: list[str], columns) -> None:
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header=",".join(header), comments="")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x)}")


# ---------------------------------------------------------------------------
# commands; each writes into ``out`` and returns extra summary info


def _simulate(cfg: RunConfig, seeds: dict, larmor_hz=None, spin_seed=None, shot_seed=None):
    system = cfg.system(larmor_hz)
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    traj = simulate_spin(dm, dyn.q_eq, cfg.experiment.n_steps,
                         seeds["spin"] if spin_seed is None else spin_seed)
    rec = measure_photocurrent(traj, system.measurement,
                               seeds["shot"] if shot_seed is None else shot_seed)
    return system, dm, traj, rec


def cmd_simulate(cfg, seeds, out: Path, ctx) -> dict:
    _, _, traj, rec = _simulate(cfg, seeds)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_photocurrent_csv(rec, out / "photocurrent.csv")
    return {"n_samples": len(traj)}


def _input_record(cfg, ctx) -> PhotocurrentRecord | None:
    path = ctx.get("input") or cfg.experiment.input_csv
    if path is None:
        return None
    rec = read_photocurrent_csv(path)
    if len(rec) > 1 and not np.isclose(rec.times[1] - rec.times[0], cfg.measurement.delta, rtol=1e-9):
        raise ConfigError(f"{path}: sample spacing does not match measurement.delta")
    return rec


def cmd_filter(cfg, seeds, out: Path, ctx) -> dict:
    system = cfg.system()
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    rec = _input_record(cfg, ctx)
    truth = None
    if rec is None:
        _, _, truth, rec = _simulate(cfg, seeds)
        write_trajectory_csv(truth, out / "trajectory.csv")
        write_photocurrent_csv(rec, out / "photocurrent.csv")
    run = kf_run(rec, dm, system.measurement, cfg.prior.mean, cfg.prior_cov())
    write_filter_csv(run, out / "filter.csv")
    rep = witness_report(run.steady_state_covariance, system.n_atoms)
    summary = {
        "converged_at": run.converged_at,
        "steady_state_covariance": run.steady_state_covariance,
        "xi_squared": rep.xi_squared,
        "total_variation": rep.total_variation,
    }
    if truth is not None:
        summary["mse_per_component"] = rms_estimation_error(run, truth)
    write_json(out / "filter_summary.json", summary)
    if ctx.get("svg"):
        from .plots import plot_filter
        plot_filter(out / "filter.svg", rec, run, system, truth)
    return {"converged_at": run.converged_at}


def _spectrum_point(args):
    cfg, seeds, idx, nu, rec = args
    exp = cfg.experiment
    if rec is None:
        child = np.random.SeedSequence([seeds["root"], idx]).spawn(2)
        spin, shot = (int(c.generate_state(1)[0]) for c in child)
        system, _, _, rec = _simulate(cfg, seeds, nu, spin, shot)
    else:
        system = cfg.system(nu)
    s = psd_welch(rec, exp.segment_length, exp.overlap)
    nyq = 0.5 / cfg.measurement.delta
    if exp.fit_window_hz is not None:
        fit = lorentzian_fit(s, window=tuple(exp.fit_window_hz))
    else:
        fit = lorentzian_fit(s, search=(0.5 * nu, min(1.5 * nu, nyq)), dc_line=True)
    return nu, system.rates.t2_inv, s, fit


def cmd_spectrum(cfg, seeds, out: Path, ctx) -> dict:
    exp = cfg.experiment
    rec = _input_record(cfg, ctx)
    if rec is not None:
        nus = [cfg.dynamics.larmor_hz]
    else:
        nus = exp.spectrum_larmor_hz or [cfg.dynamics.larmor_hz]
    tasks = [(cfg, seeds, i, float(nu), rec) for i, nu in enumerate(nus)]
    results = _map(_spectrum_point, tasks, ctx.get("jobs", 1))
    write_table(
        out / "spectrum.csv", ["larmor_hz", "frequency", "psd"],
        [np.concatenate([np.full(len(s.frequencies), nu) for nu, _, s, _ in results]),
         np.concatenate([s.frequencies for _, _, s, _ in results]),
         np.concatenate([s.psd for _, _, s, _ in results])],
    )
    cols = list(zip(*[
        (nu, t2, t2 / np.pi, f.center, f.fwhm, f.amplitude, f.offset, f.residual_rms,
         float(f.no_peak), s.resolution, s.segments)
        for nu, t2, s, f in results
    ]))
    write_table(
        out / "lorentz_fits.csv",
        ["larmor_hz", "t2_inv", "expected_fwhm_hz", "center_hz", "fwhm_hz", "amplitude",
         "offset", "residual_rms", "no_peak", "resolution_hz", "segments"],
        cols,
    )
    if ctx.get("svg"):
        from .plots import plot_spectra
        plot_spectra(out / "spectrum.svg", results)
    return {"spectra": len(results)}


def cmd_calibrate(cfg, seeds, out: Path, ctx) -> dict:
    exp = cfg.experiment
    p = cfg.params()
    if exp.calibration_csv is not None:
        points = read_calibration_csv(exp.calibration_csv)
        injected = None
    else:
        injected = exp.calibration_n_rb if exp.calibration_n_rb is not None else p.n_rb
        omegas = 2 * np.pi * np.asarray(exp.calibration_larmor_hz)
        points = synthetic_linewidths(omegas, injected, exp.calibration_delta_nu_0, p,
                                      exp.calibration_noise, seeds["calibration"])
    write_table(out / "calibration_points.csv", ["omega_l", "delta_nu"], points.T)
    res = density_calibration(points, p)
    r_se = p.sigma_se * res.n_rb * p.v_bar
    write_table(
        out / "calibration.csv",
        ["n_rb", "n_rb_stderr", "delta_nu_0", "delta_nu_0_stderr", "r_se"],
        [[res.n_rb], [np.sqrt(res.fit_covariance[0, 0])], [res.delta_nu_0],
         [np.sqrt(res.fit_covariance[1, 1])], [r_se]],
    )
    write_json(out / "calibration.json", {
        "n_rb": res.n_rb, "delta_nu_0": res.delta_nu_0, "fit_covariance": res.fit_covariance,
        "r_se": r_se, "injected_n_rb": injected,
    })
    if ctx.get("svg"):
        from .plots import plot_calibration
        plot_calibration(out / "calibration.svg", points, res, p)
    return {"n_rb": res.n_rb}


def cmd_witness(cfg, seeds, out: Path, ctx) -> dict:
    system = cfg.system()
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    prior = cfg.prior_cov()
    sigma_ss = steady_state_covariance(dm, system.measurement, prior)
    rep = witness_report(sigma_ss, system.n_atoms)
    tss, sql = equilibrium_variation(system.n_atoms)
    row = [rep.total_variation, rep.xi_squared, rep.squeezing_db, rep.entangled_lower_bound,
           *rep.per_component_variance, system.n_atoms, tss, sql]
    write_table(
        out / "witness.csv",
        ["total_variation", "xi_squared", "squeezing_db", "entangled_lower_bound",
         "var_x", "var_y", "var_z", "n_atoms", "tss", "sql"],
        [[v] for v in row],
    )
    summary = asdict(rep) | {"tss": tss, "sql": sql, "steady_state_covariance": sigma_ss}
    write_json(out / "witness.json", summary)
    # variance versus tracking time from the prior
    n = min(cfg.experiment.n_steps, 4000)
    post, _, _ = covariance_sequence(dm, system.measurement, prior, n)
    tr = np.trace(post, axis1=1, axis2=2)
    write_table(out / "witness_tracking.csv", ["time", "total_variation", "xi_squared"],
                [dm.delta * np.arange(1, n + 1), tr, tr / sql])
    if ctx.get("svg"):
        from .plots import plot_tracking
        plot_tracking(out / "witness_tracking.svg", dm.delta * np.arange(1, n + 1), tr, tss, sql)
    return {"xi_squared": rep.xi_squared}


def _field_point(args):
    cfg, nu = args
    system = cfg.system(nu)
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    sigma = steady_state_covariance(dm, system.measurement, dyn.q_eq)
    return nu, system, sigma


def cmd_scan_field(cfg, seeds, out: Path, ctx) -> dict:
    results = _map(_field_point, [(cfg, float(nu)) for nu in cfg.experiment.larmor_scan_hz],
                   ctx.get("jobs", 1))
    rows = []
    for nu, system, sigma in results:
        tss, sql = equilibrium_variation(system.n_atoms)
        tr = float(np.trace(sigma))
        rows.append((nu, 2 * np.pi * nu, system.rates.t1_inv, system.rates.t2_inv,
                     system.rates.t2_inv / np.pi, tr, tr / sql, *np.diagonal(sigma), tss, sql))
    header = ["larmor_hz", "omega_l", "t1_inv", "t2_inv", "fwhm_hz", "total_variation",
              "xi_squared", "var_x", "var_y", "var_z", "tss", "sql"]
    write_table(out / "scan_field.csv", header, list(zip(*rows)))
    if ctx.get("svg"):
        from .plots import plot_scan_field
        plot_scan_field(out / "scan_field.svg", rows)
    return {"points": len(rows)}


def cmd_scan_gradient(cfg, seeds, out: Path, ctx) -> dict:
    exp = cfg.experiment
    system = cfg.system()
    scfg = GradientScanConfig(delta_z=exp.delta_z, gamma_choice=exp.gamma_choice,
                              duration=exp.decay_duration, anisotropic=exp.anisotropic)
    grads = [g * NT_PER_MM for g in exp.gradients_nt_per_mm]
    results = gradient_scan(system, grads, scfg, jobs=ctx.get("jobs", 1))
    tss, sql = equilibrium_variation(system.n_atoms)
    try:
        added = recovered_added_rates(results)
    except ValueError:
        added = np.full(len(results), np.nan)
    rows = []
    for r, a in zip(results, added):
        sig = r.steady_state_covariance
        rows.append((r.gradient / NT_PER_MM, r.gradient, r.injected_rate, r.decay_rate,
                     r.rate_uncertainty, a, *np.diagonal(sig), np.trace(sig), np.trace(sig) / sql))
    write_table(
        out / "scan_gradient.csv",
        ["gradient_nt_per_mm", "gradient_t_per_m", "injected_rate", "decay_rate",
         "rate_uncertainty", "recovered_added_rate", "var_x", "var_y", "var_z",
         "total_variation", "xi_squared"],
        list(zip(*rows)),
    )
    write_table(
        out / "decay_series.csv", ["gradient_nt_per_mm", "time", "total_variation"],
        [np.concatenate([np.full(len(r.variance_series), r.gradient / NT_PER_MM) for r in results]),
         np.concatenate([r.variance_series[:, 0] for r in results]),
         np.concatenate([r.variance_series[:, 1] for r in results])],
    )
    write_json(out / "scan_gradient.json", {
        "tss": tss, "sql": sql,
        "results": [
            {"gradient_nt_per_mm": r.gradient / NT_PER_MM, "injected_rate": r.injected_rate,
             "decay_rate": r.decay_rate, "rate_uncertainty": r.rate_uncertainty,
             "recovered_added_rate": a, "per_component_variance": np.diagonal(r.steady_state_covariance)}
            for r, a in zip(results, added)
        ],
    })
    if ctx.get("svg"):
        from .plots import plot_scan_gradient
        plot_scan_gradient(out / "scan_gradient.svg", results, tss, sql)
    return {"points": len(results)}


HANDLERS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "spectrum": cmd_spectrum,
    "calibrate": cmd_calibrate,
    "witness": cmd_witness,
    "scan-field": cmd_scan_field,
    "scan-gradient": cmd_scan_gradient,
}


def _map(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_command(cmd: str, cfg: RunConfig, out_dir=None, jobs: int = 1, input_path=None) -> RunManifest:
    """Run one command and write its outputs plus a manifest into ``out_dir``.

    Outputs are produced in a staging directory and moved into place only
    after the command succeeds, so a failed run leaves no partial files.
    """
    if cmd not in HANDLERS:
        raise ValueError(f"unknown command {cmd!r}; choose from {', '.join(COMMANDS)}")
    out = Path(out_dir if out_dir is not None else cfg.output.directory)
    seeds = derive_seeds(cfg.experiment.seed)
    ctx = {"jobs": max(1, int(jobs)), "input": input_path, "svg": cfg.output.format == "csv+svg"}
    started = time.time()
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".qndspin-staging-", dir=out.parent))
    try:
        info = HANDLERS[cmd](cfg, seeds, staging, ctx)
        write_json(staging / f"resolved-config-{cmd}.json", cfg.resolved())
        produced = sorted(p.name for p in staging.iterdir())
        out.mkdir(parents=True, exist_ok=True)
        for name in produced:
            os.replace(staging / name, out / name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    tss, sql = equilibrium_variation(cfg.n_atoms)
    manifest = RunManifest(
        command=cmd,
        schema_version=SCHEMA_VERSION,
        config_hash=cfg.config_hash(),
        seeds=seeds,
        files=[{"path": n, "sha256": _sha256(out / n), "bytes": (out / n).stat().st_size} for n in produced],
        timing={"started_unix": started, "elapsed_s": time.time() - started},
        derived={"n_atoms": cfg.n_atoms, "tss": tss, "sql": sql,
                 "gamma": cfg.params().gamma, **{k: _jsonable(v) if isinstance(v, np.generic) else v
                                                   for k, v in info.items()}},
        synthetic_parameters=list(SYNTHETIC_FIELDS) if cfg.measurement.synthetic else [],
    )
    manifest_path = out / f"manifest-{cmd}.json"
    manifest.files.append({"path": manifest_path.name, "sha256": None, "bytes": None})
    manifest_path.write_text(manifest.to_json() + "\n")
    log.info("%s: wrote %d files to %s", cmd, len(produced), out)
    return manifest
