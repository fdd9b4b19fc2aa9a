"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from qndspin.config import parse_config
from qndspin.estimator import kf_run, steady_state_covariance
from qndspin.physmodel import PhysicalParams, RelaxationRates, build_dynamics, field_for_larmor
from qndspin.runner import NT_PER_MM, run_command
from qndspin.simulator import discretize, measure_photocurrent, simulate_ensemble, simulate_spin
from qndspin.spectra import (
    density_calibration,
    lorentzian_fit,
    psd_welch,
    se_bracket,
    se_linewidth,
    synthetic_linewidths,
)
from qndspin.witness import (
    GradientScanConfig,
    decay_fit,
    entangled_bound,
    gradient_scan,
    recovered_added_rates,
    squeezing_db,
)

# which commands exercise each bundled preset
PRESET_COMMANDS = {
    "paper_fig2": ["simulate", "filter", "witness"],
    "paper_fig2a": ["spectrum"],
    "paper_fig2b": ["scan-field"],
    "paper_fig3": ["calibrate"],
    "paper_fig1d": ["scan-gradient"],
    "paper_fig4": ["scan-gradient"],
}


def _report(n, ok, detail, elapsed, limit):
    status = "PASS" if ok else "FAIL"
    print(f"CRITERION {n}: {status} | {detail} | runtime {elapsed:.2f} s (limit {limit:g} s)", flush=True)


def _rounds_to(value, quoted, decimals):
    return round(value, decimals) == quoted


# -- 1 ------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    db = squeezing_db(0.57)
    ent = entangled_bound(0.57, 5.3e13)
    checks = {
        "dB exact": math.isclose(db, -10 * math.log10(0.57), rel_tol=1e-15),
        "dB 2.44 within 1%": abs(db / 2.44 - 1) < 0.01,
        "dB rounds to 2.4": _rounds_to(db, 2.4, 1) and abs(round(db, 1) / 2.4 - 1) < 0.01,
        "bound 2.28e13 within 1%": abs(ent / 2.28e13 - 1) < 0.01,
        "bound vs 2.3e13 within 1%": abs(ent / 2.3e13 - 1) < 0.01,
    }
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 1
    _report(1, ok, f"xi^2=0.57 -> {db:.4f} dB, entangled >= {ent:.4g}; "
                   + ", ".join(k for k, v in checks.items() if not v), elapsed, 1)
    return ok


# -- 2 ------------------------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    bracket = se_bracket(1.5)
    eps = np.finfo(float).eps
    w = 2 * np.pi * np.array([10.0, 250.0, 1e3, 3.3e3, 1e5])
    ratios = [se_linewidth(k * w, 4.1e4, 1.5) / se_linewidth(w, 4.1e4, 1.5) / k**2 for k in (2.0, 3.0, 10.0)]
    worst = float(np.max(np.abs(np.concatenate(ratios) - 1)))
    elapsed = time.perf_counter() - t0
    ok = abs(bracket - 5 / 3) <= 2 * eps and worst <= 8 * eps and elapsed < 1
    _report(2, ok, f"bracket-5/3={bracket - 5 / 3:.2e}, max |ratio/k^2-1|={worst:.2e}", elapsed, 1)
    return ok


# -- 3 ------------------------------------------------------------------------

def criterion_3():
    t0 = time.perf_counter()
    cfg = parse_config("paper_fig2")
    system = cfg.system()
    dyn = system.dynamics()
    slowest = min(system.rates.t1_inv, system.rates.t2_inv)
    delta = 2e-4
    n_steps = int(math.ceil(20 / slowest / delta)) + 1
    n_paths = 10_000
    # start at the origin so that stationarity has to be reached, not assumed
    final = simulate_ensemble(discretize(dyn, delta), dyn.q_eq, n_steps, n_paths, seed=2024, j0=np.zeros(3))
    cov = final.T @ final / n_paths
    q = dyn.q_eq[0, 0]
    z = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            se = q * math.sqrt(2 / n_paths) if i == j else q / math.sqrt(n_paths)
            z[i, j] = (cov[i, j] - dyn.q_eq[i, j]) / se
    tss = 0.75 * system.n_atoms
    tr_err = abs(np.trace(cov) / tss - 1)
    elapsed = time.perf_counter() - t0
    ok = np.all(np.abs(z) < 5) and tr_err < 0.03 and elapsed < 120
    _report(3, ok, f"{n_paths} paths x {n_steps} steps ({20:g}/slowest rate), max |z|={np.abs(z).max():.2f}, "
                   f"|Tr/TSS-1|={tr_err:.4f}", elapsed, 120)
    return ok


# -- 4 ------------------------------------------------------------------------

def criterion_4():
    t0 = time.perf_counter()
    cfg = parse_config("paper_fig2")
    system = cfg.system()
    dyn = system.dynamics()
    m = system.measurement
    dm = discretize(dyn, m.delta)
    ss = steady_state_covariance(dm, m, dyn.q_eq)
    ss100 = steady_state_covariance(dm, m, 100 * dyn.q_eq)
    init_gap = np.linalg.norm(ss - ss100) / np.linalg.norm(ss)
    n_runs, n_steps = 800, 1500
    errs = np.empty((n_runs, 3))
    for i in range(n_runs):
        traj = simulate_spin(dm, dyn.q_eq, n_steps, seed=40_000 + i)
        run = kf_run(measure_photocurrent(traj, m, seed=90_000 + i), dm, m, init_cov=dyn.q_eq,
                     require_convergence=False)
        errs[i] = run.estimates[-1] - traj.spins[-1]
    emp = errs.T @ errs / n_runs
    tol = 3 / math.sqrt(200)
    frob = np.linalg.norm(emp - ss) / np.linalg.norm(ss)
    diag = np.abs(np.diag(emp) / np.diag(ss) - 1)
    elapsed = time.perf_counter() - t0
    ok = frob < tol and np.all(diag < tol) and init_gap < 1e-6 and elapsed < 300
    _report(4, ok, f"{n_runs} runs, xi^2={np.trace(ss) / (system.n_atoms / 2):.3f}, "
                   f"rel Frobenius={frob:.3f}, max rel diag={diag.max():.3f} (tol {tol:.3f}), "
                   f"init gap={init_gap:.1e}", elapsed, 300)
    return ok


# -- 5 ------------------------------------------------------------------------

def _sql_ratio(cfg, larmor_hz, g_scale=1.0):
    system = cfg.system(larmor_hz)
    if g_scale != 1.0:
        system = system.with_measurement(g_coupling=system.measurement.g_coupling * g_scale)
    dyn = system.dynamics()
    dm = discretize(dyn, system.measurement.delta)
    ss = steady_state_covariance(dm, system.measurement, dyn.q_eq)
    return np.trace(ss) / (system.n_atoms / 2)


def criterion_5():
    t0 = time.perf_counter()
    cfg = parse_config("paper_fig2b")
    grid = cfg.experiment.larmor_scan_hz
    ratios = np.array([_sql_ratio(cfg, nu) for nu in grid])
    # numerical noise floor of the steady-state solver is ~1e-9 relative
    steps = np.diff(ratios) / ratios[:-1]
    monotone = bool(np.all(steps > -1e-7))
    below = ratios[0] < 1
    weak = [_sql_ratio(cfg, grid[0], s) for s in (1e-1, 1e-2, 1e-3, 0.0)]
    approaches = abs(weak[-1] - 1.5) < 1e-9 and all(b >= a for a, b in zip(weak, weak[1:])) \
        and abs(weak[-2] - 1.5) < 1e-2
    elapsed = time.perf_counter() - t0
    ok = monotone and below and approaches and elapsed < 300
    worst = int(np.argmin(steps))
    _report(5, ok, f"Tr/SQL over {grid[0]:g}-{grid[-1]:g} Hz = "
                   + ", ".join(f"{r:.6f}" for r in ratios)
                   + f"; monotone={monotone} (largest drop {-steps[worst]:.2e} between {grid[worst]:g} and "
                   f"{grid[worst + 1]:g} Hz); below SQL at {grid[0]:g} Hz={below}; "
                   f"g->0: {', '.join(f'{w:.6f}' for w in weak)}", elapsed, 300)
    return ok


# -- 6 ------------------------------------------------------------------------

def criterion_6():
    t0 = time.perf_counter()
    p = PhysicalParams()
    t1, t2, delta = 200.0, 2000.0, 5e-6
    nus = [5e3, 1e4, 2e4, 4e4, 8e4]
    nyq = 0.5 / delta
    rows = []
    ok = True
    for i, nu in enumerate(nus):
        dyn = build_dynamics(p, field_for_larmor(p, nu), RelaxationRates(t1, t2), 5.29e13)
        cfg = parse_config("paper_fig2")
        m = cfg.measurement_model()
        dm = discretize(dyn, delta)
        rec = measure_photocurrent(simulate_spin(dm, dyn.q_eq, 2**22, seed=600 + i), m, seed=700 + i)
        s = psd_welch(rec, 8192)
        fit = lorentzian_fit(s, search=(0.5 * nu, min(1.5 * nu, nyq)))
        dc = abs(fit.center - nu)
        dw = abs(fit.fwhm / (t2 / np.pi) - 1)
        ok &= dc <= s.resolution and dw < 0.05 and not fit.no_peak
        rows.append(f"{nu / 1e3:g}kHz: dcenter={dc:.1f}Hz (bin {s.resolution:.1f}), dfwhm={100 * dw:.2f}%")
    pc = PhysicalParams(n_rb=3.6e13)
    omegas = 2 * np.pi * np.array([250.0, 500.0, 750.0, 1000.0, 1250.0, 1500.0, 1750.0, 2000.0])
    cal = density_calibration(synthetic_linewidths(omegas, 3.6e13, 30.0, pc, rel_noise=0.01, seed=31), pc)
    dn = abs(cal.n_rb / 3.6e13 - 1)
    ok &= dn < 0.05
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 180
    _report(6, ok, "; ".join(rows) + f"; density {cal.n_rb:.4g} (err {100 * dn:.2f}%)", elapsed, 180)
    return bool(ok)


# -- 7 ------------------------------------------------------------------------

def criterion_7():
    t0 = time.perf_counter()
    cfg = parse_config("paper_fig1d")
    grads = [g * NT_PER_MM for g in (0.0, 14.3, 28.6, 42.9, 57.2)]
    scfg = GradientScanConfig(duration=cfg.experiment.decay_duration)
    res = gradient_scan(cfg.system(), grads, scfg)
    rates = [r.decay_rate for r in res]
    strictly = all(b > a for a, b in zip(rates, rates[1:]))
    added = recovered_added_rates(res)
    closed = abs(added[-1] / res[-1].injected_rate - 1)
    t = np.linspace(0, 2e-3, 400)
    synth = np.column_stack([t, 1.0 - 0.6 * np.exp(-2.7e3 * t)])
    rt = abs(decay_fit(synth, 1.0).rate / 2.7e3 - 1)
    elapsed = time.perf_counter() - t0
    ok = strictly and closed < 0.1 and rt < 1e-6 and elapsed < 180
    _report(7, ok, "decay rates " + ", ".join(f"{r:.1f}" for r in rates)
                   + f" (strictly increasing={strictly}); injected {res[-1].injected_rate:.1f} vs recovered "
                   f"{added[-1]:.1f} (err {100 * closed:.1f}%); r=2.7e3 round trip err {rt:.1e}", elapsed, 180)
    return ok


# -- 8 ------------------------------------------------------------------------

def criterion_8():
    t0 = time.perf_counter()
    mismatches = []
    compared = 0
    with tempfile.TemporaryDirectory() as tmp:
        for preset, cmds in PRESET_COMMANDS.items():
            cfg = parse_config(preset)
            for cmd in cmds:
                dirs = [Path(tmp) / preset / cmd / run for run in ("a", "b")]
                for d in dirs:
                    run_command(cmd, cfg, d)
                for f in sorted(dirs[0].glob("*.csv")):
                    compared += 1
                    if f.read_bytes() != (dirs[1] / f.name).read_bytes():
                        mismatches.append(f"{preset}/{cmd}/{f.name}")
    elapsed = time.perf_counter() - t0
    ok = not mismatches and compared > 0 and elapsed < 60
    _report(8, ok, f"{compared} CSVs compared across {len(PRESET_COMMANDS)} presets; mismatches: "
                   f"{', '.join(mismatches) or 'none'}", elapsed, 60)
    return ok


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8]


def _run(fn, capsys):
    with capsys.disabled():
        print()
        ok = fn()
    assert ok, f"{fn.__name__} failed; see the CRITERION line above"


def test_criterion_1_witness_arithmetic(capsys):
    _run(criterion_1, capsys)


def test_criterion_2_se_coefficient(capsys):
    _run(criterion_2, capsys)


def test_criterion_3_stationarity(capsys):
    _run(criterion_3, capsys)


def test_criterion_4_filter_consistency(capsys):
    _run(criterion_4, capsys)


def test_criterion_5_squeezing_transition(capsys):
    _run(criterion_5, capsys)


def test_criterion_6_spectroscopy_round_trip(capsys):
    _run(criterion_6, capsys)


def test_criterion_7_gradient_decay(capsys):
    _run(criterion_7, capsys)


def test_criterion_8_reproducibility(capsys):
    _run(criterion_8, capsys)


if __name__ == "__main__":
    results = [fn() for fn in CRITERIA]
    sys.exit(0 if all(results) else 1)
