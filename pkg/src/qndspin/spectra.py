"""Spin-noise spectra, Lorentzian line fits and SERF density calibration."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.optimize import least_squares

from .physmodel import PhysicalParams
from .simulator import CSV_FMT, PhotocurrentRecord

MAX_FIT_ITER = 200
FIT_GTOL = 1e-10
MIN_WINDOW_BINS = 8
NO_PEAK_SNR = 5.0


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Spectrum:
    frequencies: np.ndarray
    psd: np.ndarray
    resolution: float
    segments: int

    def band_power(self, lo: float = -np.inf, hi: float = np.inf) -> float:
        sel = (self.frequencies >= lo) & (self.frequencies <= hi)
        return float(np.sum(self.psd[sel]) * self.resolution)


@dataclass(frozen=True)
class LorentzianFit:
    center: float
    fwhm: float
    amplitude: float
    offset: float
    residual_rms: float
    no_peak: bool = False

    def __call__(self, f):
        return lorentzian(f, self.center, self.fwhm, self.amplitude, self.offset)


@dataclass(frozen=True)
class CalibrationResult:
    n_rb: float
    delta_nu_0: float
    fit_covariance: np.ndarray

    @property
    def n_rb_stderr(self) -> float:
        return float(np.sqrt(self.fit_covariance[0, 0]))


def psd_welch(
    record: PhotocurrentRecord | np.ndarray,
    segment_length: int,
    overlap_fraction: float = 0.5,
    delta: float | None = None,
) -> Spectrum:
    """One-sided Hann-window Welch estimate in signal^2/Hz.

    ``record`` may be a bare array when ``delta`` is given.
    """
    if isinstance(record, PhotocurrentRecord):
        x = np.asarray(record.samples, dtype=float)
        if delta is None:
            if len(record.times) < 2:
                raise ValueError("record too short to infer the sampling interval")
            delta = float(record.times[1] - record.times[0])
    else:
        x = np.asarray(record, dtype=float)
        if delta is None:
            raise ValueError("delta is required for a bare array")
    segment_length = int(segment_length)
    if segment_length < 2:
        raise ValueError("segment_length must be >= 2")
    if segment_length > len(x):
        raise ValueError(f"record too short: {len(x)} samples < segment length {segment_length}")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    noverlap = int(round(overlap_fraction * segment_length))
    step = segment_length - noverlap
    freqs, psd = signal.welch(
        x, fs=1.0 / delta, window="hann", nperseg=segment_length, noverlap=noverlap,
        detrend="constant", return_onesided=True, scaling="density",
    )
    segments = (len(x) - noverlap) // step
    return Spectrum(freqs, psd, float(freqs[1] - freqs[0]), int(segments))


def lorentzian(f, center, fwhm, amplitude, offset):
    hw2 = (0.5 * fwhm) ** 2
    return offset + amplitude * hw2 / ((f - center) ** 2 + hw2)


def _lorentz_jac(f, center, fwhm, amplitude):
    hw = 0.5 * fwhm
    d = f - center
    den = d**2 + hw**2
    shape = hw**2 / den
    return np.column_stack([
        amplitude * shape * 2 * d / den,            # d/d center
        amplitude * hw * d**2 / den**2,             # d/d fwhm
        shape,                                      # d/d amplitude
        np.ones_like(f),                            # d/d offset
    ])


def _initial_guess(f, y):
    k = int(np.argmax(y))
    offset = float(np.percentile(y, 10))
    peak = float(y[k])
    half = offset + 0.5 * (peak - offset)
    lo = k
    while lo > 0 and y[lo] > half:
        lo -= 1
    hi = k
    while hi < len(y) - 1 and y[hi] > half:
        hi += 1
    df = f[1] - f[0]
    fwhm = max(float(f[hi] - f[lo]), 2 * df)
    return float(f[k]), fwhm, peak - offset, offset


def lorentzian_fit(
    s: Spectrum,
    window: tuple[float, float] | None = None,
    search: tuple[float, float] | None = None,
    dc_line: bool = False,
) -> LorentzianFit:
    """Least-squares fit of offset + amplitude * (w/2)^2 / ((f - f0)^2 + (w/2)^2).

    Without ``window`` the fit covers +-5 initial FWHM around the highest
    bin inside ``search`` (default: all non-DC bins), clipped to the
    spectrum. Spin-noise spectra with a field along [1, 1, 1] also carry a
    zero-frequency line from the non-precessing component, so pass a
    ``search`` band around the expected Larmor frequency.

    With ``dc_line`` the model adds that zero-frequency Lorentzian and the
    negative-frequency image of the precession line, which matters once the
    line is broad compared with its center. The reported amplitude is that
    of the positive-frequency term alone.
    """
    f_all, y_all = s.frequencies, s.psd
    if window is None:
        lo, hi = search if search is not None else (0.0, np.inf)
        body = (f_all > 0) & (f_all >= lo) & (f_all <= hi)
        if body.sum() < 3:
            raise ValueError("search band holds too few bins")
        c0, w0, _, _ = _initial_guess(f_all[body], y_all[body])
        if dc_line:
            return _fit_with_dc(s, c0, w0, (lo, hi))
        window = (c0 - 5 * w0, c0 + 5 * w0)
    elif dc_line:
        raise ValueError("dc_line fits choose their own window; pass search instead")
    sel = (f_all >= window[0]) & (f_all <= window[1])
    f, y = f_all[sel], y_all[sel]
    if len(f) < MIN_WINDOW_BINS:
        raise ValueError(f"fit window holds {len(f)} bins, need >= {MIN_WINDOW_BINS}")

    scale = float(np.max(np.abs(y)))
    if scale == 0 or np.ptp(y) <= 1e-12 * scale:
        return LorentzianFit(float(f[np.argmax(y)]), float(f[-1] - f[0]), 0.0,
                             float(np.mean(y)), float(np.std(y)), no_peak=True)
    yn = y / scale
    c0, w0, a0, o0 = _initial_guess(f, yn)
    span = f[-1] - f[0]
    df = f[1] - f[0]

    def resid(x):
        return lorentzian(f, *x) - yn

    def jac(x):
        return _lorentz_jac(f, x[0], x[1], x[2])

    res = least_squares(
        resid, x0=[c0, w0, a0, o0], jac=jac, method="trf",
        bounds=([f[0], 1e-3 * df, 0.0, -np.inf], [f[-1], 10 * span, np.inf, np.inf]),
        x_scale=[w0, w0, max(a0, 1e-12), max(abs(o0), a0, 1e-12)],
        max_nfev=MAX_FIT_ITER, gtol=FIT_GTOL, xtol=1e-14, ftol=1e-14,
    )
    center, fwhm, amp, off = res.x
    rms = float(np.sqrt(np.mean(res.fun**2))) * scale
    # a peak must stand clear of the scatter it is fitted through
    # and a line narrower than one bin is a single outlier, not a resolved peak
    no_peak = amp * scale <= NO_PEAK_SNR * rms or fwhm < df
    # wandering around in pure noise is a "no peak" answer, not a failure
    if res.status == 0 and not no_peak:
        raise FitError(f"Lorentzian fit did not converge in {MAX_FIT_ITER} evaluations")
    return LorentzianFit(float(center), float(fwhm), float(amp * scale), float(off * scale),
                         rms, no_peak=bool(no_peak or amp == 0))


def _fit_with_dc(s: Spectrum, c0: float, w0: float, band) -> LorentzianFit:
    df = s.resolution
    # the lowest bins are biased by the mean removal
    sel = (s.frequencies > 1.5 * df) & (s.frequencies <= c0 + 5 * w0)
    f, y = s.frequencies[sel], s.psd[sel]
    if len(f) < MIN_WINDOW_BINS + 2:
        raise ValueError(f"fit window holds {len(f)} bins, need >= {MIN_WINDOW_BINS + 2}")
    scale = float(np.max(np.abs(y)))
    if scale == 0 or np.ptp(y) <= 1e-12 * scale:
        return LorentzianFit(c0, w0, 0.0, float(np.mean(y)), float(np.std(y)), no_peak=True)
    yn = y / scale
    o0 = max(float(np.min(yn)), 1e-9)
    k = int(np.argmin(np.abs(f - c0)))
    a0 = max(float(yn[k]) - o0, 1e-6)
    b0 = max(float(yn[0]) - o0 - a0, 1e-6)
    d0 = max(0.2 * c0, 2 * df)
    lo = max(band[0], f[0])
    hi = min(band[1], f[-1])

    def model_parts(x):
        c, w, a, o, b, d = x
        return (lorentzian(f, c, w, 1.0, 0.0), lorentzian(f, -c, w, 1.0, 0.0),
                lorentzian(f, 0.0, d, 1.0, 0.0))

    def resid(x):
        c, w, a, o, b, d = x
        lp, lm, l0 = model_parts(x)
        return o + a * (lp + lm) + b * l0 - yn

    def jac(x):
        c, w, a, o, b, d = x
        jp = _lorentz_jac(f, c, w, a)
        jm = _lorentz_jac(f, -c, w, a)
        j0 = _lorentz_jac(f, 0.0, d, b)
        return np.column_stack([
            jp[:, 0] - jm[:, 0], jp[:, 1] + jm[:, 1], jp[:, 2] + jm[:, 2],
            np.ones_like(f), j0[:, 2], j0[:, 1],
        ])

    span = f[-1] - f[0]
    res = least_squares(
        resid, x0=[c0, w0, a0, o0, b0, d0], jac=jac, method="trf",
        # the shot-noise floor is non-negative; the zero-frequency line cannot be
        # resolved below two bins
        bounds=([lo, 1e-3 * df, 0.0, 0.0, 0.0, 2 * df],
                [hi, 10 * span, np.inf, np.inf, np.inf, 10 * span]),
        x_scale=[w0, w0, a0, max(abs(o0), a0), max(b0, a0), d0],
        max_nfev=MAX_FIT_ITER, gtol=FIT_GTOL, xtol=1e-14, ftol=1e-14,
    )
    c, w, a, o, _, _ = res.x
    rms = float(np.sqrt(np.mean(res.fun**2))) * scale
    no_peak = a * scale <= NO_PEAK_SNR * rms
    if res.status == 0 and not no_peak:
        raise FitError(f"Lorentzian fit did not converge in {MAX_FIT_ITER} evaluations")
    return LorentzianFit(float(c), float(w), float(a * scale), float(o * scale), rms,
                         no_peak=bool(no_peak or a == 0))


def se_bracket(nuclear_spin: float) -> float:
    """2I[-3 + I(1 + 4I(I+2))] / (3[3 + 4I(I+1)]); equals 5/3 for I = 3/2."""
    i = nuclear_spin
    return 2 * i * (-3 + i * (1 + 4 * i * (i + 2))) / (3 * (3 + 4 * i * (i + 1)))


def se_linewidth(omega_l, r_se: float, nuclear_spin: float):
    """SERF spin-exchange contribution to the FWHM linewidth [Hz]."""
    if not r_se > 0:
        raise ValueError("r_se must be positive")
    return np.asarray(omega_l, dtype=float) ** 2 * se_bracket(nuclear_spin) / (np.pi * r_se)


def se_transverse_rate(omega_l, r_se: float, nuclear_spin: float):
    """Spin-exchange addition to the transverse amplitude decay rate, pi * dnu_SE [1/s]."""
    return np.pi * se_linewidth(omega_l, r_se, nuclear_spin)


def density_calibration(points, p: PhysicalParams) -> CalibrationResult:
    """Fit dnu = dnu_0 + dnu_SE(omega_L; n_Rb) for (n_Rb, dnu_0).

    The model is linear in (dnu_0, 1/n_Rb), so the least-squares optimum is
    found exactly by linear regression on omega_L^2 and mapped back; the
    parameter covariance follows from the Jacobian of that mapping.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be a sequence of (omega_l, delta_nu) pairs")
    if len(pts) < 3:
        raise ValueError("need at least 3 calibration points")
    w2 = pts[:, 0] ** 2
    dnu = pts[:, 1]
    if np.ptp(w2) <= 1e-12 * max(np.max(w2), 1.0):
        raise ValueError("rank-deficient calibration: omega_l values are not distinct")
    design = np.column_stack([np.ones_like(w2), w2])
    coef, rss, rank, _ = np.linalg.lstsq(design, dnu, rcond=None)
    if rank < 2:
        raise ValueError("rank-deficient calibration design")
    dnu0, slope = coef
    if not slope > 0:
        raise ValueError("fitted linewidth does not grow with omega_l; density is unidentifiable")
    dof = len(pts) - 2
    resid = dnu - design @ coef
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov_lin = s2 * np.linalg.inv(design.T @ design)
    # slope = c / n  with  c = bracket / (pi sigma vbar)
    c = se_bracket(p.nuclear_spin) / (np.pi * p.sigma_se * p.v_bar)
    n = c / slope
    jac = np.array([[0.0, -c / slope**2], [1.0, 0.0]])
    cov = jac @ cov_lin @ jac.T
    return CalibrationResult(n_rb=float(n), delta_nu_0=float(dnu0), fit_covariance=cov)


def synthetic_linewidths(omegas, n_rb: float, delta_nu_0: float, p: PhysicalParams,
                         rel_noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Linewidth data dnu_0 + dnu_SE with optional multiplicative Gaussian noise."""
    r_se = p.sigma_se * n_rb * p.v_bar
    dnu = delta_nu_0 + se_linewidth(omegas, r_se, p.nuclear_spin)
    if rel_noise:
        rng = np.random.default_rng(seed)
        dnu = dnu * (1 + rel_noise * rng.standard_normal(len(dnu)))
    return np.column_stack([np.asarray(omegas, dtype=float), dnu])


def write_spectrum_csv(s: Spectrum, path) -> Path:
    path = Path(path)
    np.savetxt(path, np.column_stack([s.frequencies, s.psd]), fmt=CSV_FMT,
               delimiter=",", header="frequency,psd", comments="")
    return path


def read_calibration_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, :2]
