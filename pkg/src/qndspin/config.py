"""Versioned JSON run configuration.

``parse_config`` returns a fully resolved ``RunConfig``: every default is
filled in and the derived quantities (field vector, Larmor frequency,
spin-exchange rate, transverse rate) are written back, so dumping the model
gives a file that reproduces the run exactly.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .physmodel import (
    GAMMA_ELECTRON,
    MeasurementModel,
    PhysicalParams,
    RelaxationRates,
    SystemModel,
    atom_number,
    field_for_larmor,
    se_rate,
)
from .spectra import se_transverse_rate

SCHEMA_VERSION = 1
# unpublished instrument parameters; presets carry stand-in values
SYNTHETIC_FIELDS = ("measurement.g_coupling", "measurement.eta", "measurement.photon_flux")


class ConfigError(ValueError):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=False)


class PhysicalBlock(_Block):
    n_rb: float = Field(3.6e14, ge=0, description="number density [cm^-3]")
    sigma_se: float = Field(1.9e-14, gt=0, description="spin-exchange cross-section [cm^2]")
    v_bar: float = Field(4.75e4, gt=0, description="relative thermal velocity [cm/s]")
    gamma_e: float = Field(GAMMA_ELECTRON, gt=0, description="electron gyromagnetic ratio [rad/s/T]")
    q_slow: float = Field(6.0, gt=0)
    nuclear_spin: float = Field(1.5, gt=0)
    cell_length: float = Field(3.0, gt=0, description="[cm]")
    beam_area: float = Field(0.049, gt=0, description="[cm^2]")

    @field_validator("nuclear_spin")
    @classmethod
    def _half_integer(cls, v):
        if not float(2 * v).is_integer():
            raise ValueError("nuclear_spin must be a half-integer")
        return v


class DynamicsBlock(_Block):
    larmor_hz: float | None = Field(None, ge=0)
    b_direction: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0], min_length=3, max_length=3)
    b_field: list[float] | None = Field(None, min_length=3, max_length=3, description="[T]")
    t1_inv: float = Field(200.0, ge=0)
    t2_inv: float | None = Field(None, ge=0)
    # None: follow the spin-exchange law unless t2_inv is given
    t2_from_se: bool | None = None
    r_se: float | None = Field(None, gt=0, description="spin-exchange rate override [1/s]")

    @model_validator(mode="after")
    def _rate_order(self):
        if self.t2_inv is not None and self.t2_inv < self.t1_inv:
            raise ValueError(
                f"dynamics.t2_inv ({self.t2_inv}) must be >= dynamics.t1_inv ({self.t1_inv})"
            )
        if self.t2_inv is None and self.t2_from_se is False:
            raise ValueError("dynamics.t2_inv is required when dynamics.t2_from_se is false")
        return self


class MeasurementBlock(_Block):
    g_coupling: float = Field(1.567e-12, ge=0, description="Faraday rotation per spin [rad]")
    eta: float = Field(0.8, gt=0, le=1)
    photon_flux: float = Field(4.0e15, ge=0, description="[photons/s]")
    delta: float = Field(5e-6, gt=0, description="sampling interval [s]")
    synthetic: bool = True


class PriorBlock(_Block):
    mean: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    cov_scale: float = Field(1.0, gt=0, description="prior covariance as a multiple of q_eq")
    cov: list[list[float]] | None = None

    @field_validator("cov")
    @classmethod
    def _cov_shape(cls, v):
        if v is None:
            return v
        a = np.asarray(v, dtype=float)
        if a.shape != (3, 3) or not np.allclose(a, a.T):
            raise ValueError("prior.cov must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(a).min() < -1e-12 * abs(np.trace(a)):
            raise ValueError("prior.cov must be positive semidefinite")
        return v


class ExperimentBlock(_Block):
    seed: int = Field(20190101, ge=0)
    n_steps: int = Field(20000, ge=1)
    input_csv: str | None = None
    # spectroscopy
    segment_length: int = Field(8192, ge=8)
    overlap: float = Field(0.5, ge=0, lt=1)
    fit_window_hz: list[float] | None = Field(None, min_length=2, max_length=2)
    spectrum_larmor_hz: list[float] | None = None
    # scans
    larmor_scan_hz: list[float] = Field(
        default_factory=lambda: [1e3, 2e3, 5e3, 1e4, 2e4, 5e4, 1e5, 2e5]
    )
    gradients_nt_per_mm: list[float] = Field(default_factory=lambda: [0.0, 14.3, 28.6, 42.9, 57.2])
    delta_z: float | None = Field(None, gt=0, description="singlet separation spread [m]")
    gamma_choice: Literal["slowed", "electron"] = "slowed"
    anisotropic: bool = False
    decay_duration: float = Field(2e-3, gt=0)
    # density calibration
    calibration_csv: str | None = None
    calibration_larmor_hz: list[float] = Field(
        default_factory=lambda: [250.0, 500.0, 750.0, 1000.0, 1250.0, 1500.0, 1750.0, 2000.0]
    )
    calibration_n_rb: float | None = Field(None, gt=0)
    calibration_delta_nu_0: float = Field(30.0, ge=0)
    calibration_noise: float = Field(0.01, ge=0)

    @field_validator("gradients_nt_per_mm")
    @classmethod
    def _nonneg(cls, v):
        if any(g < 0 for g in v):
            raise ValueError("gradients must be non-negative")
        return v


class OutputBlock(_Block):
    directory: str = "qndspin-out"
    format: Literal["csv", "csv+svg"] = "csv"


class RunConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    physical: PhysicalBlock = Field(default_factory=PhysicalBlock)
    dynamics: DynamicsBlock = Field(default_factory=DynamicsBlock)
    measurement: MeasurementBlock = Field(default_factory=MeasurementBlock)
    prior: PriorBlock = Field(default_factory=PriorBlock)
    experiment: ExperimentBlock = Field(default_factory=ExperimentBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="after")
    def _resolve(self):
        p = self.params()
        d = self.dynamics
        if d.r_se is None:
            r = se_rate(p)
            if not r > 0:
                raise ValueError("dynamics.r_se cannot be derived from a zero density; set it explicitly")
            d.r_se = r
        if d.b_field is not None:
            larmor = p.gamma * float(np.linalg.norm(d.b_field)) / (2 * np.pi)
            if d.larmor_hz is not None and not np.isclose(d.larmor_hz, larmor, rtol=1e-9, atol=1e-12):
                raise ValueError(
                    f"dynamics.larmor_hz ({d.larmor_hz}) disagrees with dynamics.b_field ({larmor} Hz)"
                )
            # keep a stated frequency so that re-resolving is a fixed point
            if d.larmor_hz is None:
                d.larmor_hz = larmor
        else:
            if d.larmor_hz is None:
                d.larmor_hz = 1000.0
            d.b_field = [float(x) for x in field_for_larmor(p, d.larmor_hz, d.b_direction)]
        if d.t2_from_se is None:
            d.t2_from_se = d.t2_inv is None
        if d.t2_from_se:
            t2 = d.t1_inv + float(se_transverse_rate(2 * np.pi * d.larmor_hz, d.r_se, p.nuclear_spin))
            if d.t2_inv is not None and not np.isclose(d.t2_inv, t2, rtol=1e-9):
                raise ValueError(
                    f"dynamics.t2_inv ({d.t2_inv}) conflicts with dynamics.t2_from_se (gives {t2})"
                )
            d.t2_inv = t2
        return self

    # -- model construction ------------------------------------------------

    def params(self) -> PhysicalParams:
        return PhysicalParams(**self.physical.model_dump())

    def rates(self) -> RelaxationRates:
        return RelaxationRates(self.dynamics.t1_inv, self.dynamics.t2_inv)

    def measurement_model(self) -> MeasurementModel:
        m = self.measurement
        return MeasurementModel(m.g_coupling, m.eta, m.photon_flux, m.delta)

    def system(self, larmor_hz: float | None = None) -> SystemModel:
        """System at the configured field, or at ``larmor_hz`` along the same direction.

        When the transverse rate follows the spin-exchange law it is
        re-derived for the requested Larmor frequency.
        """
        p = self.params()
        d = self.dynamics
        if larmor_hz is None:
            return SystemModel(p, tuple(d.b_field), self.rates(), self.measurement_model())
        b = field_for_larmor(p, larmor_hz, d.b_field if any(d.b_field) else d.b_direction)
        if d.t2_from_se:
            t2 = d.t1_inv + float(se_transverse_rate(2 * np.pi * larmor_hz, d.r_se, p.nuclear_spin))
        else:
            t2 = d.t2_inv
        return SystemModel(p, tuple(b), RelaxationRates(d.t1_inv, t2), self.measurement_model())

    @property
    def n_atoms(self) -> float:
        return atom_number(self.params())

    def prior_cov(self) -> np.ndarray:
        if self.prior.cov is not None:
            return np.asarray(self.prior.cov, dtype=float)
        return self.prior.cov_scale * (self.n_atoms / 4.0) * np.eye(3)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        return hash_config(self.resolved())


def hash_config(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def preset_names() -> list[str]:
    root = resources.files("qndspin") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _load_source(path) -> tuple[dict, str]:
    p = Path(path)
    if p.is_file():
        text = p.read_text()
        origin = str(p)
    else:
        name = p.name[:-5] if p.name.endswith(".json") else p.name
        res = resources.files("qndspin") / "presets" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"config file not found: {path} (presets: {', '.join(preset_names())})")
        text = res.read_text()
        origin = f"preset:{name}"
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    return data, origin


def parse_config(path) -> RunConfig:
    """Load a config file (or a bundled preset name) and resolve all defaults."""
    data, _ = _load_source(path)
    return config_from_dict(data)
