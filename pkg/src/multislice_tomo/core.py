"""Domain types, unit conversions and feasibility checks.

All physical lengths are in nanometers. Volumes are stored with axis order
``(z, y, x)``: ``z`` is the beam axis at zero rotation (slice index), ``y`` is
the vertical rotation axis and ``x`` the horizontal transverse axis.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

# hc in keV*nm
HC_KEV_NM = 1.2398


class ReconError(Exception):
    """Base class for all package errors."""


class DomainError(ReconError, ValueError):
    """A scalar argument lies outside the domain of a formula."""


class DimensionError(ReconError, ValueError):
    """Array shapes are inconsistent."""


class ConfigError(ReconError, ValueError):
    """Geometry or run configuration is invalid."""


class DataError(ReconError, ValueError):
    """Measured data violate their invariants."""


class ConstraintError(ReconError, RuntimeError):
    """A support/positivity constraint became unsatisfiable."""


class ResourceError(ReconError, MemoryError):
    """A computation would exceed its memory budget."""


class NumericalError(ReconError, ArithmeticError):
    """Optimization diverged. ``state`` holds the last finite iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def _positive(name, value):
    if not (value > 0 and math.isfinite(value)):
        raise DomainError(f"{name} must be positive and finite, got {value!r}")


def wavelength_from_energy(energy_keV: float) -> float:
    """Photon wavelength in nm for a beam energy in keV."""
    _positive("energy_keV", energy_keV)
    return HC_KEV_NM / energy_keV


def depth_of_focus(resolution_nm: float, wavelength_nm: float) -> float:
    """Depth of focus ``(2 / 0.61**2) * res**2 / wavelength`` in nm."""
    _positive("resolution_nm", resolution_nm)
    _positive("wavelength_nm", wavelength_nm)
    return 2.0 / 0.61**2 * resolution_nm**2 / wavelength_nm


def klein_cook_max_dz(mean_ri: float, Q: float, pixel_nm: float, wavelength_nm: float) -> float:
    """Largest slice thickness that keeps a slice in the thin-grating regime."""
    for name, v in (("mean_ri", mean_ri), ("Q", Q), ("pixel_nm", pixel_nm), ("wavelength_nm", wavelength_nm)):
        _positive(name, v)
    return 2.0 * mean_ri * Q * pixel_nm**2 / (math.pi * wavelength_nm)


@dataclass(frozen=True)
class ObjectVolume:
    """Refractive decrement ``delta`` and absorption index ``beta`` on a cubic grid.

    Treated as an immutable value: operations return new volumes.
    """

    delta: np.ndarray
    beta: np.ndarray
    voxel_size_nm: float = 1.0

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if delta.ndim != 3 or delta.shape != beta.shape:
            raise DimensionError(f"delta {delta.shape} and beta {beta.shape} must be identical 3D grids")
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(beta))):
            raise DataError("volume contains non-finite values")
        _positive("voxel_size_nm", self.voxel_size_nm)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls, shape, voxel_size_nm=1.0):
        if isinstance(shape, int):
            shape = (shape,) * 3
        return cls(np.zeros(shape), np.zeros(shape), voxel_size_nm)

    @property
    def shape(self):
        return self.delta.shape

    @property
    def is_cubic(self):
        return len(set(self.shape)) == 1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def copy(self):
        return ObjectVolume(self.delta.copy(), self.beta.copy(), self.voxel_size_nm)


@dataclass(frozen=True)
class Wavefield:
    """Complex 2D field sampled with square pixels."""

    values: np.ndarray
    pixel_size_nm: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise DimensionError(f"wavefield must be 2D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("wavefield contains non-finite values")
        _positive("pixel_size_nm", self.pixel_size_nm)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def intensity(self):
        return np.abs(self.values) ** 2

    @property
    def energy(self):
        return float(np.sum(self.intensity))


class Mode(str, enum.Enum):
    FULLFIELD = "fullfield"
    PTYCHOGRAPHY = "ptychography"


@dataclass(frozen=True)
class ExperimentGeometry:
    """Beam, sampling and acquisition settings.

    ``probe_positions`` holds integer ``(x, y)`` probe centers in pixels.
    ``slice_thickness_nm`` must be an integer multiple of ``voxel_size_nm``;
    each multislice slice then averages that many voxel layers.
    """

    energy_keV: float
    voxel_size_nm: float
    detector_distance_nm: float
    angles_deg: np.ndarray
    n_slices: int
    mode: Mode = Mode.FULLFIELD
    slice_thickness_nm: float | None = None
    probe_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    klein_cook_q: float = 1.0
    mean_ri: float = 1.0

    def __post_init__(self):
        _positive("voxel_size_nm", self.voxel_size_nm)
        mode = Mode(self.mode)
        dz = self.voxel_size_nm if self.slice_thickness_nm is None else float(self.slice_thickness_nm)
        _positive("slice_thickness_nm", dz)
        if not math.isfinite(self.detector_distance_nm) or self.detector_distance_nm < 0:
            raise ConfigError("detector_distance_nm must be >= 0")
        if int(self.n_slices) != self.n_slices or self.n_slices < 1:
            raise ConfigError(f"n_slices must be a positive integer, got {self.n_slices}")
        ratio = dz / self.voxel_size_nm
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(f"slice thickness {dz} nm is not a multiple of the voxel size {self.voxel_size_nm} nm")
        wl = wavelength_from_energy(self.energy_keV)
        dz_max = klein_cook_max_dz(self.mean_ri, self.klein_cook_q, self.voxel_size_nm, wl)
        if dz > dz_max * (1 + 1e-12):
            raise ConfigError(
                f"slice thickness {dz} nm exceeds the Klein-Cook bound {dz_max:.4g} nm (Q={self.klein_cook_q})"
            )
        angles = np.atleast_1d(np.asarray(self.angles_deg, dtype=np.float64))
        if angles.ndim != 1 or angles.size == 0:
            raise ConfigError("angles_deg must be a non-empty 1D list")
        positions = np.asarray(self.probe_positions, dtype=np.int64).reshape(-1, 2)
        if mode is Mode.PTYCHOGRAPHY and len(positions) == 0:
            raise ConfigError("ptychography geometry needs at least one probe position")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "slice_thickness_nm", dz)
        object.__setattr__(self, "n_slices", int(self.n_slices))
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "probe_positions", positions)
        object.__setattr__(self, "_wavelength", wl)

    @property
    def wavelength_nm(self) -> float:
        return self._wavelength

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    @property
    def n_positions(self) -> int:
        return 1 if self.mode is Mode.FULLFIELD else len(self.probe_positions)

    @property
    def voxels_per_slice(self) -> int:
        return int(round(self.slice_thickness_nm / self.voxel_size_nm))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def downsampled(self, factor: int) -> ExperimentGeometry:
        """Geometry for a grid coarsened by ``factor`` in every direction."""
        if factor == 1:
            return self
        if self.n_slices % factor:
            raise DimensionError(f"n_slices {self.n_slices} not divisible by {factor}")
        return self.replace(
            voxel_size_nm=self.voxel_size_nm * factor,
            slice_thickness_nm=self.slice_thickness_nm * factor,
            n_slices=self.n_slices // factor,
            probe_positions=self.probe_positions // factor,
        )


@dataclass(frozen=True)
class SupportMask:
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 3:
            raise DimensionError(f"support mask must be 3D, got {mask.shape}")
        if not mask.any():
            raise ConstraintError("support mask is empty")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, shape):
        if isinstance(shape, int):
            shape = (shape,) * 3
        return cls(np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.mask.shape

    def check_matches(self, vol: ObjectVolume):
        if self.shape != vol.shape:
            raise DimensionError(f"support {self.shape} does not match volume {vol.shape}")


@dataclass(frozen=True)
class MeasuredDataset:
    """Intensity frames indexed ``[angle, probe_position, y, x]``."""

    intensities: np.ndarray
    geometry: ExperimentGeometry
    photon_budget: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.intensities)
        if data.ndim != 4:
            raise DimensionError(f"intensities must be [angle, position, y, x], got {data.shape}")
        g = self.geometry
        if data.shape[:2] != (g.n_angles, g.n_positions):
            raise DimensionError(
                f"frame count {data.shape[:2]} does not match geometry ({g.n_angles} angles, {g.n_positions} positions)"
            )
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise DataError("intensities must be finite and nonnegative")
        if self.photon_budget is not None:
            _positive("photon_budget", self.photon_budget)
        object.__setattr__(self, "intensities", data)

    @property
    def frame_shape(self):
        return self.intensities.shape[2:]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class AdamParams:
    step_size: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class InitParams:
    delta_mean: float = 8.7e-7
    beta_mean: float = 5.1e-8
    rel_std: float = 0.1


@dataclass(frozen=True)
class ShrinkWrapParams:
    enabled: bool = True
    gaussian_sigma_px: float = 2.0
    threshold_fraction: float = 0.05
    period_epochs: int = 1


# Regularizer weights used for the two acquisition modes.
FULLFIELD_WEIGHTS = {"alpha_delta": 1.5e-8, "alpha_beta": 1.5e-9, "gamma": 1e-11}
PTYCHO_WEIGHTS = {"alpha_delta": 1e-9, "alpha_beta": 1e-10, "gamma": 1e-9}


@dataclass(frozen=True)
class ReconConfig:
    alpha_delta: float = FULLFIELD_WEIGHTS["alpha_delta"]
    alpha_beta: float = FULLFIELD_WEIGHTS["alpha_beta"]
    gamma: float = FULLFIELD_WEIGHTS["gamma"]
    adam: AdamParams = field(default_factory=AdamParams)
    minibatch_size: int = 10
    n_aggregate: int = 1
    n_workers: int = 1
    multiscale_floor_px: int = 64
    stop_rel_decrease: float = 0.03
    max_epochs: int = 10
    init: InitParams = field(default_factory=InitParams)
    rng_seed: int = 0
    shrink_wrap: ShrinkWrapParams = field(default_factory=ShrinkWrapParams)
    use_support: bool = True
    position_chunk: int = 64
    checkpoint_stride: int = 0
    memory_limit_bytes: int = 2 * 1024**3

    def __post_init__(self):
        for name in ("alpha_delta", "alpha_beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a nonnegative finite number, got {v!r}")
        a = self.adam
        if not (0 < a.beta1 < 1 and 0 < a.beta2 < 1):
            raise ConfigError("adam beta1 and beta2 must lie in (0, 1)")
        if a.step_size <= 0 or a.epsilon <= 0:
            raise ConfigError("adam step_size and epsilon must be positive")
        for name in ("minibatch_size", "n_aggregate", "n_workers", "multiscale_floor_px", "position_chunk"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if not 0 < self.stop_rel_decrease < 1:
            raise ConfigError("stop_rel_decrease must lie in (0, 1)")
        if self.checkpoint_stride < 0:
            raise ConfigError("checkpoint_stride must be >= 0")

    @classmethod
    def for_mode(cls, mode, **overrides):
        """Defaults for ``mode``: ptychography uses its own weights, minibatch 1 and no support."""
        mode = Mode(mode)
        if mode is Mode.PTYCHOGRAPHY:
            base = dict(PTYCHO_WEIGHTS, minibatch_size=1, use_support=False,
                        shrink_wrap=ShrinkWrapParams(enabled=False))
        else:
            base = dict(FULLFIELD_WEIGHTS)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)
