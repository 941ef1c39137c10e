"""Forward models for full-field (near-field) and ptychographic (far-field) tomography."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import optics
from .core import (
    ConfigError,
    DimensionError,
    ExperimentGeometry,
    Mode,
    ObjectVolume,
    Wavefield,
)
from .rotation import rotate_volume


@dataclass(frozen=True)
class Probe:
    """Illumination patch plus the ``(x, y)`` pixel centers it is scanned to.

    For full-field imaging ``field`` is the plane wave covering the whole frame
    and ``positions`` is empty.
    """

    field: Wavefield
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        if not np.max(np.abs(self.field.values)) > 0:
            raise ConfigError("probe amplitude is zero everywhere")
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64).reshape(-1, 2))

    def with_positions(self, positions):
        return Probe(self.field, positions)

    def corners(self, frame_shape):
        """Top-left patch corners ``(y0, x0)`` for every position, bounds-checked."""
        py, px = self.field.shape
        ny, nx = frame_shape
        x0 = self.positions[:, 0] - px // 2
        y0 = self.positions[:, 1] - py // 2
        if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x0 + px > nx) or np.any(y0 + py > ny):
            raise ConfigError(f"probe patch {self.field.shape} placed outside frame {frame_shape}")
        return np.stack([y0, x0], axis=1)

    def embedded(self, indices, frame_shape):
        """Probe fields on the full frame for the given position indices, shape ``(K, ny, nx)``."""
        indices = np.atleast_1d(indices)
        if np.any(indices < 0) or np.any(indices >= len(self.positions)):
            raise IndexError(f"probe position index out of range 0..{len(self.positions) - 1}")
        corners = self.corners(frame_shape)
        py, px = self.field.shape
        out = np.zeros((len(indices),) + tuple(frame_shape), dtype=np.complex128)
        for i, k in enumerate(indices):
            y0, x0 = corners[k]
            out[i, y0:y0 + py, x0:x0 + px] = self.field.values
        return out

    def downsampled(self, factor: int) -> Probe:
        """Probe for a grid coarsened by ``factor``: patch field averaged in blocks."""
        if factor == 1:
            return self
        py, px = self.field.shape
        if py % factor or px % factor:
            raise DimensionError(f"probe patch {self.field.shape} not divisible by {factor}")
        v = self.field.values.reshape(py // factor, factor, px // factor, factor).mean(axis=(1, 3))
        return Probe(Wavefield(v, self.field.pixel_size_nm * factor), self.positions // factor)


def plane_wave(shape, pixel_nm=1.0) -> Probe:
    return Probe(Wavefield(np.ones(shape, dtype=np.complex128), pixel_nm))


def make_gaussian_probe(sigma_px, max_phase_rad, shape, pixel_nm=1.0) -> Probe:
    """Gaussian amplitude with unit peak and a phase following the same profile."""
    if not sigma_px > 0:
        raise ConfigError("sigma_px must be positive")
    if isinstance(shape, int):
        shape = (shape, shape)
    ny, nx = shape
    y = np.arange(ny) - ny // 2
    x = np.arange(nx) - nx // 2
    g = np.exp(-(y[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma_px**2))
    return Probe(Wavefield(g * np.exp(1j * max_phase_rad * g), pixel_nm))


def make_scan_grid(n_side: int, frame_px: int, patch_px: int = 1) -> np.ndarray:
    """Square raster of ``n_side**2`` probe centers ``(x, y)`` symmetric about the frame center.

    Spacing is ``frame_px // n_side``. Raises if a ``patch_px`` patch would leave the frame.
    """
    if n_side < 1:
        raise ConfigError("n_side must be >= 1")
    spacing = frame_px // n_side
    offsets = np.round((np.arange(n_side) - (n_side - 1) / 2.0) * spacing).astype(np.int64)
    centers = frame_px // 2 + offsets
    lo = centers.min() - patch_px // 2
    hi = centers.max() - patch_px // 2 + patch_px
    if lo < 0 or hi > frame_px:
        raise ConfigError(
            f"a {patch_px}px probe patch on a {n_side}x{n_side} grid (spacing {spacing}px) leaves the {frame_px}px frame"
        )
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def incident_fields(geom: ExperimentGeometry, probe: Probe | None, indices, frame_shape):
    """Entrance fields for a set of probe-position indices, shape ``(K, ny, nx)``."""
    if geom.mode is Mode.FULLFIELD:
        if probe is None:
            return np.ones((1,) + tuple(frame_shape), dtype=np.complex128)
        if probe.field.shape != tuple(frame_shape):
            raise DimensionError(f"full-field probe {probe.field.shape} must cover the frame {frame_shape}")
        return probe.field.values[None].copy()
    if probe is None:
        raise ConfigError("ptychography needs a probe")
    return probe.embedded(indices, frame_shape)


def to_detector(psi, geom: ExperimentGeometry):
    """Exit waves (leading batch axes allowed) to detector-plane fields."""
    if geom.mode is Mode.FULLFIELD:
        return optics.fresnel_propagate_array(psi, geom.detector_distance_nm, geom.wavelength_nm, geom.voxel_size_nm)
    return optics.far_field_array(psi)


def from_detector_adjoint(g, geom: ExperimentGeometry):
    if geom.mode is Mode.FULLFIELD:
        return optics.fresnel_propagate_array(g, -geom.detector_distance_nm, geom.wavelength_nm, geom.voxel_size_nm)
    return optics.far_field_adjoint_array(g)


def detector_fields(rotated: ObjectVolume, psi0, geom: ExperimentGeometry):
    """Detector-plane fields for entrance fields ``psi0`` through an already rotated volume."""
    optics.check_slicing(rotated.shape, geom)
    s = geom.voxels_per_slice
    exit_wave = optics.multislice_array(
        psi0,
        optics.slice_stack(rotated.delta, s),
        optics.slice_stack(rotated.beta, s),
        geom.slice_thickness_nm,
        geom.wavelength_nm,
        geom.voxel_size_nm,
    )
    return to_detector(exit_wave, geom)


def forward_fullfield(vol: ObjectVolume, theta_deg, geom: ExperimentGeometry) -> np.ndarray:
    """Near-field intensity for a unit plane wave at rotation ``theta_deg``."""
    if geom.mode is not Mode.FULLFIELD:
        raise ConfigError("forward_fullfield needs a full-field geometry")
    rotated = rotate_volume(vol, theta_deg)
    psi0 = np.ones(vol.shape[1:], dtype=np.complex128)
    return np.abs(detector_fields(rotated, psi0, geom)) ** 2


def forward_ptycho(vol: ObjectVolume, theta_deg, k: int, probe: Probe, geom: ExperimentGeometry) -> np.ndarray:
    """Far-field diffraction intensity for probe position ``k`` at rotation ``theta_deg``."""
    if geom.mode is not Mode.PTYCHOGRAPHY:
        raise ConfigError("forward_ptycho needs a ptychography geometry")
    psi0 = probe.embedded([k], vol.shape[1:])[0]
    rotated = rotate_volume(vol, theta_deg)
    return np.abs(detector_fields(rotated, psi0, geom)) ** 2


def simulate_intensities(vol: ObjectVolume, geom: ExperimentGeometry, probe: Probe | None = None,
                         chunk: int = 64, progress=None) -> np.ndarray:
    """Noiseless frames for every angle and probe position, shape ``(N_theta, N_k, ny, nx)``."""
    frame = vol.shape[1:]
    nk = geom.n_positions
    out = np.empty((geom.n_angles, nk) + tuple(frame), dtype=np.float64)
    for a, theta in enumerate(geom.angles_deg):
        rotated = rotate_volume(vol, theta)
        for start in range(0, nk, chunk):
            idx = np.arange(start, min(start + chunk, nk))
            psi0 = incident_fields(geom, probe, idx, frame)
            out[a, idx] = np.abs(detector_fields(rotated, psi0, geom)) ** 2
        if progress is not None:
            progress(a)
    return out
