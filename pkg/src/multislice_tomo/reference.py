"""Conventional baseline: single-distance phase retrieval, error reduction and filtered backprojection.

Projections follow the rotation convention of :mod:`rotation`: at angle
``theta`` a point ``(z, x)`` of the object (centered coordinates) lands on
detector column ``x_o = cos(theta) * x - sin(theta) * z``.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from . import optics
from .core import (
    ConfigError,
    ConstraintError,
    DimensionError,
    MeasuredDataset,
    Mode,
    ObjectVolume,
    SupportMask,
)
from .rotation import rotate_grid

log = logging.getLogger(__name__)

INTENSITY_FLOOR = 1e-12


def paganin_phase(intensity, delta_over_beta, wavelength_nm, distance_nm, pixel_nm, pad_px=0):
    """Phase of a homogeneous object from one near-field intensity frame.

    ``intensity`` must be normalized to unit incident flux. The result uses
    the forward model's convention (material advances the phase), i.e.
    ``phase = -(delta/2beta) * ln(filtered intensity)``. ``pad_px`` pads every
    side with edge values before filtering to suppress wrap-around.
    """
    I = np.asarray(intensity, dtype=np.float64)
    if np.any(I <= 0):
        warnings.warn("nonpositive intensities clamped before phase retrieval", RuntimeWarning, stacklevel=2)
        I = np.maximum(I, INTENSITY_FLOOR)
    shape = I.shape
    if pad_px:
        I = np.pad(I, pad_px, mode="edge")
    ny, nx = I.shape
    fy = sfft.fftfreq(ny, d=pixel_nm)
    fx = sfft.fftfreq(nx, d=pixel_nm)
    f2 = fy[:, None] ** 2 + fx[None, :] ** 2
    filt = 1.0 + np.pi * wavelength_nm * distance_nm * delta_over_beta * f2
    filtered = sfft.ifft2(sfft.fft2(I) / filt).real
    if pad_px:
        filtered = filtered[pad_px:pad_px + shape[0], pad_px:pad_px + shape[1]]
    return -0.5 * delta_over_beta * np.log(np.maximum(filtered, INTENSITY_FLOOR))


def error_reduction(intensity_frame, support2d, distance_nm, n_iter, wavelength_nm, pixel_nm,
                    delta_over_beta=None, initial=None, background=0.0):
    """Error-reduction phase retrieval between the exit plane and a near-field detector.

    Each iteration propagates to the detector, imposes the measured modulus,
    propagates back and replaces everything outside ``support2d`` by
    ``background`` (0 for the textbook algorithm, 1 for a unit incident wave).

    Returns ``(exit_wave, errors)`` where ``errors[i]`` is the detector-plane
    mean squared modulus error of the iterate after ``i`` iterations.
    """
    I = np.asarray(intensity_frame, dtype=np.float64)
    support = np.asarray(support2d, dtype=bool)
    if support.shape != I.shape:
        raise DimensionError(f"support {support.shape} does not match frame {I.shape}")
    if not support.any():
        raise ConstraintError("2D support is empty")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    amp = np.sqrt(np.maximum(I, 0.0))

    def prop(psi, z):
        return optics.fresnel_propagate_array(psi, z, wavelength_nm, pixel_nm)

    if initial is not None:
        psi = np.asarray(initial, dtype=np.complex128)
    else:
        start = np.abs(prop(amp.astype(np.complex128), -distance_nm))
        phase = 0.0
        if delta_over_beta is not None:
            phase = paganin_phase(np.maximum(I, INTENSITY_FLOOR), delta_over_beta, wavelength_nm, distance_nm,
                                  pixel_nm)
        psi = start * np.exp(1j * phase)
        psi = np.where(support, psi, background)

    errors = []
    for k in range(n_iter + 1):
        det = prop(psi, distance_nm)
        mag = np.abs(det)
        errors.append(float(np.mean((mag - amp) ** 2)))
        if k == n_iter:
            break
        with np.errstate(invalid="ignore", divide="ignore"):
            det = np.where(mag > 0, det / mag, 1.0) * amp
        psi = prop(det, -distance_nm)
        psi = np.where(support, psi, background)
    return optics.Wavefield(psi, pixel_nm), errors


def _ramlak_kernel(size):
    n = np.fft.fftfreq(size, d=1.0 / size).astype(np.int64)
    h = np.zeros(size)
    h[n == 0] = 0.25
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi**2 * n[odd].astype(float) ** 2)
    return h


def ramlak_filter(sinogram):
    """Spatial-domain Ram-Lak filter along the last axis, zero-padded to avoid wrap-around."""
    s = np.asarray(sinogram, dtype=np.float64)
    n = s.shape[-1]
    size = int(2 ** np.ceil(np.log2(2 * n)))
    kernel_ft = sfft.fft(_ramlak_kernel(size)).real
    padded = np.zeros(s.shape[:-1] + (size,))
    padded[..., :n] = s
    return sfft.ifft(sfft.fft(padded, axis=-1) * kernel_ft, axis=-1).real[..., :n]


def fbp(sinogram, angles_deg):
    """Filtered backprojection of projections sampled in voxel units.

    ``sinogram`` is ``[N_theta, N]`` for one horizontal slice, returning a
    ``(z, x)`` slice, or ``[N_theta, N_y, N]`` returning a ``(z, y, x)`` volume.
    """
    s = np.asarray(sinogram, dtype=np.float64)
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=np.float64))
    if len(angles) < 2:
        raise ValueError("fbp needs at least two angles")
    if s.shape[0] != len(angles):
        raise DimensionError(f"sinogram has {s.shape[0]} rows for {len(angles)} angles")
    single = s.ndim == 2
    if single:
        s = s[:, None, :]
    n_theta, ny, n = s.shape
    q = ramlak_filter(s)
    c = (n - 1) / 2.0
    zz, xx = np.meshgrid(np.arange(n) - c, np.arange(n) - c, indexing="ij")
    zz, xx = zz.ravel(), xx.ravel()
    out = np.zeros((ny, n * n))
    for a, theta in enumerate(np.deg2rad(angles)):
        t = np.cos(theta) * xx - np.sin(theta) * zz + c
        i0 = np.floor(t).astype(np.int64)
        w = t - i0
        row = q[a]
        for idx, wt in ((i0, 1.0 - w), (i0 + 1, w)):
            ok = (idx >= 0) & (idx < n)
            out[:, ok] += row[:, idx[ok]] * wt[ok]
    out *= np.pi / n_theta
    vol = out.reshape(ny, n, n).transpose(1, 0, 2)
    return vol[:, 0, :] if single else np.ascontiguousarray(vol)


def project_support(mask, theta_deg):
    """2D ``(y, x)`` footprint of a 3D support seen along the beam at ``theta_deg``."""
    rotated = rotate_grid(np.asarray(mask, dtype=np.float64), theta_deg)
    return rotated.sum(axis=0) > 0


def _edge_mean(frame, edge_px=2):
    return float(np.mean(np.concatenate([frame[:, :edge_px].ravel(), frame[:, -edge_px:].ravel()])))


def _require_fullfield(dataset):
    if dataset.geometry.mode is not Mode.FULLFIELD:
        raise ConfigError("the projection baseline needs a full-field dataset")


def phase_sinogram(dataset: MeasuredDataset, delta_over_beta):
    """Paganin line integrals of ``delta`` (voxel units) for every angle, ``[N_theta, ny, nx]``.

    Frames are padded by half their width and the mean phase of the two
    outermost columns on each side is taken as the empty-beam level and
    subtracted. A global intensity scale only shifts that level, so the
    result does not depend on it.
    """
    _require_fullfield(dataset)
    g = dataset.geometry
    out = np.empty((g.n_angles,) + tuple(dataset.frame_shape))
    pad = dataset.frame_shape[1] // 2
    for a in range(g.n_angles):
        frame = np.asarray(dataset.intensities[a, 0], dtype=np.float64)
        if not _edge_mean(frame) > 0:
            raise ConfigError(f"frame {a} carries no flux at its edges")
        phi = paganin_phase(frame, delta_over_beta, g.wavelength_nm, g.detector_distance_nm, g.voxel_size_nm,
                            pad_px=pad)
        out[a] = (phi - _edge_mean(phi)) * g.wavelength_nm / (2 * np.pi * g.voxel_size_nm)
    return out


def init_support(dataset: MeasuredDataset, delta_over_beta, sigma_px=2.0, threshold_fraction=0.05) -> SupportMask:
    """Support from Paganin phases, FBP, Gaussian smoothing and a relative threshold.

    The empty-beam level is removed per frame (see :func:`phase_sinogram`), so
    the result is independent of a global intensity scale.
    """
    vol = fbp(phase_sinogram(dataset, delta_over_beta), dataset.geometry.angles_deg)
    if sigma_px:
        vol = ndimage.gaussian_filter(vol, sigma_px)
    if threshold_fraction <= 0:
        return SupportMask(np.ones(vol.shape, dtype=bool))
    mask = vol > threshold_fraction * vol.max()
    if not mask.any():
        raise ConstraintError(f"support is empty at threshold {threshold_fraction}; try a lower threshold")
    return SupportMask(mask)


def pure_projection_reconstruct(dataset: MeasuredDataset, delta_over_beta, support: SupportMask | None = None,
                                n_iter=200, sigma_px=2.0, threshold_fraction=0.05, with_beta=True,
                                progress=None) -> ObjectVolume:
    """ER phase retrieval per projection followed by FBP of the exit-wave phase (and log-amplitude).

    The 2D ER support at each angle is the beam-axis footprint of the 3D
    support. Phases are not unwrapped.
    """
    _require_fullfield(dataset)
    g = dataset.geometry
    if support is None:
        support = init_support(dataset, delta_over_beta, sigma_px, threshold_fraction)
    phases = np.empty((g.n_angles,) + tuple(dataset.frame_shape))
    logamp = np.empty_like(phases)
    wrapped = False
    for a, theta in enumerate(g.angles_deg):
        frame = np.asarray(dataset.intensities[a, 0], dtype=np.float64)
        s2 = project_support(support.mask, theta)
        psi, _ = error_reduction(frame, s2, g.detector_distance_nm, n_iter, g.wavelength_nm, g.voxel_size_nm,
                                 delta_over_beta=delta_over_beta, background=1.0)
        phases[a] = np.angle(psi.values)
        logamp[a] = np.log(np.maximum(np.abs(psi.values), 1e-300))
        wrapped |= bool(np.max(np.abs(phases[a])) > 0.9 * np.pi)
        if progress is not None:
            progress(a)
    if wrapped:
        warnings.warn("exit-wave phases approach +-pi; phase wrapping is not modeled", RuntimeWarning, stacklevel=2)
    scale = g.wavelength_nm / (2 * np.pi * g.voxel_size_nm)
    delta = fbp(phases * scale, g.angles_deg)
    beta = fbp(-logamp * scale, g.angles_deg) if with_beta else np.zeros_like(delta)
    return ObjectVolume(delta, beta, g.voxel_size_nm)
