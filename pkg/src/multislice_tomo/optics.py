"""Wave-optics kernels: slice modulation, Fresnel and far-field propagation, multislice.

Sign convention: a slice multiplies the field by ``exp(k dz (i*delta - beta))``
(positive delta advances the phase) and free space of length ``z`` applies
the transfer function ``exp(+i*pi*lambda*z*|f|**2)``. This pairing is the one
under which homogeneous-object phase retrieval (Paganin) is stable.

Functions suffixed ``_array`` act on plain complex arrays and broadcast over
leading axes; the unsuffixed versions take and return :class:`Wavefield`.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.fft as sfft

from .core import DimensionError, ExperimentGeometry, ObjectVolume, Wavefield


def modulation_constant(dz_nm, wavelength_nm):
    return 2.0 * np.pi * dz_nm / wavelength_nm


def transmission(delta_slice, beta_slice, dz_nm, wavelength_nm):
    c = modulation_constant(dz_nm, wavelength_nm)
    return np.exp(c * (1j * np.asarray(delta_slice) - np.asarray(beta_slice)))


def modulate_array(psi, delta_slice, beta_slice, dz_nm, wavelength_nm):
    return psi * transmission(delta_slice, beta_slice, dz_nm, wavelength_nm)


def modulate(field: Wavefield, delta_slice, beta_slice, dz_nm, wavelength_nm) -> Wavefield:
    """Multiply ``field`` by the transmission function of one slice."""
    delta_slice = np.asarray(delta_slice, dtype=np.float64)
    beta_slice = np.asarray(beta_slice, dtype=np.float64)
    if delta_slice.shape != field.shape or beta_slice.shape != field.shape:
        raise DimensionError(
            f"slice shapes {delta_slice.shape}/{beta_slice.shape} do not match field {field.shape}"
        )
    out = modulate_array(field.values, delta_slice, beta_slice, dz_nm, wavelength_nm)
    return Wavefield(out, field.pixel_size_nm)


@functools.lru_cache(maxsize=128)
def transfer_function(shape, pixel_nm, wavelength_nm, distance_nm):
    """Fresnel transfer function on the unshifted FFT frequency grid (read-only)."""
    ny, nx = shape
    fy = sfft.fftfreq(ny, d=pixel_nm)
    fx = sfft.fftfreq(nx, d=pixel_nm)
    f2 = fy[:, None] ** 2 + fx[None, :] ** 2
    h = np.exp(1j * np.pi * wavelength_nm * distance_nm * f2)
    h.flags.writeable = False
    return h


def apply_transfer(psi, h):
    """Multiply the 2D spectrum (last two axes) of ``psi`` by ``h``."""
    return sfft.ifft2(sfft.fft2(psi, axes=(-2, -1)) * h, axes=(-2, -1))


def fresnel_propagate_array(psi, distance_nm, wavelength_nm, pixel_nm, pad_factor=1):
    if distance_nm == 0:
        return np.array(psi, dtype=np.complex128, copy=True)
    psi = np.asarray(psi, dtype=np.complex128)
    ny, nx = psi.shape[-2:]
    if pad_factor == 1:
        h = transfer_function((ny, nx), pixel_nm, wavelength_nm, distance_nm)
        return apply_transfer(psi, h)
    py, px = int(round(ny * pad_factor)), int(round(nx * pad_factor))
    oy, ox = (py - ny) // 2, (px - nx) // 2
    padded = np.zeros(psi.shape[:-2] + (py, px), dtype=np.complex128)
    padded[..., oy:oy + ny, ox:ox + nx] = psi
    h = transfer_function((py, px), pixel_nm, wavelength_nm, distance_nm)
    return apply_transfer(padded, h)[..., oy:oy + ny, ox:ox + nx]


def fresnel_propagate(field: Wavefield, distance_nm, wavelength_nm, pad_factor=1) -> Wavefield:
    """Propagate ``field`` over ``distance_nm`` (negative values back-propagate).

    With the default ``pad_factor=1`` the operator is unitary and periodic;
    ``pad_factor=2`` zero-pads to suppress wrap-around at the cost of unitarity.
    """
    if not np.isfinite(distance_nm):
        raise ValueError("propagation distance must be finite")
    out = fresnel_propagate_array(field.values, distance_nm, wavelength_nm, field.pixel_size_nm, pad_factor)
    return Wavefield(out, field.pixel_size_nm)


def far_field_array(psi):
    return sfft.fftshift(
        sfft.fft2(sfft.ifftshift(psi, axes=(-2, -1)), axes=(-2, -1), norm="ortho"), axes=(-2, -1)
    )


def far_field_adjoint_array(psi):
    return sfft.fftshift(
        sfft.ifft2(sfft.ifftshift(psi, axes=(-2, -1)), axes=(-2, -1), norm="ortho"), axes=(-2, -1)
    )


def far_field(field: Wavefield) -> Wavefield:
    """Centered orthonormal 2D Fourier transform of the field.

    The returned pixel size is the horizontal frequency step ``1 / (Nx * pixel)``.
    """
    pitch = 1.0 / (field.shape[1] * field.pixel_size_nm)
    return Wavefield(far_field_array(field.values), pitch)


def slice_stack(grid, voxels_per_slice):
    """Average groups of ``voxels_per_slice`` z-layers of a ``(z, y, x)`` grid."""
    if voxels_per_slice == 1:
        return grid
    nz = grid.shape[0]
    if nz % voxels_per_slice:
        raise DimensionError(f"depth {nz} is not divisible into slices of {voxels_per_slice} voxels")
    return grid.reshape((nz // voxels_per_slice, voxels_per_slice) + grid.shape[1:]).mean(axis=1)


def check_slicing(shape, geometry: ExperimentGeometry):
    nz = shape[0]
    if geometry.n_slices * geometry.voxels_per_slice != nz:
        raise DimensionError(
            f"{geometry.n_slices} slices of {geometry.voxels_per_slice} voxels do not span depth {nz}"
        )


def multislice_array(psi, delta_slices, beta_slices, dz_nm, wavelength_nm, pixel_nm, store=False):
    """Modulate-then-propagate through every slice.

    ``psi`` may carry leading batch axes. With ``store=True`` the modulated
    field entering each propagation step is also returned, shape ``(J,) + psi.shape``.
    """
    h = transfer_function(psi.shape[-2:], pixel_nm, wavelength_nm, dz_nm)
    c = modulation_constant(dz_nm, wavelength_nm)
    stored = np.empty((len(delta_slices),) + psi.shape, dtype=np.complex128) if store else None
    for j in range(len(delta_slices)):
        psi = psi * np.exp(c * (1j * delta_slices[j] - beta_slices[j]))
        if store:
            stored[j] = psi
        psi = apply_transfer(psi, h)
    return (psi, stored) if store else psi


def multislice_exit_wave(probe: Wavefield, rotated: ObjectVolume, geometry: ExperimentGeometry) -> Wavefield:
    """Exit wave after the probe has traversed every slice of an already rotated volume."""
    if probe.shape != rotated.shape[1:]:
        raise DimensionError(f"probe shape {probe.shape} does not match slice shape {rotated.shape[1:]}")
    check_slicing(rotated.shape, geometry)
    s = geometry.voxels_per_slice
    out = multislice_array(
        probe.values,
        slice_stack(rotated.delta, s),
        slice_stack(rotated.beta, s),
        geometry.slice_thickness_nm,
        geometry.wavelength_nm,
        geometry.voxel_size_nm,
    )
    return Wavefield(out, probe.pixel_size_nm)
