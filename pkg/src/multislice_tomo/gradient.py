"""Amplitude loss with L1/TV regularizers and its reverse-mode gradient.

The gradient is the adjoint of each forward stage applied in reverse order:
detector residual -> detector propagator adjoint -> per slice (propagator
adjoint, then modulation adjoint, using the stored modulated fields) ->
slice un-averaging -> rotation transpose. Complex intermediates are
differentiated through their real and imaginary parts, so the returned
gradients are ordinary real gradients with respect to ``delta`` and ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import optics
from .core import (
    DataError,
    DimensionError,
    ExperimentGeometry,
    MeasuredDataset,
    ObjectVolume,
    ReconConfig,
    ResourceError,
)
from .forward import Probe, from_detector_adjoint, incident_fields, to_detector
from .rotation import rotate_grid, rotate_grid_adjoint

FD_MAX_N = 12


@dataclass(frozen=True)
class LossBreakdown:
    fidelity: float
    l1_delta: float
    l1_beta: float
    tv: float

    @property
    def total(self) -> float:
        return self.fidelity + self.l1_delta + self.l1_beta + self.tv

    def as_dict(self):
        return {"fidelity": self.fidelity, "l1_delta": self.l1_delta, "l1_beta": self.l1_beta,
                "tv": self.tv, "total": self.total}


@dataclass(frozen=True)
class GradientPair:
    g_delta: np.ndarray
    g_beta: np.ndarray

    def __post_init__(self):
        if self.g_delta.shape != self.g_beta.shape:
            raise DimensionError("gradient grids must have the same shape")

    @property
    def shape(self):
        return self.g_delta.shape

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.g_delta)), np.max(np.abs(self.g_beta))))


@dataclass(frozen=True)
class Batch:
    """Frames for a subset of angles, ``frames`` shaped ``(B, N_k, ny, nx)``."""

    angles_deg: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        angles = np.atleast_1d(np.asarray(self.angles_deg, dtype=np.float64))
        if frames.ndim != 4 or frames.shape[0] != len(angles):
            raise DimensionError(f"frames {frames.shape} do not match {len(angles)} angles")
        if np.any(frames < 0):
            raise DataError("measured intensities must be nonnegative")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "angles_deg", angles)

    @classmethod
    def from_dataset(cls, dataset: MeasuredDataset, indices=None):
        if indices is None:
            indices = np.arange(dataset.geometry.n_angles)
        indices = np.asarray(indices, dtype=np.int64)
        return cls(dataset.geometry.angles_deg[indices], dataset.intensities[indices])

    def __len__(self):
        return len(self.angles_deg)


def tv(grid) -> float:
    """Anisotropic total variation: summed absolute forward differences, no wraparound."""
    grid = np.asarray(grid, dtype=np.float64)
    return float(sum(np.abs(np.diff(grid, axis=ax)).sum() for ax in range(grid.ndim)))


def tv_subgradient(grid):
    grid = np.asarray(grid, dtype=np.float64)
    g = np.zeros_like(grid)
    for ax in range(grid.ndim):
        s = np.sign(np.diff(grid, axis=ax))
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        g[tuple(hi)] += s
        g[tuple(lo)] -= s
    return g


def regularizers(vol: ObjectVolume, cfg: ReconConfig):
    return (
        cfg.alpha_delta * float(np.abs(vol.delta).sum()),
        cfg.alpha_beta * float(np.abs(vol.beta).sum()),
        cfg.gamma * tv(vol.delta) if cfg.gamma else 0.0,
    )


def _check_inputs(vol: ObjectVolume, batch: Batch, geom: ExperimentGeometry):
    optics.check_slicing(vol.shape, geom)
    if batch.frames.shape[2:] != vol.shape[1:]:
        raise DimensionError(f"frames {batch.frames.shape[2:]} do not match volume slices {vol.shape[1:]}")
    if batch.frames.shape[1] != geom.n_positions:
        raise DimensionError(f"batch has {batch.frames.shape[1]} positions, geometry {geom.n_positions}")


def _position_chunk(vol_shape, geom, cfg):
    j = geom.n_slices
    per_position = 16 * vol_shape[1] * vol_shape[2]
    stored = j if not cfg.checkpoint_stride else (j // cfg.checkpoint_stride + cfg.checkpoint_stride + 1)
    per_position *= stored + 4
    if per_position > cfg.memory_limit_bytes:
        raise ResourceError(
            f"one probe position needs {per_position / 2**20:.0f} MiB of stored wavefields, over the "
            f"{cfg.memory_limit_bytes / 2**20:.0f} MiB limit; set checkpoint_stride or raise memory_limit_bytes"
        )
    return max(1, min(cfg.position_chunk, geom.n_positions, cfg.memory_limit_bytes // per_position))


def _forward_stored(psi, ds, bs, h, c, stride):
    """Multislice pass keeping what the backward pass needs.

    stride == 0: returns every modulated field. Otherwise only the fields
    entering slices ``0, stride, 2*stride, ...``.
    """
    n = len(ds)
    if stride == 0:
        stored = np.empty((n,) + psi.shape, dtype=np.complex128)
    else:
        stored = {}
    for j in range(n):
        if stride and j % stride == 0:
            stored[j] = psi
        psi = psi * np.exp(c * (1j * ds[j] - bs[j]))
        if not stride:
            stored[j] = psi
        psi = optics.apply_transfer(psi, h)
    return psi, stored


def _backward(g, ds, bs, h, c, stored, stride, gds, gbs):
    """Back-propagate ``g`` (gradient at the exit wave) through all slices.

    Accumulates the slice gradients into ``gds``/``gbs`` in place.
    """
    n = len(ds)
    hc = np.conj(h)
    if stride:
        segments = [(a, min(a + stride, n)) for a in range(0, n, stride)]
    else:
        segments = [(0, n)]
    for a, b in reversed(segments):
        if stride:
            psi = stored[a]
            seg = np.empty((b - a,) + psi.shape, dtype=np.complex128)
            for j in range(a, b):
                psi = psi * np.exp(c * (1j * ds[j] - bs[j]))
                seg[j - a] = psi
                psi = optics.apply_transfer(psi, h)
            offset = a
        else:
            seg, offset = stored, 0
        for j in range(b - 1, a - 1, -1):
            g = optics.apply_transfer(g, hc)
            prod = seg[j - offset] * np.conj(g)
            if prod.ndim > 2:
                prod = prod.sum(axis=tuple(range(prod.ndim - 2)))
            gds[j] -= c * prod.imag
            gbs[j] -= c * prod.real
            g = g * np.exp(c * (-1j * ds[j] - bs[j]))
    return g


def _unslice(g_slices, voxels_per_slice):
    if voxels_per_slice == 1:
        return g_slices
    return np.repeat(g_slices / voxels_per_slice, voxels_per_slice, axis=0)


def _fidelity(vol, batch, probe, geom, cfg, want_grad):
    """Unnormalized squared amplitude residual and, optionally, its gradient."""
    _check_inputs(vol, batch, geom)
    frame = vol.shape[1:]
    s = geom.voxels_per_slice
    nk = geom.n_positions
    c = optics.modulation_constant(geom.slice_thickness_nm, geom.wavelength_nm)
    h = optics.transfer_function(frame, geom.voxel_size_nm, geom.wavelength_nm, geom.slice_thickness_nm)
    chunk = _position_chunk(vol.shape, geom, cfg)
    stride = cfg.checkpoint_stride
    total = 0.0
    g_delta = np.zeros(vol.shape) if want_grad else None
    g_beta = np.zeros(vol.shape) if want_grad else None
    for theta, frames in zip(batch.angles_deg, batch.frames):
        ds = optics.slice_stack(rotate_grid(vol.delta, theta), s)
        bs = optics.slice_stack(rotate_grid(vol.beta, theta), s)
        gds = np.zeros_like(ds) if want_grad else None
        gbs = np.zeros_like(bs) if want_grad else None
        for start in range(0, nk, chunk):
            idx = np.arange(start, min(start + chunk, nk))
            psi0 = incident_fields(geom, probe, idx, frame)
            target = np.sqrt(np.asarray(frames[idx], dtype=np.float64))
            if want_grad:
                exit_wave, stored = _forward_stored(psi0, ds, bs, h, c, stride)
            else:
                exit_wave = optics.multislice_array(psi0, ds, bs, geom.slice_thickness_nm,
                                                    geom.wavelength_nm, geom.voxel_size_nm)
            u = to_detector(exit_wave, geom)
            amp = np.abs(u)
            resid = amp - target
            total += float(np.sum(resid**2))
            if want_grad:
                with np.errstate(invalid="ignore", divide="ignore"):
                    gu = np.where(amp > 0, 2.0 * resid * u / amp, 0.0)
                g_exit = from_detector_adjoint(gu, geom)
                _backward(g_exit, ds, bs, h, c, stored, stride, gds, gbs)
        if want_grad:
            g_delta += rotate_grid_adjoint(_unslice(gds, s), theta)
            g_beta += rotate_grid_adjoint(_unslice(gbs, s), theta)
    return total, g_delta, g_beta


def _normalizer(vol, batch, geom):
    return len(batch) * geom.n_positions * vol.shape[1] * vol.shape[2]


def loss_and_gradient(vol: ObjectVolume, batch: Batch, probe: Probe | None, geom: ExperimentGeometry,
                      cfg: ReconConfig, want_grad=True):
    """Loss breakdown and (optionally) its gradient over one batch of angles.

    The data term is the mean squared amplitude residual over every pixel,
    probe position and angle in the batch, so minibatch losses estimate the
    full-dataset mean.
    """
    fid, g_delta, g_beta = _fidelity(vol, batch, probe, geom, cfg, want_grad)
    norm = _normalizer(vol, batch, geom)
    l1d, l1b, tvv = regularizers(vol, cfg)
    breakdown = LossBreakdown(fid / norm, l1d, l1b, tvv)
    if not want_grad:
        return breakdown, None
    g_delta /= norm
    g_beta /= norm
    if cfg.alpha_delta:
        g_delta += cfg.alpha_delta * np.sign(vol.delta)
    if cfg.alpha_beta:
        g_beta += cfg.alpha_beta * np.sign(vol.beta)
    if cfg.gamma:
        g_delta += cfg.gamma * tv_subgradient(vol.delta)
    return breakdown, GradientPair(g_delta, g_beta)


def loss(vol, batch, probe, geom, cfg) -> LossBreakdown:
    return loss_and_gradient(vol, batch, probe, geom, cfg, want_grad=False)[0]


def gradient(vol, batch, probe, geom, cfg) -> GradientPair:
    return loss_and_gradient(vol, batch, probe, geom, cfg)[1]


def central_difference(fn, x, h):
    """Central-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def fd_gradient(vol, batch, probe, geom, cfg, h=1e-9) -> GradientPair:
    """Finite-difference oracle for :func:`gradient`; refuses grids larger than 12**3."""
    if not h > 0:
        raise ValueError("h must be positive")
    if max(vol.shape) > FD_MAX_N:
        raise ResourceError(f"fd_gradient is limited to grids of at most {FD_MAX_N}^3, got {vol.shape}")

    def total_delta(d):
        return loss(ObjectVolume(d, vol.beta, vol.voxel_size_nm), batch, probe, geom, cfg).total

    def total_beta(b):
        return loss(ObjectVolume(vol.delta, b, vol.voxel_size_nm), batch, probe, geom, cfg).total

    return GradientPair(central_difference(total_delta, vol.delta, h), central_difference(total_beta, vol.beta, h))
