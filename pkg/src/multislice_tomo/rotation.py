"""Rotation of volumes about the vertical axis and its exact transpose.

A rotation by ``theta`` acts identically on every ``y`` row, so it is stored
once per (grid size, angle) as a sparse ``N**2 x N**2`` bilinear interpolation
matrix over the ``(z, x)`` plane. Trilinear interpolation of voxel centers
reduces to this because the ``y`` sampling positions are unchanged.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.sparse as sp

from .core import DimensionError, ObjectVolume


@functools.lru_cache(maxsize=512)
def rotation_matrix(n: int, theta_deg: float) -> sp.csr_matrix:
    """Sparse bilinear sampling matrix for an ``n x n`` (z, x) plane.

    Output voxel ``(z_o, x_o)`` (centered coordinates) reads the source at
    ``x_s = cos*x_o + sin*z_o``, ``z_s = -sin*x_o + cos*z_o``. Neighbours
    outside the grid contribute zero.
    """
    t = np.deg2rad(theta_deg)
    c = (n - 1) / 2.0
    zo, xo = np.meshgrid(np.arange(n) - c, np.arange(n) - c, indexing="ij")
    cos, sin = np.cos(t), np.sin(t)
    # snap to the grid so quarter turns map voxel centers exactly
    xs = np.round(cos * xo + sin * zo + c, 10).ravel()
    zs = np.round(-sin * xo + cos * zo + c, 10).ravel()
    x0 = np.floor(xs).astype(np.int64)
    z0 = np.floor(zs).astype(np.int64)
    fx = xs - x0
    fz = zs - z0

    rows, cols, vals = [], [], []
    out_index = np.arange(n * n)
    for dz, wz in ((0, 1.0 - fz), (1, fz)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            zi, xi = z0 + dz, x0 + dx
            w = wz * wx
            ok = (zi >= 0) & (zi < n) & (xi >= 0) & (xi < n) & (w != 0)
            rows.append(out_index[ok])
            cols.append(zi[ok] * n + xi[ok])
            vals.append(w[ok])
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    m.sum_duplicates()
    return m


@functools.lru_cache(maxsize=512)
def rotation_matrix_transpose(n: int, theta_deg: float) -> sp.csr_matrix:
    return rotation_matrix(n, theta_deg).T.tocsr()


def _check_cubic(shape):
    if len(shape) != 3 or len(set(shape)) != 1:
        raise DimensionError(f"rotation needs a cubic volume, got {shape}")


def _apply(grid, m):
    # (z, y, x) -> rows indexed by (z, x), columns by y
    n = grid.shape[0]
    planes = np.ascontiguousarray(grid.transpose(0, 2, 1)).reshape(n * n, n)
    out = m @ planes
    return np.ascontiguousarray(out.reshape(n, n, n).transpose(0, 2, 1))


def rotate_grid(grid, theta_deg):
    grid = np.asarray(grid, dtype=np.float64)
    _check_cubic(grid.shape)
    if theta_deg == 0:
        return grid.copy()
    return _apply(grid, rotation_matrix(grid.shape[0], float(theta_deg)))


def rotate_grid_adjoint(grid, theta_deg):
    grid = np.asarray(grid, dtype=np.float64)
    _check_cubic(grid.shape)
    if theta_deg == 0:
        return grid.copy()
    return _apply(grid, rotation_matrix_transpose(grid.shape[0], float(theta_deg)))


def rotate_volume(vol: ObjectVolume, theta_deg: float) -> ObjectVolume:
    """Rotate ``delta`` and ``beta`` by ``theta_deg`` about the vertical axis."""
    _check_cubic(vol.shape)
    return ObjectVolume(rotate_grid(vol.delta, theta_deg), rotate_grid(vol.beta, theta_deg), vol.voxel_size_nm)


def rotate_adjoint(grad_vol: ObjectVolume, theta_deg: float) -> ObjectVolume:
    """Transpose of :func:`rotate_volume` (scatter with the same weights)."""
    _check_cubic(grad_vol.shape)
    return ObjectVolume(
        rotate_grid_adjoint(grad_vol.delta, theta_deg),
        rotate_grid_adjoint(grad_vol.beta, theta_deg),
        grad_vol.voxel_size_nm,
    )
