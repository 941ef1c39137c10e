"""Synthetic specimens, material constants and the photon-budget noise model."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    ConfigError,
    DomainError,
    MeasuredDataset,
    ObjectVolume,
    SupportMask,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaterialRI:
    name: str
    delta: float
    beta: float
    energy_keV: float

    def __post_init__(self):
        if self.delta < 0 or self.beta < 0:
            raise ConfigError(f"material {self.name}: delta and beta must be nonnegative")

    @property
    def delta_over_beta(self):
        return self.delta / self.beta


# Free-atom estimates at 5 keV; see docs/materials.md for the derivation.
SILICON_5KEV = MaterialRI("Si", 1.966e-5, 1.13e-6, 5.0)
TIO2_5KEV = MaterialRI("TiO2", 2.90e-5, 3.6e-6, 5.0)


class Label(enum.IntEnum):
    VOID = 0
    WALL = 1
    GRAIN = 2
    OUTER_SPHERE = 3
    INNER_SPHERE = 4


# Cone geometry at the 256-voxel reference size.
REFERENCE_N = 256
TOP_DIAMETER = 80.0
BOTTOM_DIAMETER = 200.0
WALL_THICKNESS = 10.0
OUTER_SPHERE_RADII = (2.0, 4.0)
INNER_SPHERE_RADII = (5.0, 13.0)
GRAIN_RADII = (3.0, 8.0)
GRAIN_SPREAD = 0.3
MAX_PLACEMENT_TRIES = 2000


def _ball(shape, center, radius):
    """Boolean mask of voxel centers within ``radius`` of ``center`` (z, y, x)."""
    lo = [max(int(np.floor(c - radius)), 0) for c in center]
    hi = [min(int(np.ceil(c + radius)) + 1, n) for c, n in zip(center, shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.ogrid[sl]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return sl, d2 <= radius**2


def _place_spheres(rng, count, radii, propose, placed, what):
    """Rejection-sample non-overlapping spheres; ``propose(r)`` returns a center or None."""
    out = []
    for i in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            r = rng.uniform(*radii)
            r = max(r, 1.0)
            c = propose(r)
            if c is None:
                continue
            if all(np.linalg.norm(np.subtract(c, pc)) >= r + pr for pc, pr in placed + out):
                out.append((c, r))
                break
        else:
            log.warning("placed only %d of %d %s after %d tries", i, count, what, MAX_PLACEMENT_TRIES)
            break
    return out


def make_cone_phantom(n, voxel_nm=1.0, materials=None, rng_seed=0, wall_thickness_px=None,
                      n_outer=50, n_inner=10, n_grains=40):
    """Hollow truncated silicon cone with TiO2 spheres and internal grains.

    The cone axis is vertical (``y``) and spans the full grid height; the top
    (``y = 0``) and bottom diameters and every length scale with ``n / 256``.
    Sphere radii are clamped to at least one voxel. ``materials`` maps
    ``"body"`` and ``"spheres"`` to :class:`MaterialRI`.

    Returns ``(ObjectVolume, labels)`` with labels from :class:`Label`.
    """
    if n < 32:
        raise ConfigError(f"cone phantom needs n >= 32, got {n}")
    materials = materials or {"body": SILICON_5KEV, "spheres": TIO2_5KEV}
    try:
        body, spheres = materials["body"], materials["spheres"]
    except KeyError as err:
        raise ConfigError(f"materials is missing the {err.args[0]!r} entry") from None
    rng = np.random.default_rng(rng_seed)
    scale = n / REFERENCE_N
    wall = WALL_THICKNESS * scale if wall_thickness_px is None else float(wall_thickness_px)
    r_top = TOP_DIAMETER / 2 * scale
    r_bottom = BOTTOM_DIAMETER / 2 * scale
    c = (n - 1) / 2.0

    def r_outer(y):
        return r_top + (r_bottom - r_top) * y / (n - 1)

    z, y, x = np.ogrid[:n, :n, :n]
    rho = np.sqrt((z - c) ** 2 + (x - c) ** 2)
    ro = r_outer(y)
    labels = np.zeros((n, n, n), dtype=np.uint8)
    labels[(rho <= ro) & (rho > ro - wall)] = Label.WALL
    factor = np.ones((n, n, n))

    wall_voxels = np.argwhere(labels == Label.WALL)
    for _ in range(n_grains):
        center = wall_voxels[rng.integers(len(wall_voxels))]
        r = max(rng.uniform(*GRAIN_RADII) * scale, 1.0)
        f = rng.uniform(1 - GRAIN_SPREAD, 1 + GRAIN_SPREAD)
        sl, ball = _ball(labels.shape, center, r)
        sel = ball & (labels[sl] != Label.VOID)
        labels[sl][sel] = Label.GRAIN
        factor[sl][sel] = f

    def outer_center(r):
        yc = rng.uniform(r, n - 1 - r)
        phi = rng.uniform(0, 2 * np.pi)
        rc = r_outer(yc) + 0.5 * r
        zc, xc = c + rc * np.cos(phi), c + rc * np.sin(phi)
        if min(zc, xc) - r < 0 or max(zc, xc) + r > n - 1:
            return None
        return (zc, yc, xc)

    def inner_center(r):
        yc = rng.uniform(r, n - 1 - r)
        room = r_outer(yc) - wall - r
        if room < 0:
            return None
        rc = room * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        return (c + rc * np.cos(phi), yc, c + rc * np.sin(phi))

    outer = _place_spheres(rng, n_outer, np.multiply(OUTER_SPHERE_RADII, scale), outer_center, [], "outer spheres")
    inner = _place_spheres(rng, n_inner, np.multiply(INNER_SPHERE_RADII, scale), inner_center, outer, "inner spheres")
    for spheres_list, label in ((outer, Label.OUTER_SPHERE), (inner, Label.INNER_SPHERE)):
        for center, r in spheres_list:
            sl, ball = _ball(labels.shape, center, r)
            labels[sl][ball] = label
            factor[sl][ball] = 1.0

    delta = np.zeros((n, n, n))
    beta = np.zeros((n, n, n))
    is_body = (labels == Label.WALL) | (labels == Label.GRAIN)
    is_sphere = (labels == Label.OUTER_SPHERE) | (labels == Label.INNER_SPHERE)
    delta[is_body] = body.delta * factor[is_body]
    beta[is_body] = body.beta * factor[is_body]
    delta[is_sphere] = spheres.delta
    beta[is_sphere] = spheres.beta
    return ObjectVolume(delta, beta, voxel_nm), labels


def make_sphere_phantom(n, radius_px, material=SILICON_5KEV, voxel_nm=1.0, center=None, smooth_px=0.0):
    """Single homogeneous sphere; optionally Gaussian-smoothed by ``smooth_px``."""
    c = (n - 1) / 2.0
    center = (c, c, c) if center is None else center
    z, y, x = np.ogrid[:n, :n, :n]
    inside = ((z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2 <= radius_px**2).astype(float)
    if smooth_px:
        inside = ndimage.gaussian_filter(inside, smooth_px)
    return ObjectVolume(material.delta * inside, material.beta * inside, voxel_nm)


def object_support(vol: ObjectVolume) -> SupportMask:
    return SupportMask((vol.delta > 0) | (vol.beta > 0))


def blurred_support(mask, sigma_px=2.0, threshold_fraction=0.05) -> SupportMask:
    """Gaussian-blur a boolean mask and threshold it relative to its maximum."""
    blurred = ndimage.gaussian_filter(np.asarray(mask, dtype=float), sigma_px)
    return SupportMask(blurred > threshold_fraction * blurred.max())


def aor(support: SupportMask, projected: bool = True) -> float:
    """Fraction of the field occupied by the support.

    ``projected=True`` uses the beam-axis projection (a pixel counts if any
    voxel along ``z`` is inside); otherwise the 3D voxel fraction.
    """
    m = support.mask
    if projected:
        m = m.any(axis=0)
    return float(m.mean())


def photons_per_pixel(n_ph, sigma_aor, n):
    """Incident photons per detector pixel for ``n_ph`` photons on the support."""
    for name, v in (("n_ph", n_ph), ("sigma_aor", sigma_aor), ("n", n)):
        if not v > 0:
            raise DomainError(f"{name} must be positive")
    return n_ph / (sigma_aor * n * n)


def apply_poisson_noise(dataset: MeasuredDataset, n_ph, sigma_aor, rng_seed=0) -> MeasuredDataset:
    """Scale frames to photon counts, draw Poisson counts, scale back.

    Each frame gets its own substream spawned from ``rng_seed``.
    """
    if not n_ph > 0:
        raise DomainError("n_ph must be positive")
    ny, nx = dataset.frame_shape
    n_pix = photons_per_pixel(n_ph, sigma_aor, np.sqrt(ny * nx))
    frames = dataset.intensities.reshape((-1, ny, nx))
    streams = np.random.SeedSequence(rng_seed).spawn(len(frames))
    out = np.empty(frames.shape, dtype=np.float64)
    for i, (frame, ss) in enumerate(zip(frames, streams)):
        out[i] = np.random.default_rng(ss).poisson(np.asarray(frame, dtype=np.float64) * n_pix) / n_pix
    meta = dict(dataset.metadata, n_ph=float(n_ph), sigma_aor=float(sigma_aor),
                photons_per_pixel=float(n_pix), noise_seed=int(rng_seed))
    return dataset.replace(intensities=out.reshape(dataset.intensities.shape), photon_budget=float(n_ph),
                           metadata=meta)


def expected_resolution(n_ph, n_ref=3.7e9, r_ref_nm=1.0):
    """Resolution under the inverse-fourth-power dose law, anchored at ``(n_ref, r_ref_nm)``."""
    if not n_ph > 0:
        raise DomainError("n_ph must be positive")
    return r_ref_nm * (n_ref / n_ph) ** 0.25


def nyquist_fraction(n_ph, pixel_nm=1.0, n_ref=3.7e9, r_ref_nm=1.0):
    """Expected resolution expressed as a fraction of the Nyquist frequency."""
    return pixel_nm / expected_resolution(n_ph, n_ref, r_ref_nm)
