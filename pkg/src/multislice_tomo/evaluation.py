"""Fourier shell correlation and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, ObjectVolume, SupportMask


@dataclass(frozen=True)
class FscCurve:
    """Correlation per radial shell; ``shell_freqs`` are shell centers as a fraction of Nyquist."""

    shell_freqs: np.ndarray
    correlations: np.ndarray
    shell_counts: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.shell_freqs) <= 0):
            raise ValueError("shell frequencies must be strictly increasing")

    def mean(self) -> float:
        return float(np.mean(self.correlations))


def _radial_frequency(shape):
    """Radial frequency of every FFT sample, normalized so Nyquist is 1."""
    axes = [np.fft.fftfreq(n) / 0.5 for n in shape]
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    return np.sqrt(sum(g**2 for g in grids))


def fsc(vol_a, vol_b, n_shells=None) -> FscCurve:
    """Fourier shell correlation of two equally shaped cubic real grids.

    Shells have equal width in radial frequency up to Nyquist; the first shell
    includes the zero frequency and frequencies past Nyquist are ignored.
    """
    a = np.asarray(vol_a, dtype=np.float64)
    b = np.asarray(vol_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or len(set(a.shape)) != 1:
        raise DimensionError(f"fsc needs equal cubic grids, got {a.shape} and {b.shape}")
    n_shells = n_shells or a.shape[0] // 2
    fa = np.fft.fftn(a)
    fb = np.fft.fftn(b)
    r = _radial_frequency(a.shape)
    shell = np.ceil(r * n_shells).astype(np.int64) - 1
    shell[r == 0] = 0
    keep = (shell >= 0) & (shell < n_shells)
    idx = shell[keep]
    cross = np.bincount(idx, (fa * np.conj(fb)).real[keep], minlength=n_shells)
    pa = np.bincount(idx, (np.abs(fa) ** 2)[keep], minlength=n_shells)
    pb = np.bincount(idx, (np.abs(fb) ** 2)[keep], minlength=n_shells)
    counts = np.bincount(idx, minlength=n_shells)
    denom = np.sqrt(pa * pb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cross / denom, 0.0)
    freqs = (np.arange(n_shells) + 0.5) / n_shells
    return FscCurve(freqs, corr, counts)


def fsc_resolution(curve: FscCurve, threshold=0.5) -> float:
    """Frequency where the piecewise-linear curve first drops below ``threshold``.

    Returns 1.0 if it never does and the first shell frequency if it starts below.
    """
    c = curve.correlations
    f = curve.shell_freqs
    below = np.nonzero(c < threshold)[0]
    if below.size == 0:
        return 1.0
    i = below[0]
    if i == 0:
        return float(f[0])
    frac = (c[i - 1] - threshold) / (c[i - 1] - c[i])
    return float(f[i - 1] + frac * (f[i] - f[i - 1]))


def support_rmse(recon: ObjectVolume, truth: ObjectVolume, mask: SupportMask):
    """RMSE of ``delta`` over the mask, as ``(absolute, fraction of max true delta)``."""
    if recon.shape != truth.shape or mask.shape != truth.shape:
        raise DimensionError("recon, truth and mask must share a shape")
    m = mask.mask
    if not m.any():
        raise ValueError("mask is empty")
    err = float(np.sqrt(np.mean((recon.delta[m] - truth.delta[m]) ** 2)))
    peak = float(truth.delta.max())
    return err, (err / peak if peak > 0 else np.inf)
