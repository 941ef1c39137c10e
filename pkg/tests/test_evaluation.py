import numpy as np
import pytest

from multislice_tomo.core import DimensionError, ObjectVolume, SupportMask
from multislice_tomo.evaluation import FscCurve, fsc, fsc_resolution, support_rmse


def test_fsc_of_identical_volumes_is_one(rng):
    a = rng.normal(size=(16, 16, 16))
    curve = fsc(a, a)
    np.testing.assert_allclose(curve.correlations, 1.0, rtol=1e-12)
    assert len(curve.correlations) == 8
    assert fsc_resolution(curve) == 1.0


def test_fsc_of_independent_noise_is_near_zero(rng):
    curve = fsc(rng.normal(size=(32,) * 3), rng.normal(size=(32,) * 3))
    # outer shells hold thousands of samples, so correlations are O(1/sqrt(count))
    assert np.all(np.abs(curve.correlations[4:]) < 5 / np.sqrt(curve.shell_counts[4:]))


def test_fsc_is_scale_invariant_and_symmetric(rng):
    a = rng.normal(size=(16,) * 3)
    b = a + 0.5 * rng.normal(size=a.shape)
    c1 = fsc(a, b)
    np.testing.assert_allclose(fsc(3 * a, b).correlations, c1.correlations, rtol=1e-12)
    np.testing.assert_allclose(fsc(b, a).correlations, c1.correlations, rtol=1e-12)


def test_fsc_shell_counts_cover_the_nyquist_ball():
    curve = fsc(np.ones((16,) * 3), np.ones((16,) * 3))
    f = np.fft.fftfreq(16) / 0.5
    r = np.sqrt(f[:, None, None] ** 2 + f[None, :, None] ** 2 + f[None, None, :] ** 2)
    assert curve.shell_counts.sum() == np.count_nonzero(r <= 1.0)


def test_fsc_rejects_noncubic():
    with pytest.raises(DimensionError):
        fsc(np.zeros((4, 4, 5)), np.zeros((4, 4, 5)))


def test_fsc_resolution_interpolates_crossing():
    curve = FscCurve(np.array([0.25, 0.5, 0.75]), np.array([0.9, 0.7, 0.3]), np.ones(3))
    assert fsc_resolution(curve, 0.5) == pytest.approx(0.625)
    assert fsc_resolution(curve, 0.95) == 0.25


def test_fsc_curve_requires_increasing_frequencies():
    with pytest.raises(ValueError):
        FscCurve(np.array([0.5, 0.25]), np.zeros(2), np.ones(2))


def test_support_rmse():
    truth = ObjectVolume(np.full((4, 4, 4), 2.0), np.zeros((4, 4, 4)))
    recon = ObjectVolume(np.full((4, 4, 4), 2.5), np.zeros((4, 4, 4)))
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[0] = True
    err, frac = support_rmse(recon, truth, SupportMask(mask))
    assert err == pytest.approx(0.5)
    assert frac == pytest.approx(0.25)
    with pytest.raises(DimensionError):
        support_rmse(recon, truth, SupportMask(np.ones((2, 2, 2), dtype=bool)))
