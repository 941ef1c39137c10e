import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from multislice_tomo.core import DimensionError, ObjectVolume
from multislice_tomo.rotation import rotate_adjoint, rotate_grid, rotate_grid_adjoint, rotate_volume


def test_zero_angle_is_bit_exact(rng):
    v = ObjectVolume(rng.random((8, 8, 8)), rng.random((8, 8, 8)), 1.0)
    out = rotate_volume(v, 0.0)
    assert np.array_equal(out.delta, v.delta) and np.array_equal(out.beta, v.beta)
    assert np.array_equal(rotate_adjoint(v, 0.0).delta, v.delta)


def test_quarter_turn_moves_unit_voxel():
    n = 9
    g = np.zeros((n, n, n))
    z, y, x = 2, 4, 6
    g[z, y, x] = 1.0
    out = rotate_grid(g, 90.0)
    assert out.max() >= 0.999
    idx = np.unravel_index(np.argmax(out), out.shape)
    # the z-x plane is permuted and y is untouched
    assert idx[1] == y
    assert {idx[0], idx[2]} <= set(range(n)) and out.sum() == pytest.approx(1.0)
    c = (n - 1) / 2
    assert (idx[0] - c) ** 2 + (idx[2] - c) ** 2 == pytest.approx((z - c) ** 2 + (x - c) ** 2)


def test_round_trip_smooth_volume(rng):
    n = 24
    c = (n - 1) / 2
    zz, yy, xx = np.ogrid[:n, :n, :n]
    # smooth after masking so nothing reaches the corners clipped by rotation
    g = ndimage.gaussian_filter(rng.random((n, n, n)) * (((zz - c) ** 2 + (xx - c) ** 2) < (n / 2 - 3) ** 2), 2)
    for theta in (17.0, 45.0, 133.0):
        back = rotate_grid(rotate_grid(g, theta), -theta)
        rmse = np.sqrt(np.mean((back - g) ** 2))
        assert rmse <= 0.01 * g.max()


@settings(max_examples=20, deadline=None)
@given(theta=st.floats(-360, 360), seed=st.integers(0, 2**16))
def test_adjoint_identity(theta, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(16, 16, 16))
    b = r.normal(size=(16, 16, 16))
    lhs = np.sum(rotate_grid(a, theta) * b)
    rhs = np.sum(a * rotate_grid_adjoint(b, theta))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10 * np.sqrt(a.size))


def test_adjoint_footprint_of_center_voxel():
    n = 9
    g = np.zeros((n, n, n))
    g[4, 4, 4] = 1.0
    theta = 30.0
    adj = rotate_grid_adjoint(g, theta)
    # scatter weights equal the forward interpolation weights used to read voxel (4,4,4)
    for idx in zip(*np.nonzero(adj)):
        e = np.zeros((n, n, n))
        e[idx] = 1.0
        assert rotate_grid(e, theta)[4, 4, 4] == pytest.approx(adj[idx], abs=1e-15)
    assert adj.sum() == pytest.approx(1.0)
    # the center voxel sits on the rotation axis, so its footprint is symmetric
    assert np.allclose(adj, adj[::-1, :, ::-1])


def test_mass_conservation_for_interior_support(rng):
    # Bilinear weights scattered from one source voxel only sum to 1 on average,
    # so smooth data can gain a few parts in 1e4; the bound allows 1e-3.
    n = 20
    g = np.zeros((n, n, n))
    g[6:14, 3:17, 6:14] = rng.random((8, 14, 8))
    g = ndimage.gaussian_filter(g, 1.5)
    for theta in (10.0, 33.0, 45.0, 71.0):
        s = rotate_grid(g, theta).sum()
        assert 0.98 * g.sum() <= s <= 1.001 * g.sum()


def test_rejects_non_cubic():
    with pytest.raises(DimensionError):
        rotate_grid(np.zeros((4, 4, 5)), 10.0)
