import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from satmpi.errors import ShapeMismatch
from satmpi.geo import GeoRef
from satmpi.mpi import Mpi, sample_altitudes
from satmpi.objective import psnr
from satmpi.render import composite, render_view
from satmpi.synth import identity_rpc, make_affine_rpc
from satmpi.warp import (BilinearSampler, GroundGrid, WarpField, coverage_mask,
                         ground_to_view, mpi_to_ground, reproject_source,
                         reprojection_field, resample_mpi, warp_src_to_tgt)

REF = GeoRef(30.3, -81.7, 15.5)
GSD = 0.5
HEIS = (0.0, 31.0)


def cam(slope=0.0, az=90.0, size=(16, 16)):
    return make_affine_rpc(REF, size, GSD, HEIS, slope, az)


def warp_of(samp, line, valid=None):
    samp, line = np.asarray(samp, float), np.asarray(line, float)
    if valid is None:
        valid = np.ones(samp.shape, bool)
    return WarpField(samp, line, valid)


def random_mpi(rng, n=3, h=6, w=7):
    return Mpi(rng.uniform(0, 1, (n, h, w, 3)), rng.uniform(0, 1, (n, h, w)),
               rng.uniform(0, 2, (n, h, w)), sample_altitudes(10, 0, n).heights)


# ground grids ------------------------------------------------------------------

def test_identity_camera_ground_grid():
    rpc = identity_rpc((4, 6), lat_off=10.0, lon_off=20.0, scale=0.01)
    g = mpi_to_ground(sample_altitudes(5, 0, 2), 4, 6, rpc)
    line, samp = np.mgrid[0:4, 0:6].astype(float)
    assert np.allclose(g.lat, 10.0 + (line - 1.5) / 2 * 0.01, atol=1e-13)
    assert np.allclose(g.lon, 20.0 + (samp - 2.5) / 3 * 0.01, atol=1e-13)
    assert g.valid.all()


def test_ground_heights_are_plane_heights():
    s = sample_altitudes(31, 0, 5)
    g = mpi_to_ground(s, 3, 4, cam(0.4, 30.0))
    for i, h in enumerate(s.heights):
        assert (g.hei[i] == h).all()


def test_ground_grid_matches_scalar_loop():
    rpc = cam(0.5, 120.0)
    s = sample_altitudes(20, 2, 2)
    g = mpi_to_ground(s, 4, 4, rpc)
    for i, h in enumerate(s.heights):
        for y in range(4):
            for x in range(4):
                lat, lon = rpc.localize(float(x), float(y), h)
                assert g.lat[i, y, x] == pytest.approx(lat, abs=1e-12)
                assert g.lon[i, y, x] == pytest.approx(lon, abs=1e-12)


def test_same_camera_round_trip():
    rpc = cam(0.7, 200.0)
    s = sample_altitudes(31, 0, 4)
    f = ground_to_view(mpi_to_ground(s, 16, 16, rpc), rpc, (16, 16))
    line, samp = np.mgrid[0:16, 0:16].astype(float)
    assert np.abs(f.samp - samp).max() <= 1e-6
    assert np.abs(f.line - line).max() <= 1e-6
    assert f.valid.all()


@pytest.mark.parametrize("slope, az", [(0.3, 90.0), (0.6, 270.0), (0.45, 0.0), (0.8, 135.0)])
def test_affine_stereo_disparity(slope, az):
    # a point raised by dh moves slope*dh meters against the lean: in pixels,
    # d(samp) = -slope*sin(az)*dh/gsd and d(line) = +slope*cos(az)*dh/gsd relative to nadir
    src, tgt = cam(), cam(slope, az)
    s = sample_altitudes(31, 0, 8)
    f = ground_to_view(mpi_to_ground(s, 16, 16, tgt), src, (16, 16))
    line, samp = np.mgrid[0:16, 0:16].astype(float)
    dh = (s.heights - sum(HEIS) / 2)[:, None, None]
    a = np.deg2rad(az)
    assert np.abs(f.samp - (samp + slope * np.sin(a) * dh / GSD)).max() <= 1e-6
    assert np.abs(f.line - (line - slope * np.cos(a) * dh / GSD)).max() <= 1e-6


def test_out_of_bounds_grid_is_masked():
    rpc = cam()
    far = GroundGrid(np.full((2, 3, 3), REF.lat + 1.0), np.full((2, 3, 3), REF.lon),
                     np.zeros((2, 3, 3)), np.ones((2, 3, 3), bool))
    assert not ground_to_view(far, rpc, (16, 16)).valid.any()


def test_failed_localization_is_masked():
    g = GroundGrid(np.full((1, 2, 2), np.nan), np.full((1, 2, 2), REF.lon),
                   np.zeros((1, 2, 2)), np.zeros((1, 2, 2), bool))
    f = ground_to_view(g, cam(), (16, 16))
    assert not f.valid.any()


# resampling --------------------------------------------------------------------

def test_identity_resample(rng):
    m = random_mpi(rng)
    line, samp = np.mgrid[0:6, 0:7].astype(float)
    w = warp_of(np.broadcast_to(samp, m.shape), np.broadcast_to(line, m.shape))
    r = resample_mpi(m, w)
    assert np.array_equal(r.rgb, m.rgb) and np.array_equal(r.sigma, m.sigma)


def test_integer_shift(rng):
    m = random_mpi(rng)
    line, samp = np.mgrid[0:6, 0:7].astype(float)
    w = warp_of(np.broadcast_to(samp + 2, m.shape), np.broadcast_to(line - 1, m.shape))
    r = resample_mpi(m, w)
    assert np.array_equal(r.pan[:, 1:, :5], m.pan[:, :-1, 2:])
    assert not r.pan[:, 0].any() and not r.pan[:, :, 5:].any()


def test_half_pixel_ramp():
    ramp = np.tile(np.arange(8.0) / 8, (1, 4, 1))
    m = Mpi(np.repeat(ramp[..., None], 3, -1), ramp, ramp, [0.0])
    line, samp = np.mgrid[0:4, 0:7].astype(float)
    r = resample_mpi(m, warp_of((samp + 0.5)[None], line[None]))
    assert np.array_equal(r.pan[0], np.tile((np.arange(7) + 0.5) / 8, (4, 1)))


def test_invalid_cells_read_zero(rng):
    m = random_mpi(rng)
    line, samp = np.mgrid[0:6, 0:7].astype(float)
    valid = rng.uniform(size=m.shape) < 0.5
    r = resample_mpi(m, warp_of(np.broadcast_to(samp, m.shape), np.broadcast_to(line, m.shape),
                                valid))
    assert not r.sigma[~valid].any() and not r.rgb[~valid].any()
    assert np.array_equal(r.sigma[valid], m.sigma[valid])


def test_plane_count_mismatch(rng):
    m = random_mpi(rng)
    with pytest.raises(ShapeMismatch):
        resample_mpi(m, warp_of(np.zeros((2, 6, 7)), np.zeros((2, 6, 7))))


coords = arrays(float, (2, 5, 5), elements=st.floats(-2, 8))


@given(coords, coords, st.floats(-2, 2), st.floats(-2, 2))
def test_resample_linear(samp, line, a, b):
    rng = np.random.default_rng(5)
    v1, v2 = rng.uniform(size=(2, 2, 6, 6))
    s = BilinearSampler(samp, line, np.ones(samp.shape, bool), (6, 6))
    assert np.allclose(s.apply(a * v1 + b * v2), a * s.apply(v1) + b * s.apply(v2),
                       atol=1e-12)


@given(coords, coords)
def test_sampler_adjoint(samp, line):
    rng = np.random.default_rng(6)
    v = rng.standard_normal((2, 6, 6, 3))
    g = rng.standard_normal((2, 5, 5, 3))
    s = BilinearSampler(samp, line, np.ones(samp.shape, bool), (6, 6))
    assert np.vdot(s.apply(v), g) == pytest.approx(np.vdot(v, s.adjoint(g)), rel=1e-10, abs=1e-10)


# full warp ---------------------------------------------------------------------

def test_identity_warp_matches_direct_render(rng):
    rpc = cam(0.4, 60.0, (12, 12))
    m = random_mpi(rng, 4, 12, 12)
    m = Mpi(m.rgb, m.pan, m.sigma, sample_altitudes(31, 0, 4).heights)
    warped, r = warp_src_to_tgt(m, rpc, rpc, REF)
    direct = render_view(m, rpc, REF)
    assert psnr(r.rgb, direct.rgb) > 40
    # every cell reads an integer source position here, so the warp is exact
    assert np.array_equal(warped.sigma, m.sigma)
    assert np.array_equal(r.rgb, direct.rgb)


def test_zero_density_stays_transparent():
    m = Mpi.constant(sample_altitudes(31, 0, 4), 16, 16, rgb=0.6, sigma=0.0)
    warped, r = warp_src_to_tgt(m, cam(), cam(0.5, 90.0), REF)
    assert not warped.sigma.any() and not r.rgb.any()


def test_true_surface_warps_onto_target_view(scenes):
    sc = scenes["flat"]
    h_far, h_near = sc.manifest.altitude_bounds
    s = sample_altitudes(h_near, h_far, 32)
    k = int(np.argmin(np.abs(s.heights - 12.0)))
    n, (h, w) = 32, sc.size
    sigma = np.zeros((n, h, w))
    sigma[k] = 50.0
    rgb = np.broadcast_to(sc.rgb_hr, (n, h, w, 3))
    m = Mpi(rgb, np.broadcast_to(sc.pan, (n, h, w)), sigma, s.heights)
    for truth, rpc in sc.targets:
        grid = mpi_to_ground(s, h, w, rpc)
        mask = coverage_mask(ground_to_view(grid, sc.rpc, (h, w)))
        _, r = warp_src_to_tgt(m, sc.rpc, rpc, sc.geo_ref)
        assert psnr(r.rgb, truth, mask=mask) > 30


# source reprojection -------------------------------------------------------------

def _render_at(rpc, rng, size=(12, 12)):
    m = random_mpi(rng, 4, *size)
    m = Mpi(m.rgb, m.pan, m.sigma, sample_altitudes(31, 0, 4).heights)
    return m, render_view(m, rpc, REF)


def test_nadir_reprojection_is_identity(rng):
    m, r = _render_at(cam(size=(12, 12)), rng)
    img, mask = reproject_source(r, m, cam(size=(12, 12)), REF)
    assert mask.all()
    assert np.array_equal(img, r.rgb)


@pytest.mark.parametrize("h0", [0.0, 7.0, 28.5])
def test_flat_altitude_gives_constant_shift(h0):
    slope, az = 0.5, 90.0
    rpc = cam(slope, az)
    f = reprojection_field(np.full((16, 16), h0), rpc, REF)
    line, samp = np.mgrid[0:16, 0:16].astype(float)
    shift = -slope * np.sin(np.deg2rad(az)) * (h0 - REF.hei) / GSD
    assert np.abs(f.samp[0] - (samp + shift)).max() <= 1e-6
    assert np.abs(f.line[0] - line).max() <= 1e-6
    assert np.array_equal(f.valid[0], (samp + shift >= 0) & (samp + shift < 16))


def test_constant_image_stays_constant(rng):
    rpc = cam(0.6, 30.0, (12, 12))
    m, r = _render_at(rpc, rng)
    flat_rgb = np.full_like(r.rgb, 0.37)
    const = type(r)(flat_rgb, r.pan, r.altitude, r.transmittance, r.weights)
    img, mask = reproject_source(const, m, rpc, REF)
    inner = mask.copy()
    inner[[0, -1], :] = False
    inner[:, [0, -1]] = False
    inner &= reprojection_field(r.altitude, rpc, REF).samp[0] < 11
    inner &= reprojection_field(r.altitude, rpc, REF).line[0] < 11
    assert np.allclose(img[inner], 0.37, atol=1e-12)
    assert not img[~mask].any()


def test_reproject_shape_check(rng):
    m, r = _render_at(cam(size=(12, 12)), rng)
    small = Mpi(m.rgb[:, :6], m.pan[:, :6], m.sigma[:, :6], m.heights)
    with pytest.raises(ShapeMismatch):
        reproject_source(r, small, cam(size=(12, 12)), REF)
