"""Cross-view MPI warping through geodetic object space.

Warps are built by backward sampling: every cell of the output grid is
localized with its own camera, projected into the camera whose raster holds
the values, and read there by bilinear interpolation with zero padding.
Sample coordinates are treated as constants; only sampled values carry
gradients (see ``BilinearSampler.adjoint``).
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ShapeMismatch
from .geo import GeoRef
from .mpi import Mpi
from .render import RenderOutput, composite, pixel_grid, plane_spacing
from .rpc import RpcModel

# sample positions this close to a pixel center are read without interpolation;
# same-camera round trips through degrees land within ~1e-9 px of the center
SNAP_TOL = 1e-6


def _snap(x):
    r = np.rint(x)
    with np.errstate(invalid="ignore"):
        return np.where(np.abs(x - r) < SNAP_TOL, r, x)


@dataclass(frozen=True, eq=False)
class GroundGrid:
    lat: np.ndarray
    lon: np.ndarray
    hei: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class WarpField:
    """Where each output cell reads from: pixel coordinates in the value raster."""

    samp: np.ndarray
    line: np.ndarray
    valid: np.ndarray


def _heights(geometry):
    return np.atleast_1d(np.asarray(getattr(geometry, "heights", geometry), dtype=float))


def mpi_to_ground(geometry, height, width, rpc: RpcModel) -> GroundGrid:
    """Localize every (plane, pixel) cell of an MPI raster.

    ``geometry`` is an ``AltitudeSampling`` or an array of plane heights.
    Cells where localization fails are flagged invalid instead of raising.
    """
    heights = _heights(geometry)
    samp, line = pixel_grid(height, width)
    hei = np.broadcast_to(heights[:, None, None], (len(heights), height, width)).copy()
    lat, lon = rpc.localize(samp[None], line[None], hei, strict=False)
    valid = np.isfinite(lat) & np.isfinite(lon)
    return GroundGrid(lat, lon, hei, valid)


def ground_to_view(grid: GroundGrid, rpc: RpcModel, target_size) -> WarpField:
    """Project a ground grid into a view of size ``(H, W)``."""
    h, w = target_size
    lat = np.where(grid.valid, grid.lat, rpc.lat_off)
    lon = np.where(grid.valid, grid.lon, rpc.lon_off)
    samp, line = rpc.project(lat, lon, grid.hei, strict=False)
    samp, line = _snap(samp), _snap(line)
    with np.errstate(invalid="ignore"):
        valid = (grid.valid & np.isfinite(samp) & np.isfinite(line)
                 & (samp >= 0) & (samp < w) & (line >= 0) & (line < h))
    return WarpField(samp, line, valid)


class BilinearSampler:
    """Bilinear reads from a stack of (N, H, W, ...) rasters at fixed positions.

    Out-of-raster corners contribute zero; invalid cells read zero.
    ``adjoint`` is the exact transpose of ``apply``.
    """

    def __init__(self, samp, line, valid, src_size):
        samp = np.asarray(samp, dtype=float)
        line = np.asarray(line, dtype=float)
        valid = np.asarray(valid, dtype=bool)
        if samp.ndim == 2:
            samp, line, valid = samp[None], line[None], valid[None]
        self.out_shape = samp.shape
        self.src_size = tuple(src_size)
        h, w = self.src_size
        n = samp.shape[0]
        x = _snap(np.where(valid, samp, 0.0))
        y = _snap(np.where(valid, line, 0.0))
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        plane = np.arange(n).reshape(n, *([1] * (samp.ndim - 1)))
        idx, wts = [], []
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                xi, yi = x0 + dx, y0 + dy
                inside = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                wt = np.where(inside, wy * wx, 0.0)
                flat = (plane * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
                idx.append(flat.ravel())
                wts.append(wt.ravel())
        n_out = int(np.prod(self.out_shape))
        rows = np.tile(np.arange(n_out), 4)
        # duplicate (row, col) pairs are summed in a fixed order
        self.matrix = sparse.csr_matrix((np.concatenate(wts), (rows, np.concatenate(idx))),
                                        shape=(n_out, n * h * w))
        self.matrix_t = self.matrix.T.tocsr()
        self.valid = valid
        self.n = n

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[:3] != (self.n,) + self.src_size:
            raise ShapeMismatch(
                f"values {values.shape} do not match sampler source {(self.n,) + self.src_size}")
        extra = values.shape[3:]
        out = self.matrix @ values.reshape(self.matrix.shape[1], -1)
        return out.reshape(self.out_shape + extra)

    def adjoint(self, grad):
        grad = np.asarray(grad, dtype=float)
        extra = grad.shape[len(self.out_shape):]
        out = self.matrix_t @ grad.reshape(self.matrix.shape[0], -1)
        return out.reshape((self.n,) + self.src_size + extra)


def sampler_for(warp: WarpField, src_size) -> BilinearSampler:
    return BilinearSampler(warp.samp, warp.line, warp.valid, src_size)


def resample_mpi(src: Mpi, warp: WarpField) -> Mpi:
    """Bilinearly read every plane of ``src`` at the warp coordinates."""
    n, h, w = src.shape
    if warp.samp.shape[0] != n:
        raise ShapeMismatch(f"warp has {warp.samp.shape[0]} planes, MPI has {n}")
    s = sampler_for(warp, (h, w))
    return Mpi(s.apply(src.rgb), s.apply(src.pan), s.apply(src.sigma), src.heights)


def target_warp_field(heights, rpc_src: RpcModel, src_size, rpc_tgt: RpcModel,
                      tgt_size) -> WarpField:
    """For every target cell, its reading position in the source raster."""
    grid = mpi_to_ground(heights, tgt_size[0], tgt_size[1], rpc_tgt)
    return ground_to_view(grid, rpc_src, src_size)


def warp_src_to_tgt(mpi: Mpi, rpc_src: RpcModel, rpc_tgt: RpcModel, geo_ref: GeoRef,
                    target_size=None):
    """Warp a source MPI into the target view and render it there.

    Returns ``(warped_mpi, render)``.
    """
    n, h, w = mpi.shape
    target_size = tuple(target_size or (h, w))
    warp = target_warp_field(mpi.heights, rpc_src, (h, w), rpc_tgt, target_size)
    warped = resample_mpi(mpi, warp)
    spacing = plane_spacing(rpc_tgt, mpi.heights, target_size[0], target_size[1], geo_ref)
    return warped, composite(warped, spacing)


def coverage_mask(warp: WarpField):
    """Target pixels whose every plane reads inside the source raster."""
    return warp.valid.all(axis=0)


def reprojection_field(altitude, rpc_src: RpcModel, geo_ref: GeoRef, ref_height=None):
    """Positions in the source image of the surface ``altitude`` seen per pixel.

    Pixel (x, y) is anchored on the ground by localizing it at the reference
    height (``geo_ref.hei`` unless given); the anchored column at altitude
    ``altitude[y, x]`` is then projected back into the source view.
    """
    altitude = np.asarray(altitude, dtype=float)
    h, w = altitude.shape
    href = geo_ref.hei if ref_height is None else float(ref_height)
    samp, line = pixel_grid(h, w)
    lat, lon = rpc_src.localize(samp, line, np.full_like(samp, href), strict=False)
    ok = np.isfinite(lat) & np.isfinite(lon) & np.isfinite(altitude)
    grid = GroundGrid(lat[None], lon[None], np.where(ok, altitude, href)[None], ok[None])
    return ground_to_view(grid, rpc_src, (h, w))


def reproject_source(render: RenderOutput, mpi: Mpi, rpc_src: RpcModel, geo_ref: GeoRef,
                     ref_height=None):
    """Source-view reprojection of the rendered image through its altitude map.

    Returns ``(image, mask)``: the rendered RGB read at the reprojected
    positions, and the pixels whose reprojection stayed inside the image.
    Masked pixels are zero.
    """
    h, w = render.altitude.shape
    if mpi.shape[1:] != (h, w):
        raise ShapeMismatch(f"render {(h, w)} does not match MPI {mpi.shape[1:]}")
    field = reprojection_field(render.altitude, rpc_src, geo_ref, ref_height)
    s = sampler_for(field, (h, w))
    image = s.apply(render.rgb[None])[0]
    return image, field.valid[0]


def observed_mask(altitude, rpc_src: RpcModel, views, heights):
    """Source pixels whose surface point at ``altitude`` lands on a fully covered
    pixel of at least one ``(rpc, (H, W))`` target view."""
    altitude = np.asarray(altitude, dtype=float)
    h, w = altitude.shape
    samp, line = pixel_grid(h, w)
    ok = np.isfinite(altitude)
    lat, lon = rpc_src.localize(samp, line, np.where(ok, altitude, 0.0), strict=False)
    grid = GroundGrid(lat[None], lon[None], np.where(ok, altitude, 0.0)[None],
                      (ok & np.isfinite(lat) & np.isfinite(lon))[None])
    seen = np.zeros((h, w), dtype=bool)
    for rpc, size in views:
        cover = coverage_mask(target_warp_field(heights, rpc_src, (h, w), rpc, size))
        f = ground_to_view(grid, rpc, size)
        v = f.valid[0]
        r = np.clip(np.rint(f.line[0]), 0, size[0] - 1).astype(int)
        c = np.clip(np.rint(f.samp[0]), 0, size[1] - 1).astype(int)
        seen |= v & cover[r, c]
    return seen
