"""Planar volume rendering of an MPI along RPC pixel rays."""

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation, ShapeMismatch
from .geo import GeoRef, to_enu
from .mpi import AltitudeSampling, Mpi
from .rpc import RpcModel


@dataclass(frozen=True, eq=False)
class PlaneSpacing:
    """Metric distance (N, H, W) from each plane to the next along the pixel ray."""

    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float)
        if d.ndim != 3:
            raise ShapeMismatch(f"delta must be (N, H, W), got {d.shape}")
        if not (np.isfinite(d).all() and (d > 0).all()):
            raise InvariantViolation("plane spacing must be finite and positive")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    rgb: np.ndarray           # (H, W, 3)
    pan: np.ndarray           # (H, W)
    altitude: np.ndarray      # (H, W) meters
    transmittance: np.ndarray  # (N, H, W)
    weights: np.ndarray       # (N, H, W)


def pixel_grid(height, width):
    """Integer pixel centers: (samp, line) arrays of shape (H, W)."""
    line, samp = np.mgrid[0:height, 0:width].astype(float)
    return samp, line


def _heights(sampling):
    if isinstance(sampling, AltitudeSampling):
        return sampling.heights
    return np.asarray(sampling, dtype=float)


def ray_points(rpc: RpcModel, heights, height, width, geo_ref: GeoRef):
    """Local-tangent-plane coordinates (N, H, W, 3) of every pixel at every height."""
    heights = _heights(heights)
    samp, line = pixel_grid(height, width)
    hh = np.broadcast_to(heights[:, None, None], (len(heights), height, width))
    lat, lon = rpc.localize(samp[None], line[None], hh)
    return np.stack(to_enu(lat, lon, hh, geo_ref), axis=-1)


def plane_spacing(rpc: RpcModel, sampling, height, width, geo_ref: GeoRef) -> PlaneSpacing:
    pts = ray_points(rpc, sampling, height, width, geo_ref)
    if pts.shape[0] < 2:
        raise ShapeMismatch("plane spacing needs at least two planes")
    gaps = np.linalg.norm(pts[1:] - pts[:-1], axis=-1)
    return PlaneSpacing(np.concatenate([gaps, gaps[-1:]], axis=0))


def composite_arrays(rgb, pan, sigma, heights, delta):
    """Array-level compositing; returns (rgb, pan, altitude, transmittance, weights)."""
    tau = sigma * delta
    depth = np.zeros_like(tau)
    np.cumsum(tau[:-1], axis=0, out=depth[1:])
    trans = np.exp(-depth)
    weights = trans * -np.expm1(-tau)
    out_rgb = (weights[..., None] * rgb).sum(axis=0)
    out_pan = (weights * pan).sum(axis=0)
    altitude = (weights * np.asarray(heights)[:, None, None]).sum(axis=0)
    return out_rgb, out_pan, altitude, trans, weights


def composite(mpi: Mpi, spacing: PlaneSpacing) -> RenderOutput:
    delta = spacing.delta if isinstance(spacing, PlaneSpacing) else np.asarray(spacing)
    if delta.shape != mpi.shape:
        raise ShapeMismatch(f"spacing {delta.shape} does not match MPI {mpi.shape}")
    return RenderOutput(*composite_arrays(mpi.rgb, mpi.pan, mpi.sigma, mpi.heights, delta))


def render_view(mpi: Mpi, rpc: RpcModel, geo_ref: GeoRef) -> RenderOutput:
    n, h, w = mpi.shape
    return composite(mpi, plane_spacing(rpc, mpi.heights, h, w, geo_ref))
