"""Multiplane images, altitude sampling and height embeddings."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRange, InvariantViolation, ParseError, ShapeMismatch

DEFAULT_PLANES = 32
DEFAULT_LEVELS = 10

# convex combinations of in-range colors may leave [0, 1] by a rounding error
COLOR_SLACK = 1e-12

MAGIC = b"MPI1"
_HEADER = struct.Struct("<4sIIIdd")


@dataclass(frozen=True)
class AltitudeSampling:
    h_near: float
    h_far: float
    n_planes: int

    def __post_init__(self):
        if not (self.h_near > self.h_far):
            raise InvalidRange(f"h_near ({self.h_near}) must exceed h_far ({self.h_far})")
        if self.n_planes < 2:
            raise InvalidRange(f"need at least 2 planes, got {self.n_planes}")

    @property
    def heights(self):
        i = np.arange(self.n_planes)
        return self.h_near - i * (self.h_near - self.h_far) / (self.n_planes - 1)

    @property
    def spacing(self):
        return (self.h_near - self.h_far) / (self.n_planes - 1)

    def relative_index(self):
        """Plane index scaled to [0, 1], the input of the height embedding."""
        return np.arange(self.n_planes) / (self.n_planes - 1)


def sample_altitudes(h_near, h_far, n_planes=DEFAULT_PLANES) -> AltitudeSampling:
    """Uniform altitude planes, highest first."""
    return AltitudeSampling(float(h_near), float(h_far), int(n_planes))


def posenc(h, levels=DEFAULT_LEVELS):
    """Frequency encoding ``[sin(2^l pi h), cos(2^l pi h)]`` for l < levels.

    ``h`` may be a scalar or array; the encoding is appended as a trailing
    axis of length ``2 * levels``.
    """
    if levels < 1:
        raise InvalidRange("levels must be >= 1")
    h = np.asarray(h, dtype=float)
    phase = np.pi * h[..., None] * 2.0 ** np.arange(levels)
    out = np.empty(h.shape + (2 * levels,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass(frozen=True, eq=False)
class Mpi:
    """Planes of (rgb, pan, sigma) over an H x W raster.

    rgb is (N, H, W, 3), pan and sigma are (N, H, W), heights is (N,) in
    meters, ordered from the camera side (highest) down.
    """

    rgb: np.ndarray
    pan: np.ndarray
    sigma: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=float)
        pan = np.asarray(self.pan, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        heights = np.atleast_1d(np.asarray(self.heights, dtype=float))
        if rgb.ndim != 4 or rgb.shape[-1] != 3:
            raise ShapeMismatch(f"rgb must be (N, H, W, 3), got {rgb.shape}")
        n, h, w, _ = rgb.shape
        if pan.shape != (n, h, w) or sigma.shape != (n, h, w):
            raise ShapeMismatch(
                f"pan {pan.shape} / sigma {sigma.shape} do not match rgb {rgb.shape}")
        if heights.shape != (n,):
            raise ShapeMismatch(f"heights {heights.shape} do not match {n} planes")
        if not np.isfinite(sigma).all() or (sigma < 0).any():
            raise InvariantViolation("sigma must be finite and non-negative")
        if not (np.isfinite(rgb).all() and np.isfinite(pan).all()):
            raise InvariantViolation("colors must be finite")
        lo, hi = -COLOR_SLACK, 1 + COLOR_SLACK
        if rgb.min(initial=0) < lo or rgb.max(initial=0) > hi or pan.min(initial=0) < lo \
                or pan.max(initial=0) > hi:
            raise InvariantViolation("rgb and pan must lie in [0, 1]")
        if n > 1 and not (np.diff(heights) < 0).all():
            raise InvariantViolation("plane heights must be strictly decreasing")
        for name, val in (("rgb", rgb), ("pan", pan), ("sigma", sigma), ("heights", heights)):
            object.__setattr__(self, name, val)

    @property
    def shape(self):
        return self.sigma.shape

    @classmethod
    def constant(cls, sampling: AltitudeSampling, height, width, rgb=0.5, pan=0.5, sigma=0.0):
        n = sampling.n_planes
        return cls(np.full((n, height, width, 3), rgb, dtype=float),
                   np.full((n, height, width), pan, dtype=float),
                   np.full((n, height, width), sigma, dtype=float),
                   sampling.heights)


def mpi_to_bytes(mpi: Mpi) -> bytes:
    n, h, w = mpi.shape
    header = _HEADER.pack(MAGIC, n, h, w, float(mpi.heights[0]), float(mpi.heights[-1]))
    body = np.concatenate(
        [mpi.rgb.reshape(n, -1), mpi.pan.reshape(n, -1), mpi.sigma.reshape(n, -1)], axis=1)
    return header + body.astype("<f4").tobytes()


def mpi_from_bytes(data: bytes) -> Mpi:
    if len(data) < _HEADER.size:
        raise ParseError(None, "truncated MPI header")
    magic, n, h, w, h_near, h_far = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(None, f"bad magic {magic!r}")
    expected = _HEADER.size + n * h * w * 5 * 4
    if len(data) != expected:
        raise ParseError(None, f"expected {expected} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(float).reshape(n, -1)
    k = h * w
    rgb = body[:, :3 * k].reshape(n, h, w, 3)
    pan = body[:, 3 * k:4 * k].reshape(n, h, w)
    sigma = body[:, 4 * k:].reshape(n, h, w)
    if n == 1:
        heights = np.array([h_near])
    else:
        heights = sample_altitudes(h_near, h_far, n).heights
    return Mpi(rgb, pan, sigma, heights)


def save_mpi(mpi: Mpi, path):
    with open(path, "wb") as f:
        f.write(mpi_to_bytes(mpi))


def load_mpi(path) -> Mpi:
    with open(path, "rb") as f:
        return mpi_from_bytes(f.read())
