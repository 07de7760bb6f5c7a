"""Synthetic cameras, surfaces and a ray-casting oracle.

The oracle renders a surface by marching each pixel's RPC ray and
bisecting on height.  It only uses the camera model, never the MPI
renderer or warper, so comparisons between the two stay meaningful.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidRange, SingularView
from .geo import GeoRef, from_enu, meters_per_degree, to_enu
from .io import (GridSpec, Raster, SceneManifest, ViewEntry, ensure_dir, write_dsm,
                 write_pfm)
from .rpc import RpcModel, write_rpc

BISECT_TOL = 1e-9  # meters; well inside the 1e-4 m contract
LUMA = np.array([0.299, 0.587, 0.114])


# cameras ---------------------------------------------------------------------

def affine_rpc(a1, a2, b1, b2, *, lat_off, lat_scale, lon_off, lon_scale, hei_off,
               hei_scale, samp_off, samp_scale, line_off, line_scale) -> RpcModel:
    """Degree-1 RPC ``samp_n = a1*lon_n + a2*hei_n``, ``line_n = b1*lat_n + b2*hei_n``.

    Localization tensors hold the exact inverse.
    """
    if a1 == 0 or b1 == 0:
        raise SingularView("a1 and b1 must be non-zero")
    z = lambda: np.zeros((4, 4, 4))
    one = z()
    one[0, 0, 0] = 1.0
    ns, nl, clat, clon = z(), z(), z(), z()
    ns[0, 0, 1], ns[1, 0, 0] = a1, a2
    nl[0, 1, 0], nl[1, 0, 0] = b1, b2
    # inverse tensors are indexed (hei, samp, line)
    clat[0, 0, 1], clat[1, 0, 0] = 1.0 / b1, -b2 / b1
    clon[0, 1, 0], clon[1, 0, 0] = 1.0 / a1, -a2 / a1
    return RpcModel(ns, one, nl, one.copy(), lat_off, lat_scale, lon_off, lon_scale,
                    hei_off, hei_scale, samp_off, samp_scale, line_off, line_scale,
                    clat, one.copy(), clon, one.copy())


def identity_rpc(size=(8, 8), lat_off=0.0, lon_off=0.0, scale=1.0):
    """``lat_n = line_n`` and ``lon_n = samp_n``, height-independent."""
    h, w = size
    return affine_rpc(1.0, 0.0, 1.0, 0.0, lat_off=lat_off, lat_scale=scale, lon_off=lon_off,
                      lon_scale=scale, hei_off=0.0, hei_scale=1.0,
                      samp_off=(w - 1) / 2, samp_scale=w / 2, line_off=(h - 1) / 2,
                      line_scale=h / 2)


@dataclass(frozen=True)
class ViewSpec:
    """A pushbroom-like affine view: ``slope`` horizontal meters of ray travel
    per vertical meter, leaning toward ``azimuth`` degrees clockwise from north."""

    name: str
    slope: float = 0.0
    azimuth: float = 90.0


def make_affine_rpc(geo_ref: GeoRef, size, gsd, hei_range, slope=0.0, azimuth=90.0):
    """Affine RPC for an image of ``size`` pixels centered on ``geo_ref``.

    Ground east maps to +samp and north to -line at ``gsd`` meters per
    pixel.  Raising a point by ``dh`` meters shifts its image as if it had
    moved ``slope*dh`` meters horizontally against the lean direction.
    """
    h, w = size
    lo, hi = hei_range
    if not hi > lo:
        raise InvalidRange("hei_range must be (low, high) with low < high")
    m_lat, m_lon = meters_per_degree(geo_ref.lat)
    samp_scale, line_scale = w / 2, h / 2
    lon_scale = samp_scale * gsd / m_lon
    lat_scale = line_scale * gsd / m_lat
    hei_off = (lo + hi) / 2
    hei_scale = max((hi - lo) / 2, 1.0)
    az = np.deg2rad(azimuth)
    a1 = lon_scale * m_lon / (gsd * samp_scale)
    a2 = -slope * np.sin(az) * hei_scale / (gsd * samp_scale)
    b1 = -lat_scale * m_lat / (gsd * line_scale)
    b2 = slope * np.cos(az) * hei_scale / (gsd * line_scale)
    return affine_rpc(a1, a2, b1, b2, lat_off=geo_ref.lat, lat_scale=lat_scale,
                      lon_off=geo_ref.lon, lon_scale=lon_scale, hei_off=hei_off,
                      hei_scale=hei_scale, samp_off=(w - 1) / 2, samp_scale=samp_scale,
                      line_off=(h - 1) / 2, line_scale=line_scale)


def perturbed_rpc(rpc: RpcModel, amplitude=1e-3, seed=0) -> RpcModel:
    """Add small random terms up to degree 3 and drop the inverse tensors."""
    rng = np.random.default_rng(seed)
    deg = np.indices((4, 4, 4)).sum(axis=0)
    fields = {}
    for name in RpcModel.FORWARD:
        t = np.array(getattr(rpc, name))
        noise = rng.uniform(-amplitude, amplitude, t.shape) * ((deg >= 1) & (deg <= 3))
        fields[name] = t + (noise if "_num_" in name else 0.1 * noise)
    kw = {n: getattr(rpc, n) for n in RpcModel.SCALARS}
    return RpcModel(**fields, **kw)


def rescale_rpc(rpc: RpcModel, factor: int) -> RpcModel:
    """Camera of the same view downsampled by an integer box ``factor``.

    Low-resolution pixel u covers full-resolution pixels [f*u, f*u + f - 1].
    """
    c = (factor - 1) / 2
    kw = {n: getattr(rpc, n) for n in RpcModel.SCALARS}
    kw.update(samp_off=(rpc.samp_off - c) / factor, samp_scale=rpc.samp_scale / factor,
              line_off=(rpc.line_off - c) / factor, line_scale=rpc.line_scale / factor)
    fields = {n: getattr(rpc, n) for n in RpcModel.FORWARD + RpcModel.INVERSE}
    return RpcModel(**fields, **kw)


# surfaces --------------------------------------------------------------------

def procedural_texture(east, north):
    """Smooth, non-periodic-looking RGB pattern in [0.1, 0.9] (meters in)."""
    e, n = np.asarray(east, dtype=float), np.asarray(north, dtype=float)
    r = 0.5 + 0.22 * np.sin(2 * np.pi * (e / 7.3 + n / 23.0)) + 0.14 * np.sin(2 * np.pi * n / 5.9 + 1.0)
    g = 0.5 + 0.2 * np.cos(2 * np.pi * (e / 9.1 - n / 6.7)) + 0.15 * np.sin(2 * np.pi * e / 4.3 + 0.5)
    b = 0.5 + 0.18 * np.sin(2 * np.pi * (e + n) / 11.0 + 2.0) + 0.17 * np.cos(2 * np.pi * e / 6.1)
    return np.clip(np.stack([r, g, b], axis=-1), 0.1, 0.9)


@dataclass(frozen=True)
class SyntheticSurface:
    """Height field over the local tangent plane around ``geo_ref``.

    kind: "flat" (h0), "ramp" (h0 + gx*east + gy*north) or "gaussian_hill"
    (h0 + amplitude * exp(-|p - center|^2 / (2 width^2))).
    """

    kind: str
    geo_ref: GeoRef
    h0: float = 0.0
    gradient: tuple = (0.0, 0.0)
    center: tuple = (0.0, 0.0)
    amplitude: float = 0.0
    width: float = 1.0
    hei_bounds: tuple = (-50.0, 50.0)

    def __post_init__(self):
        if self.kind not in ("flat", "ramp", "gaussian_hill"):
            raise InvalidRange(f"unknown surface kind {self.kind!r}")
        if not self.hei_bounds[0] < self.hei_bounds[1]:
            raise InvalidRange("hei_bounds must be (low, high)")

    def height_enu(self, east, north):
        east, north = np.asarray(east, dtype=float), np.asarray(north, dtype=float)
        if self.kind == "flat":
            return np.full(np.broadcast(east, north).shape, float(self.h0))
        if self.kind == "ramp":
            return self.h0 + self.gradient[0] * east + self.gradient[1] * north
        d2 = (east - self.center[0]) ** 2 + (north - self.center[1]) ** 2
        return self.h0 + self.amplitude * np.exp(-d2 / (2 * self.width ** 2))

    def height(self, lat, lon):
        e, n, _ = to_enu(lat, lon, 0.0, self.geo_ref)
        return self.height_enu(e, n)

    def color(self, lat, lon):
        e, n, _ = to_enu(lat, lon, 0.0, self.geo_ref)
        return procedural_texture(e, n)


def first_hit(surface, rpc, samp, line, lo, hi, steps=64):
    """Highest height in [lo, hi] where the pixel ray meets the surface."""

    def gap(h):
        lat, lon = rpc.localize(samp, line, h)
        return h - surface.height(lat, lon)

    grid = np.linspace(hi, lo, steps + 1)
    top = np.full(samp.shape, hi)
    bot = np.full(samp.shape, np.nan)
    g_prev = gap(top)
    found = g_prev <= 0  # surface at or above the top of the box
    bot[found] = hi
    for h in grid[1:]:
        hh = np.full(samp.shape, h)
        g = gap(hh)
        new = ~found & (g <= 0)
        bot[new] = h
        top[new] = h + (hi - lo) / steps
        found |= new
    hit = found.copy()
    a, b = np.where(hit, top, hi), np.where(hit, bot, lo)
    a = np.where(a < b, b, a)
    for _ in range(200):
        if np.all(a - b <= BISECT_TOL):
            break
        mid = 0.5 * (a + b)
        above = gap(mid) > 0
        a = np.where(above, mid, a)
        b = np.where(above, b, mid)
    h = 0.5 * (a + b)
    return np.where(hit, h, np.nan), hit


def raycast_render(surface: SyntheticSurface, rpc: RpcModel, size, supersample=1):
    """Ray-cast a surface into an RPC view.

    Returns ``(rgb, pan, altitude, mask)``: colors averaged over
    ``supersample**2`` sub-pixel rays, the hit height of the central ray,
    and the pixels where that ray met the surface.
    """
    h, w = size
    lo, hi = surface.hei_bounds
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    altitude, mask = first_hit(surface, rpc, samp, line, lo, hi)
    k = int(supersample)
    offsets = (np.arange(k) + 0.5) / k - 0.5
    rgb = np.zeros((h, w, 3))
    count = np.zeros((h, w, 1))
    for oy in offsets:
        for ox in offsets:
            hh, ok = first_hit(surface, rpc, samp + ox, line + oy, lo, hi)
            lat, lon = rpc.localize(samp + ox, line + oy, np.where(ok, hh, lo))
            col = surface.color(lat, lon)
            rgb += np.where(ok[..., None], col, 0.0)
            count += ok[..., None]
    rgb = np.where(count > 0, rgb / np.maximum(count, 1), 0.0)
    pan = rgb @ LUMA
    return rgb, pan, altitude, mask


def box_downsample(img, factor):
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise InvalidRange(f"image size {(h, w)} not divisible by {factor}")
    shape = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


def box_upsample_adjoint(grad, factor):
    """Transpose of :func:`box_downsample`."""
    g = np.repeat(np.repeat(np.asarray(grad, dtype=float), factor, axis=0), factor, axis=1)
    return g / (factor * factor)


# scenes ----------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    surface: SyntheticSurface
    source: ViewSpec
    targets: tuple = ()
    size: tuple = (64, 64)
    gsd: float = 0.5
    altitude_bounds: tuple = (0.0, 31.0)  # (h_far, h_near)
    supersample: int = 2
    name: str = "scene"


def source_grid(rpc: RpcModel, size, gsd, geo_ref: GeoRef) -> GridSpec:
    """North-up geodetic grid at ``gsd`` covering the image footprint."""
    h, w = size
    m_lat, m_lon = meters_per_degree(geo_ref.lat)
    dlat, dlon = gsd / m_lat, gsd / m_lon
    lat0 = rpc.lat_off + (h - 1) / 2 * dlat
    lon0 = rpc.lon_off - (w - 1) / 2 * dlon
    return GridSpec(lat0, lon0, -dlat, dlon, h, w)


def make_scene(spec: SceneSpec, out_dir, lr_factor=4) -> SceneManifest:
    """Render every view with the oracle and write a complete scene directory."""
    out = ensure_dir(out_dir)
    surf = spec.surface
    geo_ref = surf.geo_ref
    h_far, h_near = spec.altitude_bounds
    hei_range = (min(h_far, surf.hei_bounds[0]), max(h_near, surf.hei_bounds[1]))

    def camera(view):
        return make_affine_rpc(geo_ref, spec.size, spec.gsd, hei_range, view.slope, view.azimuth)

    rpc = camera(spec.source)
    rgb, pan, alt, _ = raycast_render(surf, rpc, spec.size, spec.supersample)
    write_pfm(out / "src_pan.pfm", pan)
    write_pfm(out / "src_rgb_hr.pfm", rgb)
    write_pfm(out / "src_rgb_lr.pfm", box_downsample(rgb, lr_factor))
    write_pfm(out / "src_altitude.pfm", alt)
    write_rpc(rpc, out / "src.rpc")
    write_rpc(rescale_rpc(rpc, lr_factor), out / "src_lr.rpc")

    grid = source_grid(rpc, spec.size, spec.gsd, geo_ref)
    glat, glon = grid.centers()
    write_dsm(out / "truth_dsm.bin", Raster(surf.height(glat, glon)), grid)

    targets = []
    for view in spec.targets:
        trpc = camera(view)
        trgb, _, _, _ = raycast_render(surf, trpc, spec.size, spec.supersample)
        write_pfm(out / f"{view.name}_rgb.pfm", trgb)
        write_rpc(trpc, out / f"{view.name}.rpc")
        targets.append(ViewEntry(f"{view.name}_rgb.pfm", f"{view.name}.rpc"))

    manifest = SceneManifest(
        size=spec.size, altitude_bounds=(h_far, h_near), geo_ref=geo_ref,
        source_pan="src_pan.pfm", source_rgb_lr="src_rgb_lr.pfm", source_rpc="src.rpc",
        source_rpc_lr="src_lr.rpc", source_rgb_hr="src_rgb_hr.pfm", targets=targets,
        truth_dsm="truth_dsm.bin", truth_altitude="src_altitude.pfm", name=spec.name,
        root=Path(out))
    manifest.save(out / "manifest.json")
    return manifest


GEO_REF = GeoRef(30.3, -81.7, 15.5)


def fixture_spec(kind="flat", size=(64, 64), n_targets=4, slope=0.3):
    """The shipped synthetic scenes: 0-31 m altitude box, 0.5 m pixels."""
    if kind == "flat":
        surf = SyntheticSurface("flat", GEO_REF, h0=12.0, hei_bounds=(0.0, 31.0))
    elif kind == "ramp":
        surf = SyntheticSurface("ramp", GEO_REF, h0=15.0, gradient=(0.25, 0.15),
                                hei_bounds=(0.0, 31.0))
    elif kind == "hill":
        surf = SyntheticSurface("gaussian_hill", GEO_REF, h0=8.0, amplitude=14.0, width=6.0,
                                hei_bounds=(0.0, 31.0))
    else:
        raise InvalidRange(f"unknown fixture {kind!r}")
    views = [ViewSpec("east", slope, 90.0), ViewSpec("west", slope, 270.0),
             ViewSpec("north", slope, 0.0), ViewSpec("south", slope, 180.0)][:n_targets]
    return SceneSpec(surf, ViewSpec("source", 0.0, 90.0), tuple(views), size=size, name=kind)
