"""Raster formats, DSM export and scene manifests."""

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyOutput, ParseError, ValidationError
from .geo import GeoRef
from .rpc import RpcModel, read_rpc

MANIFEST_SCHEMA = 1


@dataclass(eq=False)
class Raster:
    values: np.ndarray  # (H, W) or (H, W, C)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim not in (2, 3) or v.shape[0] == 0 or v.shape[1] == 0:
            raise DimensionMismatch(f"raster must be (H, W[, C]) and non-empty, got {v.shape}")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != v.shape[:2]:
                raise DimensionMismatch(f"mask {m.shape} does not match raster {v.shape[:2]}")
            self.mask = m
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]


# PFM -------------------------------------------------------------------------

def pfm_bytes(values) -> bytes:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim == 3 and v.shape[2] == 1:
        v = v[..., 0]
    if v.ndim == 2:
        tag = b"Pf"
    elif v.ndim == 3 and v.shape[2] == 3:
        tag = b"PF"
    else:
        raise DimensionMismatch(f"PFM holds 1 or 3 channels, got shape {v.shape}")
    h, w = v.shape[:2]
    header = tag + b"\n%d %d\n-1.0\n" % (w, h)
    return header + np.ascontiguousarray(v[::-1]).astype("<f4").tobytes()


def parse_pfm(data: bytes) -> np.ndarray:
    parts = []
    pos = 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError(len(parts) + 1, "truncated PFM header")
        parts.append(data[pos:end].decode("ascii", "replace").strip())
        pos = end + 1
    tag, dims, scale = parts
    if tag not in ("PF", "Pf"):
        raise ParseError(1, f"not a PFM tag: {tag!r}")
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise ParseError(2, f"bad dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        s = float(scale)
    except ValueError:
        raise ParseError(3, f"bad scale {scale!r}") from None
    if s == 0:
        raise ParseError(3, "scale must be non-zero")
    c = 3 if tag == "PF" else 1
    dtype = "<f4" if s < 0 else ">f4"
    n = w * h * c
    if len(data) - pos != 4 * n:
        raise DimensionMismatch(f"expected {4 * n} payload bytes, got {len(data) - pos}")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float32)
    arr = arr.reshape((h, w, c) if c == 3 else (h, w))
    return arr[::-1].copy()


def write_pfm(path, values):
    Path(path).write_bytes(pfm_bytes(values))


def read_pfm(path) -> np.ndarray:
    return parse_pfm(Path(path).read_bytes())


# 8-bit previews --------------------------------------------------------------

def to_uint8(values):
    return np.rint(np.clip(np.asarray(values, dtype=float), 0.0, 1.0) * 255).astype(np.uint8)


def pnm_bytes(values) -> bytes:
    v = np.asarray(values)
    if v.ndim == 3 and v.shape[2] == 1:
        v = v[..., 0]
    if v.ndim == 2:
        tag = b"P5"
    elif v.ndim == 3 and v.shape[2] == 3:
        tag = b"P6"
    else:
        raise DimensionMismatch(f"PGM/PPM holds 1 or 3 channels, got {v.shape}")
    h, w = v.shape[:2]
    return tag + b"\n%d %d\n255\n" % (w, h) + to_uint8(v).tobytes()


def write_preview(path, values):
    Path(path).write_bytes(pnm_bytes(values))


def read_preview(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if not m:
            raise ParseError(None, "truncated PGM/PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    tag, w, h, maxval = tokens
    if tag not in (b"P5", b"P6") or int(maxval) != 255:
        raise ParseError(1, "only 8-bit binary PGM/PPM supported")
    pos += 1
    w, h = int(w), int(h)
    c = 3 if tag == b"P6" else 1
    if len(data) - pos != w * h * c:
        raise DimensionMismatch("PGM/PPM payload size mismatch")
    arr = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape((h, w, c) if c == 3 else (h, w))
    return arr.astype(np.float32) / 255.0


# DSM -------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Regular geodetic grid; cell (r, c) is centered at (lat0 + r*dlat, lon0 + c*dlon)."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.dlat == 0 or self.dlon == 0 or self.rows < 1 or self.cols < 1:
            raise ValidationError("grid needs non-zero steps and positive size")

    def centers(self):
        r, c = np.mgrid[0:self.rows, 0:self.cols].astype(float)
        return self.lat0 + r * self.dlat, self.lon0 + c * self.dlon

    def cell_of(self, lat, lon):
        r = np.rint((np.asarray(lat) - self.lat0) / self.dlat)
        c = np.rint((np.asarray(lon) - self.lon0) / self.dlon)
        return r, c


def write_dsm(path, raster: Raster, grid: GridSpec):
    """Flat little-endian float32 payload plus a ``<path>.json`` header.

    Invalid cells are stored as NaN.
    """
    v = np.asarray(raster.values, dtype=np.float32)
    if raster.mask is not None:
        v = np.where(raster.mask, v, np.float32(np.nan))
    Path(path).write_bytes(v.astype("<f4").tobytes())
    header = {"width": int(v.shape[1]), "height": int(v.shape[0]), "dtype": "float32",
              "byte_order": "little", "nodata": "nan", "units": "meters",
              "grid": {k: getattr(grid, k) for k in ("lat0", "lon0", "dlat", "dlon", "rows", "cols")}}
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_dsm(path):
    try:
        header = json.loads(Path(str(path) + ".json").read_text())
        h, w = int(header["height"]), int(header["width"])
        grid = GridSpec(**header["grid"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(None, f"bad DSM header: {e}") from None
    data = Path(path).read_bytes()
    if len(data) != 4 * h * w:
        raise DimensionMismatch(f"DSM payload has {len(data)} bytes, expected {4 * h * w}")
    v = np.frombuffer(data, dtype="<f4").reshape(h, w).astype(np.float32)
    return Raster(v, np.isfinite(v)), grid


def dsm_from_altitude(altitude, rpc: RpcModel, grid: GridSpec) -> Raster:
    """Splat a rendered altitude map onto a geodetic grid.

    Each pixel is localized at its own altitude and written to the nearest
    grid cell; collisions keep the highest value.  Empty cells are masked.
    """
    altitude = np.asarray(getattr(altitude, "altitude", altitude), dtype=float)
    h, w = altitude.shape
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    lat, lon = rpc.localize(samp, line, altitude, strict=False)
    r, c = grid.cell_of(lat, lon)
    ok = (np.isfinite(r) & np.isfinite(c) & np.isfinite(altitude)
          & (r >= 0) & (r < grid.rows) & (c >= 0) & (c < grid.cols))
    if not ok.any():
        raise EmptyOutput("no pixel falls inside the DSM grid")
    out = np.full(grid.rows * grid.cols, -np.inf)
    flat = (r[ok].astype(np.int64) * grid.cols + c[ok].astype(np.int64))
    np.maximum.at(out, flat, altitude[ok])
    out = out.reshape(grid.rows, grid.cols)
    mask = np.isfinite(out)
    return Raster(np.where(mask, out, np.nan), mask)


# CSV point batches -------------------------------------------------------------

def read_points_csv(path, columns):
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise ParseError(1, "empty CSV")
    header = [h.strip() for h in text[0].split(",")]
    if any(c not in header for c in columns):
        raise ParseError(1, f"header must contain {','.join(columns)}")
    cols = {c: [] for c in columns}
    for lineno, row in enumerate(text[1:], start=2):
        if not row.strip():
            continue
        cells = row.split(",")
        if len(cells) != len(header):
            raise ParseError(lineno, "wrong number of fields")
        try:
            for c in columns:
                cols[c].append(float(cells[header.index(c)]))
        except ValueError:
            raise ParseError(lineno, "non-numeric field") from None
    return [np.array(cols[c]) for c in columns]


def write_points_csv(path, columns, arrays):
    lines = [",".join(columns)]
    for row in zip(*arrays):
        lines.append(",".join(f"{float(v):.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# manifests -------------------------------------------------------------------

@dataclass
class ViewEntry:
    rgb: str
    rpc: str


@dataclass
class SceneManifest:
    """Files and geometry of one fitting or rendering job.

    Paths are relative to the manifest's directory.
    """

    size: tuple
    altitude_bounds: tuple  # (h_far, h_near) meters
    geo_ref: GeoRef
    source_pan: str
    source_rgb_lr: str
    source_rpc: str
    source_rpc_lr: Optional[str] = None
    source_rgb_hr: Optional[str] = None
    targets: list = field(default_factory=list)
    truth_dsm: Optional[str] = None
    truth_altitude: Optional[str] = None
    name: str = "scene"
    root: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        lo, hi = self.altitude_bounds
        if not lo < hi:
            raise ValidationError(f"altitude bounds must be ordered low < high, got {self.altitude_bounds}")
        self.size = tuple(int(v) for v in self.size)
        self.targets = [t if isinstance(t, ViewEntry) else ViewEntry(**t) for t in self.targets]

    def path(self, rel):
        return None if rel is None else Path(self.root) / rel

    def to_dict(self):
        return {
            "schema": MANIFEST_SCHEMA,
            "name": self.name,
            "size": list(self.size),
            "altitude_bounds": list(self.altitude_bounds),
            "geo_ref": {"lat": self.geo_ref.lat, "lon": self.geo_ref.lon, "hei": self.geo_ref.hei},
            "source": {"pan": self.source_pan, "rgb_lr": self.source_rgb_lr,
                       "rgb_hr": self.source_rgb_hr, "rpc": self.source_rpc,
                       "rpc_lr": self.source_rpc_lr},
            "targets": [{"rgb": t.rgb, "rpc": t.rpc} for t in self.targets],
            "truth": {"dsm": self.truth_dsm, "altitude": self.truth_altitude},
        }

    @classmethod
    def from_dict(cls, d, root="."):
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ValidationError(f"unsupported manifest schema {d.get('schema')!r}")
        try:
            src = d["source"]
            truth = d.get("truth") or {}
            m = cls(size=tuple(d["size"]), altitude_bounds=tuple(d["altitude_bounds"]),
                    geo_ref=GeoRef(**d["geo_ref"]), source_pan=src["pan"],
                    source_rgb_lr=src["rgb_lr"], source_rpc=src["rpc"],
                    source_rpc_lr=src.get("rpc_lr"), source_rgb_hr=src.get("rgb_hr"),
                    targets=d.get("targets", []), truth_dsm=truth.get("dsm"),
                    truth_altitude=truth.get("altitude"), name=d.get("name", "scene"),
                    root=Path(root))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"malformed manifest: {e}") from None
        for rel in m.referenced_files():
            if not m.path(rel).exists():
                raise ValidationError(f"manifest references missing file {rel}")
        return m

    def referenced_files(self):
        files = [self.source_pan, self.source_rgb_lr, self.source_rpc, self.source_rpc_lr,
                 self.source_rgb_hr, self.truth_dsm, self.truth_altitude]
        files += [f for t in self.targets for f in (t.rgb, t.rpc)]
        return [f for f in files if f is not None]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.msg) from None
    return SceneManifest.from_dict(d, root=path.parent)


@dataclass(eq=False)
class SceneData:
    """In-memory arrays and cameras of a manifest."""

    manifest: SceneManifest
    pan: np.ndarray
    rgb_lr: np.ndarray
    rpc: RpcModel
    rgb_hr: Optional[np.ndarray] = None
    targets: list = field(default_factory=list)  # [(rgb, rpc)]
    truth_altitude: Optional[np.ndarray] = None
    truth_dsm: Optional[tuple] = None  # (Raster, GridSpec)

    @property
    def geo_ref(self):
        return self.manifest.geo_ref

    @property
    def size(self):
        return self.manifest.size


def load_scene(manifest) -> SceneData:
    m = manifest if isinstance(manifest, SceneManifest) else load_manifest(manifest)
    f64 = lambda a: np.asarray(a, dtype=float)
    data = SceneData(
        manifest=m,
        pan=f64(read_pfm(m.path(m.source_pan))),
        rgb_lr=f64(read_pfm(m.path(m.source_rgb_lr))),
        rpc=read_rpc(m.path(m.source_rpc)),
        rgb_hr=None if m.source_rgb_hr is None else f64(read_pfm(m.path(m.source_rgb_hr))),
        targets=[(f64(read_pfm(m.path(t.rgb))), read_rpc(m.path(t.rpc))) for t in m.targets],
        truth_altitude=None if m.truth_altitude is None else f64(read_pfm(m.path(m.truth_altitude))),
        truth_dsm=None if m.truth_dsm is None else read_dsm(m.path(m.truth_dsm)),
    )
    if data.pan.shape != m.size:
        raise DimensionMismatch(f"PAN is {data.pan.shape}, manifest says {m.size}")
    return data


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
