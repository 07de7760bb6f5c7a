"""Rational polynomial camera: tensor evaluation, projection, localization.

Coefficients of each cubic polynomial live in a 4x4x4 tensor ``T`` whose
entry ``T[i, j, k]`` multiplies ``hei**i * lat**j * lon**k`` (forward maps)
or ``hei**i * samp**j * line**k`` (inverse maps), all in normalized units.
Only entries with ``i + j + k <= 3`` are meaningful.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    DenominatorNearZero,
    InvariantViolation,
    NoConvergence,
    ParseError,
)

DEN_EPS = 1e-8

_idx = np.indices((4, 4, 4))
DEGREE_MASK = (_idx.sum(axis=0) <= 3).astype(float)
del _idx

# RPC00B term order as exponents of (H, P, L) = (hei, lat, lon).
RPC00B_EXPONENTS = [
    (0, 0, 0),  # 1
    (0, 0, 1),  # L
    (0, 1, 0),  # P
    (1, 0, 0),  # H
    (0, 1, 1),  # LP
    (1, 0, 1),  # LH
    (1, 1, 0),  # PH
    (0, 0, 2),  # L^2
    (0, 2, 0),  # P^2
    (2, 0, 0),  # H^2
    (1, 1, 1),  # PLH
    (0, 0, 3),  # L^3
    (0, 2, 1),  # LP^2
    (2, 0, 1),  # LH^2
    (0, 1, 2),  # L^2P
    (0, 3, 0),  # P^3
    (2, 1, 0),  # PH^2
    (1, 0, 2),  # L^2H
    (1, 2, 0),  # P^2H
    (3, 0, 0),  # H^3
]

# Forward tensors are indexed (hei, lat, lon) = (H, P, L).  Inverse tensors are
# indexed (hei, samp, line); in the inverse text keys L plays samp and P line.
FORWARD_INDEX = [(h, p, l) for h, p, l in RPC00B_EXPONENTS]
INVERSE_INDEX = [(h, l, p) for h, p, l in RPC00B_EXPONENTS]


def coeffs_to_tensor(coeffs, index=FORWARD_INDEX):
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (20,):
        raise ValueError(f"expected 20 coefficients, got shape {coeffs.shape}")
    t = np.zeros((4, 4, 4))
    for c, ijk in zip(coeffs, index):
        t[ijk] = c
    return t


def tensor_to_coeffs(t, index=FORWARD_INDEX):
    return np.array([t[ijk] for ijk in index])


def _horner(t, a, b, c):
    """sum_{ijk} t[i,j,k] a^i b^j c^k, elementwise over broadcast a, b, c."""
    acc_a = 0.0
    for i in range(3, -1, -1):
        acc_b = 0.0
        for j in range(3, -1, -1):
            acc_c = t[i, j, 3]
            for k in range(2, -1, -1):
                acc_c = acc_c * c + t[i, j, k]
            acc_b = acc_b * b + acc_c
        acc_a = acc_a * a + acc_b
    return acc_a


def eval_poly(coeffs, hei_n, lat_n, lon_n):
    """Evaluate a degree-3 coefficient tensor at normalized coordinates.

    Entries above total degree 3 are ignored.  Works elementwise on arrays.
    """
    t = np.asarray(coeffs, dtype=float) * DEGREE_MASK
    out = _horner(t, np.asarray(hei_n, dtype=float), np.asarray(lat_n, dtype=float),
                  np.asarray(lon_n, dtype=float))
    return out + np.zeros(np.broadcast(hei_n, lat_n, lon_n).shape)


def _deriv(t, axis):
    """Coefficient tensor of the partial derivative along ``axis``."""
    d = np.zeros_like(t)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    src[axis] = slice(1, 4)
    dst[axis] = slice(0, 3)
    shape = [1, 1, 1]
    shape[axis] = 3
    d[tuple(dst)] = t[tuple(src)] * np.arange(1, 4).reshape(shape)
    return d


def _check_den(den, strict):
    bad = ~(np.abs(den) > DEN_EPS)
    if strict and bad.any():
        raise DenominatorNearZero(int(np.flatnonzero(bad.ravel())[0]))
    return bad


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RpcModel:
    proj_num_samp: np.ndarray
    proj_den_samp: np.ndarray
    proj_num_line: np.ndarray
    proj_den_line: np.ndarray
    lat_off: float
    lat_scale: float
    lon_off: float
    lon_scale: float
    hei_off: float
    hei_scale: float
    samp_off: float
    samp_scale: float
    line_off: float
    line_scale: float
    loc_num_lat: Optional[np.ndarray] = None
    loc_den_lat: Optional[np.ndarray] = None
    loc_num_lon: Optional[np.ndarray] = None
    loc_den_lon: Optional[np.ndarray] = None
    _derivs: dict = field(default=None, repr=False, compare=False)

    FORWARD = ("proj_num_samp", "proj_den_samp", "proj_num_line", "proj_den_line")
    INVERSE = ("loc_num_lat", "loc_den_lat", "loc_num_lon", "loc_den_lon")
    SCALARS = ("lat_off", "lat_scale", "lon_off", "lon_scale", "hei_off",
               "hei_scale", "samp_off", "samp_scale", "line_off", "line_scale")

    def __post_init__(self):
        inv = [getattr(self, n) for n in self.INVERSE]
        if any(t is None for t in inv) and not all(t is None for t in inv):
            raise InvariantViolation("localization tensors must be all present or all absent")
        names = self.FORWARD + (self.INVERSE if inv[0] is not None else ())
        for name in names:
            t = _freeze(getattr(self, name))
            if t.shape != (4, 4, 4):
                raise InvariantViolation(f"{name} must be 4x4x4, got {t.shape}")
            if not np.isfinite(t).all():
                raise InvariantViolation(f"{name} has non-finite coefficients")
            if np.any(t[DEGREE_MASK == 0] != 0):
                raise InvariantViolation(f"{name} has coefficients above degree 3")
            if "_den_" in name and t[0, 0, 0] != 1.0:
                raise InvariantViolation(f"{name} constant term must be 1")
            object.__setattr__(self, name, t)
        for name in self.SCALARS:
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise InvariantViolation(f"{name} is not finite")
            if name.endswith("_scale") and v <= 0:
                raise InvariantViolation(f"{name} must be strictly positive")
            object.__setattr__(self, name, v)
        derivs = {}
        for name in self.FORWARD:
            t = getattr(self, name)
            derivs[name] = (_deriv(t, 1), _deriv(t, 2))
        object.__setattr__(self, "_derivs", derivs)

    @property
    def has_inverse(self):
        return self.loc_num_lat is not None

    def without_inverse(self):
        return replace(self, loc_num_lat=None, loc_den_lat=None,
                       loc_num_lon=None, loc_den_lon=None, _derivs=None)

    # normalization ---------------------------------------------------------

    def normalize_geo(self, lat, lon, hei):
        return ((np.asarray(lat, dtype=float) - self.lat_off) / self.lat_scale,
                (np.asarray(lon, dtype=float) - self.lon_off) / self.lon_scale,
                (np.asarray(hei, dtype=float) - self.hei_off) / self.hei_scale)

    def denormalize_geo(self, lat_n, lon_n, hei_n):
        return (lat_n * self.lat_scale + self.lat_off,
                lon_n * self.lon_scale + self.lon_off,
                hei_n * self.hei_scale + self.hei_off)

    def normalize_image(self, samp, line):
        return ((np.asarray(samp, dtype=float) - self.samp_off) / self.samp_scale,
                (np.asarray(line, dtype=float) - self.line_off) / self.line_scale)

    def denormalize_image(self, samp_n, line_n):
        return (samp_n * self.samp_scale + self.samp_off,
                line_n * self.line_scale + self.line_off)

    # projection ------------------------------------------------------------

    def project_normalized(self, lat_n, lon_n, hei_n, strict=True):
        """Normalized (lat, lon, hei) -> normalized (samp, line).

        With ``strict=False`` points with a vanishing denominator come back
        as NaN instead of raising.
        """
        lat_n, lon_n, hei_n = np.broadcast_arrays(
            np.asarray(lat_n, dtype=float), np.asarray(lon_n, dtype=float),
            np.asarray(hei_n, dtype=float))
        ds = _horner(self.proj_den_samp, hei_n, lat_n, lon_n)
        dl = _horner(self.proj_den_line, hei_n, lat_n, lon_n)
        bad = _check_den(ds, strict) | _check_den(dl, strict)
        with np.errstate(divide="ignore", invalid="ignore"):
            samp_n = _horner(self.proj_num_samp, hei_n, lat_n, lon_n) / ds
            line_n = _horner(self.proj_num_line, hei_n, lat_n, lon_n) / dl
        if bad.any():
            samp_n = np.where(bad, np.nan, samp_n)
            line_n = np.where(bad, np.nan, line_n)
        return samp_n, line_n

    def project(self, lat, lon, hei, strict=True):
        samp_n, line_n = self.project_normalized(*self.normalize_geo(lat, lon, hei),
                                                 strict=strict)
        return self.denormalize_image(samp_n, line_n)

    def _forward_jacobian(self, lat_n, lon_n, hei_n):
        out = []
        for num_name, den_name in (("proj_num_samp", "proj_den_samp"),
                                   ("proj_num_line", "proj_den_line")):
            num = _horner(getattr(self, num_name), hei_n, lat_n, lon_n)
            den = _horner(getattr(self, den_name), hei_n, lat_n, lon_n)
            row = []
            for (dn, dd) in zip(self._derivs[num_name], self._derivs[den_name]):
                n_ = _horner(dn, hei_n, lat_n, lon_n)
                d_ = _horner(dd, hei_n, lat_n, lon_n)
                row.append((n_ * den - num * d_) / (den * den))
            out.append(row)
        return out  # [[dS/dlat, dS/dlon], [dL/dlat, dL/dlon]]

    # localization ----------------------------------------------------------

    def localize_normalized(self, samp_n, line_n, hei_n, strict=True,
                            max_iter=50, tol=1e-6):
        """Normalized (samp, line, hei) -> normalized (lat, lon)."""
        samp_n, line_n, hei_n = np.broadcast_arrays(
            np.asarray(samp_n, dtype=float), np.asarray(line_n, dtype=float),
            np.asarray(hei_n, dtype=float))
        if self.has_inverse:
            dlat = _horner(self.loc_den_lat, hei_n, samp_n, line_n)
            dlon = _horner(self.loc_den_lon, hei_n, samp_n, line_n)
            bad = _check_den(dlat, strict) | _check_den(dlon, strict)
            with np.errstate(divide="ignore", invalid="ignore"):
                lat_n = _horner(self.loc_num_lat, hei_n, samp_n, line_n) / dlat
                lon_n = _horner(self.loc_num_lon, hei_n, samp_n, line_n) / dlon
            if bad.any():
                lat_n = np.where(bad, np.nan, lat_n)
                lon_n = np.where(bad, np.nan, lon_n)
            return lat_n, lon_n
        return self._localize_newton(samp_n, line_n, hei_n, strict, max_iter, tol)

    def _localize_newton(self, samp_n, line_n, hei_n, strict, max_iter, tol):
        shape = samp_n.shape
        s_t, l_t, h = samp_n.ravel(), line_n.ravel(), hei_n.ravel()
        lat = np.zeros_like(s_t)
        lon = np.zeros_like(s_t)

        def residual(la, lo, hh, st, lt):
            s, l = self.project_normalized(la, lo, hh, strict=False)
            return s - st, l - lt

        rs, rl = residual(lat, lon, h, s_t, l_t)
        norm = np.maximum(np.abs(rs), np.abs(rl))
        active = ~(norm < tol)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            la, lo, hh = lat[idx], lon[idx], h[idx]
            (a, b), (c, d) = self._forward_jacobian(la, lo, hh)
            det = a * d - b * c
            with np.errstate(divide="ignore", invalid="ignore"):
                step_lat = (d * rs[idx] - b * rl[idx]) / det
                step_lon = (a * rl[idx] - c * rs[idx]) / det
            t = np.ones_like(la)
            cur = norm[idx]
            accepted = np.zeros(idx.size, dtype=bool)
            new_la, new_lo = la.copy(), lo.copy()
            new_rs, new_rl, new_norm = rs[idx].copy(), rl[idx].copy(), cur.copy()
            for _ in range(30):
                todo = ~accepted
                if not todo.any():
                    break
                cand_la = la[todo] - t[todo] * step_lat[todo]
                cand_lo = lo[todo] - t[todo] * step_lon[todo]
                crs, crl = residual(cand_la, cand_lo, hh[todo], s_t[idx][todo], l_t[idx][todo])
                cn = np.maximum(np.abs(crs), np.abs(crl))
                ok = cn < cur[todo]
                sub = np.flatnonzero(todo)[ok]
                new_la[sub], new_lo[sub] = cand_la[ok], cand_lo[ok]
                new_rs[sub], new_rl[sub], new_norm[sub] = crs[ok], crl[ok], cn[ok]
                accepted[sub] = True
                t[todo] *= 0.5
            lat[idx], lon[idx] = new_la, new_lo
            rs[idx], rl[idx], norm[idx] = new_rs, new_rl, new_norm
            # a point whose line search failed cannot improve any further
            active[idx] = accepted & ~(new_norm < tol)
        failed = ~(norm < tol)
        if failed.any():
            if strict:
                i = int(np.flatnonzero(failed)[0])
                raise NoConvergence(i, float(norm[i]))
            lat[failed] = np.nan
            lon[failed] = np.nan
        return lat.reshape(shape), lon.reshape(shape)

    def localize(self, samp, line, hei, strict=True, **kw):
        samp_n, line_n = self.normalize_image(samp, line)
        hei_n = (np.asarray(hei, dtype=float) - self.hei_off) / self.hei_scale
        lat_n, lon_n = self.localize_normalized(samp_n, line_n, hei_n, strict=strict, **kw)
        return (lat_n * self.lat_scale + self.lat_off,
                lon_n * self.lon_scale + self.lon_off)


@dataclass(frozen=True)
class GeoPointBatch:
    lat: np.ndarray
    lon: np.ndarray
    hei: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float))
                for n in ("lat", "lon", "hei")]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise InvariantViolation("lat, lon, hei must be 1-D arrays of equal length")
        if not all(np.isfinite(a).all() for a in arrs):
            raise InvariantViolation("geo points must be finite")
        for n, a in zip(("lat", "lon", "hei"), arrs):
            object.__setattr__(self, n, a)

    def __len__(self):
        return len(self.lat)


@dataclass(frozen=True)
class ImagePointBatch:
    samp: np.ndarray
    line: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float))
                for n in ("samp", "line")]
        if arrs[0].shape != arrs[1].shape or arrs[0].ndim != 1:
            raise InvariantViolation("samp and line must be 1-D arrays of equal length")
        if not all(np.isfinite(a).all() for a in arrs):
            raise InvariantViolation("image points must be finite")
        object.__setattr__(self, "samp", arrs[0])
        object.__setattr__(self, "line", arrs[1])

    def __len__(self):
        return len(self.samp)


def project(rpc: RpcModel, pts: GeoPointBatch) -> ImagePointBatch:
    samp, line = rpc.project(pts.lat, pts.lon, pts.hei)
    return ImagePointBatch(samp, line)


def localize(rpc: RpcModel, pts: ImagePointBatch, hei) -> GeoPointBatch:
    hei = np.broadcast_to(np.asarray(hei, dtype=float), pts.samp.shape)
    lat, lon = rpc.localize(pts.samp, pts.line, hei)
    return GeoPointBatch(lat, lon, hei)


# text format -----------------------------------------------------------------

_SCALAR_KEYS = {
    "LINE_OFF": "line_off", "SAMP_OFF": "samp_off", "LAT_OFF": "lat_off",
    "LONG_OFF": "lon_off", "HEIGHT_OFF": "hei_off",
    "LINE_SCALE": "line_scale", "SAMP_SCALE": "samp_scale", "LAT_SCALE": "lat_scale",
    "LONG_SCALE": "lon_scale", "HEIGHT_SCALE": "hei_scale",
}
_FORWARD_KEYS = {
    "SAMP_NUM": "proj_num_samp", "SAMP_DEN": "proj_den_samp",
    "LINE_NUM": "proj_num_line", "LINE_DEN": "proj_den_line",
}
_INVERSE_KEYS = {
    "LAT_NUM": "loc_num_lat", "LAT_DEN": "loc_den_lat",
    "LON_NUM": "loc_num_lon", "LON_DEN": "loc_den_lon",
}


def parse_rpc(text: str) -> RpcModel:
    """Parse RPC00B-style ``KEY: value`` text."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(lineno, "expected 'KEY: value'")
        key, _, rest = line.partition(":")
        key = key.strip().upper()
        tokens = rest.split()
        if not tokens:
            raise ParseError(lineno, f"missing value for {key}")
        try:
            val = float(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"bad number {tokens[0]!r} for {key}") from None
        if key in values:
            raise ParseError(lineno, f"duplicate key {key}")
        values[key] = (val, lineno)

    kwargs = {}
    for key, name in _SCALAR_KEYS.items():
        if key not in values:
            raise ParseError(None, f"missing key {key}")
        kwargs[name] = values[key][0]

    def read_poly(prefix, index):
        coeffs = []
        for n in range(1, 21):
            key = f"{prefix}_COEFF_{n}"
            if key not in values:
                raise ParseError(None, f"missing key {key}")
            coeffs.append(values[key][0])
        return coeffs_to_tensor(coeffs, index)

    for prefix, name in _FORWARD_KEYS.items():
        kwargs[name] = read_poly(prefix, FORWARD_INDEX)
    if any(k.startswith(tuple(_INVERSE_KEYS)) for k in values):
        for prefix, name in _INVERSE_KEYS.items():
            kwargs[name] = read_poly(prefix, INVERSE_INDEX)
    return RpcModel(**kwargs)


def serialize_rpc(rpc: RpcModel) -> str:
    out = []
    for key, name in _SCALAR_KEYS.items():
        out.append(f"{key}: {getattr(rpc, name):.17g}")
    sections = [(_FORWARD_KEYS, FORWARD_INDEX)]
    if rpc.has_inverse:
        sections.append((_INVERSE_KEYS, INVERSE_INDEX))
    for keys, index in sections:
        for prefix, name in keys.items():
            for n, c in enumerate(tensor_to_coeffs(getattr(rpc, name), index), start=1):
                out.append(f"{prefix}_COEFF_{n}: {c:.17g}")
    return "\n".join(out) + "\n"


def read_rpc(path) -> RpcModel:
    with open(path, encoding="utf-8") as f:
        return parse_rpc(f.read())


def write_rpc(rpc: RpcModel, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_rpc(rpc))
