"""Local tangent plane helpers (East/North/Up meters around a reference)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GeoRef:
    """Anchor of the local tangent plane: degrees, degrees, meters."""

    lat: float
    lon: float
    hei: float = 0.0


def meters_per_degree(lat_deg):
    """Return (m_per_deg_lat, m_per_deg_lon) at the given latitude."""
    phi = np.deg2rad(lat_deg)
    m_lat = 111132.954 - 559.822 * np.cos(2 * phi) + 1.175 * np.cos(4 * phi)
    m_lon = 111412.84 * np.cos(phi) - 93.5 * np.cos(3 * phi)
    return float(m_lat), float(m_lon)


def to_enu(lat, lon, hei, ref: GeoRef):
    m_lat, m_lon = meters_per_degree(ref.lat)
    east = (np.asarray(lon) - ref.lon) * m_lon
    north = (np.asarray(lat) - ref.lat) * m_lat
    return east, north, np.asarray(hei, dtype=float)


def from_enu(east, north, up, ref: GeoRef):
    m_lat, m_lon = meters_per_degree(ref.lat)
    lat = ref.lat + np.asarray(north) / m_lat
    lon = ref.lon + np.asarray(east) / m_lon
    return lat, lon, np.asarray(up, dtype=float)
