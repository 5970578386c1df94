"""Great-circle distances and geohash encoding.

Distances use the haversine formula on a sphere of radius 6371.0088 km
(IUGG mean earth radius): accurate to well under 0.5% everywhere, which
is immaterial for kilometre-scale proximity filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_KM = 6371.0088
GEOHASH_BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in kilometres."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    # h can exceed 1 by a few ulps for antipodal points
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def within_radius(a: GeoPoint, b: GeoPoint, r_km: float) -> bool:
    if r_km < 0:
        raise ValueError("radius must be non-negative")
    return haversine_km(a, b) <= r_km


def geohash_encode(p: GeoPoint, precision: int) -> str:
    """Standard base-32 geohash of a point.

    Bits alternate longitude/latitude, starting with longitude; each bit
    halves the interval, taking the upper half when the coordinate is >=
    the midpoint. Output at precision k is always a prefix of the output
    at any higher precision.
    """
    if not (1 <= precision <= 12):
        raise ValueError(f"precision must be in [1, 12], got {precision}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    use_lon = True
    val = 0
    nbits = 0
    while len(chars) < precision:
        if use_lon:
            mid = (lon_lo + lon_hi) / 2.0
            if p.lon >= mid:
                val = (val << 1) | 1
                lon_lo = mid
            else:
                val = val << 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2.0
            if p.lat >= mid:
                val = (val << 1) | 1
                lat_lo = mid
            else:
                val = val << 1
                lat_hi = mid
        use_lon = not use_lon
        nbits += 1
        if nbits == 5:
            chars.append(GEOHASH_BASE32[val])
            val = 0
            nbits = 0
    return "".join(chars)


def geohash_decode_bbox(geohash: str) -> tuple[float, float, float, float]:
    """Bounding box (lat_lo, lat_hi, lon_lo, lon_hi) of a geohash cell."""
    if not geohash:
        raise ValueError("empty geohash")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    use_lon = True
    for ch in geohash:
        try:
            val = GEOHASH_BASE32.index(ch)
        except ValueError:
            raise ValueError(f"invalid geohash character: {ch!r}") from None
        for shift in range(4, -1, -1):
            bit = (val >> shift) & 1
            if use_lon:
                mid = (lon_lo + lon_hi) / 2.0
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2.0
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            use_lon = not use_lon
    return lat_lo, lat_hi, lon_lo, lon_hi
