import math

import numpy as np
import pytest

from geosid.geo import (
    EARTH_RADIUS_KM,
    GeoPoint,
    geohash_decode_bbox,
    geohash_encode,
    haversine_km,
    within_radius,
)


def test_identical_points_zero_distance():
    p = GeoPoint(12.5, -33.25)
    assert haversine_km(p, p) == 0.0


def test_nyc_la_reference_distance():
    # independent evaluation of the haversine formula with R=6371.0088
    nyc, la = GeoPoint(40.7128, -74.0060), GeoPoint(34.0522, -118.2437)
    assert haversine_km(nyc, la) == pytest.approx(3935.7, abs=0.5)


def test_symmetry_bit_for_bit():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        b = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        assert haversine_km(a, b) == haversine_km(b, a)


def test_triangle_inequality_random_triples():
    rng = np.random.default_rng(11)
    for _ in range(200):
        pts = [GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180))) for _ in range(3)]
        a, b, c = pts
        assert haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9


def test_coordinate_range_validation():
    with pytest.raises(ValueError):
        GeoPoint(91.0, 0.0)
    with pytest.raises(ValueError):
        GeoPoint(0.0, 180.5)


def test_within_radius_cases():
    p = GeoPoint(10.0, 10.0)
    assert within_radius(p, p, 0.0)
    nyc, la = GeoPoint(40.7128, -74.0060), GeoPoint(34.0522, -118.2437)
    assert not within_radius(nyc, la, 3.0)
    # 1 degree of latitude is ~111.195 km on this sphere
    km_per_deg = math.pi * EARTH_RADIUS_KM / 180.0
    assert km_per_deg == pytest.approx(111.195, abs=0.001)
    near = GeoPoint(10.0 + 0.02608, 10.0)  # about 2.9 km north
    assert within_radius(p, near, 3.0)
    with pytest.raises(ValueError):
        within_radius(p, p, -1.0)


def test_geohash_reference_values():
    # classic reference point, computed by hand via binary subdivision
    assert geohash_encode(GeoPoint(57.64911, 10.40744), 11) == "u4pruydqqvj"
    assert geohash_encode(GeoPoint(0.0, 0.0), 1) == "s"


def test_geohash_prefix_property():
    rng = np.random.default_rng(7)
    for _ in range(100):
        p = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        full = geohash_encode(p, 9)
        assert geohash_encode(p, 5) == full[:5]


def test_geohash_cell_contains_point():
    rng = np.random.default_rng(13)
    for _ in range(100):
        p = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        for precision in (1, 4, 8):
            lat_lo, lat_hi, lon_lo, lon_hi = geohash_decode_bbox(geohash_encode(p, precision))
            assert lat_lo <= p.lat <= lat_hi
            assert lon_lo <= p.lon <= lon_hi


def test_geohash_precision_validation():
    with pytest.raises(ValueError):
        geohash_encode(GeoPoint(0, 0), 0)
    with pytest.raises(ValueError):
        geohash_encode(GeoPoint(0, 0), 13)
