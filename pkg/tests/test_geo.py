import math

import numpy as np
import pytest

from aisgap.errors import EmptyPortDatabase
from aisgap.geo import (EARTH_RADIUS_M, GeoPoint, PortIndex, delta_components,
                        haversine_m, load_ports_csv, nearest_port_distance_m,
                        save_ports_csv, wrap_lon_delta)


def test_haversine_identity():
    p = GeoPoint(0.0, 0.0)
    assert haversine_m(p, p) == 0.0


def test_haversine_quarter_great_circle():
    # closed form: (pi/2) * R
    expected = math.pi / 2 * EARTH_RADIUS_M
    got = haversine_m(GeoPoint(0, 0), GeoPoint(0, 90))
    assert abs(got - expected) < 1.0
    assert abs(got - 10_007_543.0) < 1.0


def test_haversine_small_arc():
    # small-angle zonal arc: R * dlambda at the equator
    expected = EARTH_RADIUS_M * math.radians(0.001)
    got = haversine_m(GeoPoint(0, 0), GeoPoint(0, 0.001))
    assert abs(got - expected) < 0.01
    assert abs(got - 111.195) < 0.01


def test_haversine_symmetric_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 179.99)))
        b = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 179.99)))
        d1, d2 = haversine_m(a, b), haversine_m(b, a)
        assert d1 >= 0
        assert d1 == d2


def test_triangle_inequality():
    rng = np.random.default_rng(1)
    for _ in range(300):
        pts = [GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 179.99)))
               for _ in range(3)]
        a, b, c = pts
        assert haversine_m(a, c) <= haversine_m(a, b) + haversine_m(b, c) + 1e-6


def test_delta_components_zero():
    p = GeoPoint(12.0, 34.0)
    assert delta_components(p, p) == (0.0, 0.0)


def test_delta_components_meridian():
    dv, dh = delta_components(GeoPoint(0, 0), GeoPoint(0.001, 0))
    assert abs(dv - 111.195) < 0.01
    assert dh == 0.0
    dv_south, _ = delta_components(GeoPoint(0.001, 0), GeoPoint(0, 0))
    assert abs(dv_south + 111.195) < 0.01  # southward is negative


def test_delta_components_antimeridian_wrap():
    dv, dh = delta_components(GeoPoint(10, 179.9), GeoPoint(10, -179.9))
    assert dv == 0.0
    assert dh > 0  # eastward across the antimeridian
    expected = 0.2 * math.cos(math.radians(10)) * 111_194.9
    assert abs(dh - expected) < 1.0
    _, dh_back = delta_components(GeoPoint(10, -179.9), GeoPoint(10, 179.9))
    assert abs(dh_back + dh) < 1e-6  # symmetric up to wrap rounding


def test_antimeridian_continuity():
    # a 1e-5 degree step across 180 keeps components under 1 m
    dv, dh = delta_components(GeoPoint(0, 179.999995), GeoPoint(0, -179.999995))
    assert abs(dv) < 1.0 and abs(dh) < 1.5  # ~1.1 m eastward step


def test_wrap_lon_delta():
    assert wrap_lon_delta(359.0) == pytest.approx(-1.0)
    assert wrap_lon_delta(-359.0) == pytest.approx(1.0)
    assert wrap_lon_delta(180.0) == pytest.approx(-180.0)


def _random_ports(rng, n):
    return [GeoPoint(float(rng.uniform(-89.5, 89.5)),
                     float(rng.uniform(-180, 179.99))) for _ in range(n)]


def test_empty_port_database():
    with pytest.raises(EmptyPortDatabase):
        PortIndex([])


def test_port_coincident_is_zero():
    idx = PortIndex([GeoPoint(10, 20)])
    assert nearest_port_distance_m(GeoPoint(10, 20), idx) == 0.0


def test_single_port_degenerate_index():
    idx = PortIndex([GeoPoint(45, -30)])
    q = GeoPoint(44, -29)
    assert nearest_port_distance_m(q, idx) == pytest.approx(
        haversine_m(q, GeoPoint(45, -30)))


def test_grid_equals_brute_force():
    rng = np.random.default_rng(42)
    ports = _random_ports(rng, 1000)
    idx = PortIndex(ports)
    for _ in range(100):
        q = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 179.99)))
        assert abs(idx.nearest_m(q) - idx.brute_force_m(q)) <= 1e-6


def test_grid_equals_brute_force_poles_and_wrap():
    rng = np.random.default_rng(3)
    ports = _random_ports(rng, 500) + [GeoPoint(89.9, 0), GeoPoint(-89.9, 170)]
    idx = PortIndex(ports)
    tricky = [GeoPoint(90, 0), GeoPoint(-90, 0), GeoPoint(89.95, -179.99),
              GeoPoint(0, -180), GeoPoint(0, 179.99), GeoPoint(-89.99, 12.3)]
    for q in tricky:
        assert abs(idx.nearest_m(q) - idx.brute_force_m(q)) <= 1e-6


def test_result_independent_of_cell_size():
    rng = np.random.default_rng(9)
    ports = _random_ports(rng, 300)
    queries = _random_ports(rng, 40)
    coarse = PortIndex(ports, cell_size_deg=5.0)
    fine = PortIndex(ports, cell_size_deg=0.5)
    for q in queries:
        assert coarse.nearest_m(q) == pytest.approx(fine.nearest_m(q), abs=1e-9)


def test_nearest_many_matches_scalar_path():
    rng = np.random.default_rng(5)
    ports = _random_ports(rng, 50)
    idx = PortIndex(ports)
    lats = rng.uniform(-80, 80, 200)
    lons = rng.uniform(-180, 179.9, 200)
    batch = idx.nearest_many(lats, lons)
    for i in range(0, 200, 17):
        assert batch[i] == pytest.approx(idx.nearest_m(GeoPoint(lats[i], lons[i])),
                                         abs=1e-9)


def test_ports_csv_round_trip(tmp_path):
    path = tmp_path / "ports.csv"
    ports = [GeoPoint(10.5, -20.25), GeoPoint(-33.125, 151.2)]
    save_ports_csv(path, ports, labels=["a", "b"])
    loaded = load_ports_csv(path)
    assert [(p.lat, p.lon) for p in loaded] == [(10.5, -20.25), (-33.125, 151.2)]


def test_ports_csv_extra_columns_ignored(tmp_path):
    path = tmp_path / "ports.csv"
    path.write_text("s2id,label,lat,lon,distance_from_shore_m\n"
                    "abc,OSLO,59.9,10.7,120\n")
    loaded = load_ports_csv(path)
    assert loaded == [GeoPoint(59.9, 10.7)]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        load_ports_csv(bad)
