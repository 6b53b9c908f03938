"""Great-circle geometry and the gridded nearest-port index.

Distances use the Haversine formula on a sphere of radius 6,371,000 m.
North/east displacement between fixes is decomposed into a signed
meridional component and a signed zonal component measured along the
previous fix's latitude circle, so the direction of movement survives.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyPortDatabase

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon < 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points, in meters."""
    return float(haversine_arrays(a.lat, a.lon, b.lat, b.lon))


def haversine_arrays(lat1, lon1, lat2, lon2):
    """Vectorized Haversine; arguments in degrees, broadcast like numpy."""
    p1 = np.radians(np.asarray(lat1, dtype=np.float64))
    p2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    # numerical noise can push h a hair past 1 for antipodal points
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(h))


def wrap_lon_delta(dlon_deg):
    """Shorter-way longitude difference in degrees, in [-180, 180)."""
    return (np.asarray(dlon_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0


def delta_components(prev: GeoPoint, cur: GeoPoint) -> tuple[float, float]:
    """Signed (northward, eastward) displacement in meters from prev to cur.

    The meridional part is the Haversine along prev's meridian; the zonal
    part is the Haversine along prev's latitude circle using the
    shorter-way longitude difference (wrap-aware at the antimeridian).
    """
    dv, dh = delta_components_arrays(prev.lat, prev.lon, cur.lat, cur.lon)
    return float(dv), float(dh)


def delta_components_arrays(lat1, lon1, lat2, lon2):
    lat1 = np.asarray(lat1, dtype=np.float64)
    lat2 = np.asarray(lat2, dtype=np.float64)
    dlat = lat2 - lat1
    dv = np.sign(dlat) * haversine_arrays(lat1, 0.0, lat2, 0.0)
    dlon = wrap_lon_delta(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    dh = np.sign(dlon) * haversine_arrays(lat1, 0.0, lat1, np.abs(dlon))
    return dv, dh


# Port databases are a few 10k points; below this size a vectorized full
# scan beats the per-cell bookkeeping of the grid walk.
_SMALL_SCAN_LIMIT = 512


class PortIndex:
    """Immutable grid over port positions for nearest-port queries.

    Cells are (lat_band, lon_band) squares of cell_size_deg degrees; the
    query expands over lat rows until the row's minimum possible distance
    provably exceeds the best candidate, so the result always equals an
    exhaustive scan. Cell size must divide 360.
    """

    def __init__(self, ports, cell_size_deg: float = 1.0):
        ports = list(ports)
        if not ports:
            raise EmptyPortDatabase("port index requires at least one port")
        ncols = 360.0 / cell_size_deg
        if abs(ncols - round(ncols)) > 1e-9:
            raise ValueError("cell_size_deg must divide 360")
        self.cell_size_deg = float(cell_size_deg)
        self.ncols = int(round(ncols))
        self.nrows = int(round(180.0 / cell_size_deg)) + 1
        self.lats = np.array([p.lat for p in ports], dtype=np.float64)
        self.lons = np.array([p.lon for p in ports], dtype=np.float64)
        self.cells: dict[tuple[int, int], list[int]] = {}
        for i, p in enumerate(ports):
            self.cells.setdefault(self._cell_of(p.lat, p.lon), []).append(i)

    def __len__(self) -> int:
        return len(self.lats)

    def _cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        row = min(int((lat + 90.0) // self.cell_size_deg), self.nrows - 1)
        col = int((lon + 180.0) // self.cell_size_deg) % self.ncols
        return row, col

    def _row_lat_bounds(self, row: int) -> tuple[float, float]:
        lo = row * self.cell_size_deg - 90.0
        return lo, lo + self.cell_size_deg

    def nearest_m(self, p: GeoPoint) -> float:
        """Distance in meters from p to the closest port (grid walk)."""
        qrow, qcol = self._cell_of(p.lat, p.lon)
        best = math.inf
        deg_m = EARTH_RADIUS_M * math.pi / 180.0  # meters per degree of arc
        for drow in range(self.nrows):
            rows = {qrow + drow, qrow - drow} if drow else {qrow}
            rows = {r for r in rows if 0 <= r < self.nrows}
            if not rows:
                break
            # any port in a row drow away is at least (drow-1) cells of
            # latitude from the query
            row_bound = max(0, drow - 1) * self.cell_size_deg * deg_m
            if row_bound > best:
                break
            for row in rows:
                best = self._scan_row(p, row, qcol, best)
        return best

    def _scan_row(self, p: GeoPoint, row: int, qcol: int, best: float) -> float:
        lat_lo, lat_hi = self._row_lat_bounds(row)
        # smallest cos(lat) a port in this row can have, so the zonal bound
        # below never overestimates the true distance
        cos_row = max(0.0, min(math.cos(math.radians(lat_lo)),
                               math.cos(math.radians(lat_hi))))
        cos_q = math.cos(math.radians(p.lat))
        coef = math.sqrt(max(cos_row * cos_q, 0.0))
        half = self.ncols // 2
        for dcol in range(half + 1):
            gap_deg = max(0, dcol - 1) * self.cell_size_deg
            if coef > 0.0:
                lon_bound = 2.0 * EARTH_RADIUS_M * math.asin(
                    coef * math.sin(math.radians(gap_deg) / 2.0))
                if lon_bound > best:
                    break
            cols = {(qcol + dcol) % self.ncols, (qcol - dcol) % self.ncols}
            for col in cols:
                idxs = self.cells.get((row, col))
                if not idxs:
                    continue
                d = haversine_arrays(p.lat, p.lon, self.lats[idxs], self.lons[idxs])
                m = float(np.min(d))
                if m < best:
                    best = m
        return best

    def nearest_many(self, lats, lons) -> np.ndarray:
        """Nearest-port distances for arrays of query positions."""
        lats = np.asarray(lats, dtype=np.float64)
        lons = np.asarray(lons, dtype=np.float64)
        if len(self.lats) <= _SMALL_SCAN_LIMIT:
            out = np.empty(lats.shape, dtype=np.float64)
            flat_lat = lats.ravel()
            flat_lon = lons.ravel()
            flat_out = out.ravel()
            chunk = 4096
            for s in range(0, flat_lat.size, chunk):
                e = min(s + chunk, flat_lat.size)
                d = haversine_arrays(flat_lat[s:e, None], flat_lon[s:e, None],
                                     self.lats[None, :], self.lons[None, :])
                flat_out[s:e] = d.min(axis=1)
            return out
        return np.array([self.nearest_m(GeoPoint(la, lo))
                         for la, lo in zip(lats.ravel(), lons.ravel())]
                        ).reshape(lats.shape)

    def brute_force_m(self, p: GeoPoint) -> float:
        """Exhaustive linear scan; the correctness oracle for nearest_m."""
        d = haversine_arrays(p.lat, p.lon, self.lats, self.lons)
        return float(np.min(d))


def nearest_port_distance_m(p: GeoPoint, idx: PortIndex) -> float:
    return idx.nearest_m(p)


def load_ports_csv(path) -> list[GeoPoint]:
    """Read a ports CSV with header columns lat, lon (extra columns ignored)."""
    ports = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "lat" not in reader.fieldnames \
                or "lon" not in reader.fieldnames:
            raise ValueError(f"{path}: header must include lat and lon columns")
        for row in reader:
            ports.append(GeoPoint(float(row["lat"]), float(row["lon"])))
    return ports


def save_ports_csv(path, ports, labels=None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "lat", "lon"])
        for i, p in enumerate(ports):
            label = labels[i] if labels else f"port_{i}"
            writer.writerow([label, repr(p.lat), repr(p.lon)])
