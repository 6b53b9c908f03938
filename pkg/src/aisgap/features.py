"""Per-vessel trajectory assembly and message enrichment.

Each decoded report becomes a 9-field feature row: absolute time and
position, speed, deltas against the vessel's previous message (time,
signed north/east displacement), distance to the nearest port, and the
second of day. Trajectories keep those rows as parallel numpy columns;
FeatureMessage is the scalar view of one row.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NonMonotonicTime
from .geo import GeoPoint, PortIndex, delta_components_arrays, haversine_arrays
from .nmea import DynamicReport

DAY_S = 86_400
KNOT_MS = 0.514444

# column order shared by windows, buffers and persisted rows
FEATURE_COLUMNS = ("t", "lat", "lon", "sog", "delta_t", "delta_dv",
                   "delta_dh", "dist_port_m", "second_of_day")
COL_T, COL_LAT, COL_LON, COL_SOG, COL_DT, COL_DDV, COL_DDH, COL_DP, COL_SOD = range(9)


@dataclass(frozen=True)
class FeatureMessage:
    t: float
    lat: float
    lon: float
    sog: float
    delta_t: float
    delta_dv: float
    delta_dh: float
    dist_port_m: float
    second_of_day: int

    def as_row(self) -> np.ndarray:
        return np.array([self.t, self.lat, self.lon, self.sog, self.delta_t,
                         self.delta_dv, self.delta_dh, self.dist_port_m,
                         float(self.second_of_day)])

    @classmethod
    def from_row(cls, row) -> "FeatureMessage":
        return cls(t=float(row[COL_T]), lat=float(row[COL_LAT]),
                   lon=float(row[COL_LON]), sog=float(row[COL_SOG]),
                   delta_t=float(row[COL_DT]), delta_dv=float(row[COL_DDV]),
                   delta_dh=float(row[COL_DDH]), dist_port_m=float(row[COL_DP]),
                   second_of_day=int(row[COL_SOD]))


def second_of_day(t: float) -> int:
    return int(t % DAY_S)


def enrich(prev: DynamicReport | None, cur: DynamicReport,
           ports: PortIndex) -> FeatureMessage:
    """Build the feature row for cur given the vessel's previous report.

    Delta fields are zero when prev is absent (start of a history).
    """
    if prev is None:
        dt = dv = dh = 0.0
    else:
        if cur.timestamp_s < prev.timestamp_s:
            raise NonMonotonicTime(
                f"message at {cur.timestamp_s} before previous {prev.timestamp_s}")
        dt = cur.timestamp_s - prev.timestamp_s
        dva, dha = delta_components_arrays(prev.lat, prev.lon, cur.lat, cur.lon)
        dv, dh = float(dva), float(dha)
    return FeatureMessage(
        t=cur.timestamp_s, lat=cur.lat, lon=cur.lon, sog=cur.sog,
        delta_t=dt, delta_dv=dv, delta_dh=dh,
        dist_port_m=ports.nearest_m(GeoPoint(cur.lat, cur.lon)),
        second_of_day=second_of_day(cur.timestamp_s))


@dataclass
class Trajectory:
    """Time-ordered feature rows of one vessel (one logical track)."""
    mmsi: int
    track_id: str
    columns: np.ndarray  # shape (n, 9), FEATURE_COLUMNS order

    def __len__(self) -> int:
        return self.columns.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.columns[:, COL_T]

    @property
    def dist_port_m(self) -> np.ndarray:
        return self.columns[:, COL_DP]

    def message(self, i: int) -> FeatureMessage:
        return FeatureMessage.from_row(self.columns[i])

    def messages(self) -> list[FeatureMessage]:
        return [self.message(i) for i in range(len(self))]

    def window(self, end_idx: int, w: int) -> np.ndarray:
        """Rows [end_idx-w+1 .. end_idx] as a (w, 9) view."""
        if end_idx < w - 1:
            raise ValueError(f"window of {w} does not fit before index {end_idx}")
        return self.columns[end_idx - w + 1:end_idx + 1]


def _build_columns(mmsi: int, track_id: str, quads: np.ndarray,
                   ports: PortIndex) -> Trajectory:
    """quads: (n, 4) of [t, lat, lon, sog], already ordered and deduped."""
    n = quads.shape[0]
    cols = np.zeros((n, 9), dtype=np.float64)
    cols[:, COL_T:COL_SOG + 1] = quads
    if n > 1:
        cols[1:, COL_DT] = np.diff(quads[:, 0])
        dv, dh = delta_components_arrays(quads[:-1, 1], quads[:-1, 2],
                                         quads[1:, 1], quads[1:, 2])
        cols[1:, COL_DDV] = dv
        cols[1:, COL_DDH] = dh
    cols[:, COL_DP] = ports.nearest_many(quads[:, 1], quads[:, 2])
    cols[:, COL_SOD] = np.floor(np.mod(quads[:, 0], DAY_S))
    return Trajectory(mmsi=mmsi, track_id=track_id, columns=cols)


@dataclass
class AssembleCounters:
    reports: int = 0
    late_dropped: int = 0
    duplicates: int = 0
    track_splits: int = 0


def assemble(reports, ports: PortIndex, reorder_window_s: float = 120.0,
             split_speed_kn: float = 100.0,
             counters: AssembleCounters | None = None) -> dict[str, Trajectory]:
    """Group reports per MMSI into ordered, deduped, enriched trajectories.

    Arrivals more than reorder_window_s older than the newest time already
    seen for their MMSI are dropped (counted); anything newer is sorted
    into place. Exact (t, lat, lon) duplicates collapse to one row.
    Consecutive fixes implying more than split_speed_kn start a new
    logical track (MMSI reuse noise), keyed "mmsi/k".
    """
    counters = counters if counters is not None else AssembleCounters()
    per_mmsi: dict[int, list[tuple[float, float, float, float]]] = {}
    max_seen: dict[int, float] = {}
    for r in reports:
        counters.reports += 1
        newest = max_seen.get(r.mmsi)
        if newest is not None and r.timestamp_s < newest - reorder_window_s:
            counters.late_dropped += 1
            continue
        rows = per_mmsi.setdefault(r.mmsi, [])
        item = (r.timestamp_s, r.lat, r.lon, r.sog)
        bisect.insort(rows, item)
        if newest is None or r.timestamp_s > newest:
            max_seen[r.mmsi] = r.timestamp_s

    out: dict[str, Trajectory] = {}
    for mmsi in sorted(per_mmsi):
        rows = per_mmsi[mmsi]
        deduped = []
        seen = set()
        for t, lat, lon, sog in rows:
            key = (t, lat, lon)
            if key in seen:
                counters.duplicates += 1
                continue
            seen.add(key)
            deduped.append((t, lat, lon, sog))
        quads = np.array(deduped, dtype=np.float64).reshape(-1, 4)
        for k, segment in enumerate(_split_tracks(quads, split_speed_kn, counters)):
            track_id = str(mmsi) if k == 0 else f"{mmsi}/{k}"
            out[track_id] = _build_columns(mmsi, track_id, segment, ports)
    return out


def _split_tracks(quads: np.ndarray, split_speed_kn: float,
                  counters: AssembleCounters):
    if quads.shape[0] < 2:
        yield quads
        return
    d = haversine_arrays(quads[:-1, 1], quads[:-1, 2], quads[1:, 1], quads[1:, 2])
    dt = np.diff(quads[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        speed_kn = np.where(dt > 0, d / np.maximum(dt, 1e-12) / KNOT_MS, np.inf)
        speed_kn = np.where(d == 0.0, 0.0, speed_kn)
    cut_points = np.nonzero(speed_kn > split_speed_kn)[0] + 1
    start = 0
    for cut in cut_points:
        counters.track_splits += 1
        yield quads[start:cut]
        start = cut
    yield quads[start:]


# --- JSONL persistence: one FeatureMessage per line, mmsi + track fields ---

def write_trajectories(path, trajs: dict[str, Trajectory]) -> None:
    with open(path, "w") as f:
        for track_id in sorted(trajs):
            traj = trajs[track_id]
            for row in traj.columns:
                rec = {"mmsi": traj.mmsi, "track": track_id}
                rec.update({name: (int(row[i]) if name == "second_of_day" else float(row[i]))
                            for i, name in enumerate(FEATURE_COLUMNS)})
                f.write(json.dumps(rec) + "\n")


def read_trajectories(path) -> dict[str, Trajectory]:
    rows_by_track: dict[str, list] = {}
    mmsi_by_track: dict[str, int] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            track = rec.get("track", str(rec["mmsi"]))
            mmsi_by_track[track] = rec["mmsi"]
            rows_by_track.setdefault(track, []).append(
                [float(rec[name]) for name in FEATURE_COLUMNS])
    return {track: Trajectory(mmsi=mmsi_by_track[track], track_id=track,
                              columns=np.array(rows, dtype=np.float64).reshape(-1, 9))
            for track, rows in rows_by_track.items()}
