"""Deterministic synthetic AIS world.

Vessels move under simple regimes (cruising, fishing loiter, anchored)
and emit position reports at protocol cadence: 2 s when fast, 10 s at
low speed, 180 s at anchor, with a couple percent of timing jitter.
Reception is gated by a satellite-pass coverage window plus i.i.d. drops.
Injected transponder shutdowns suppress emission entirely and are logged
as ground truth, which score_alerts compares against detector output.

Everything is driven by seeded generators (one child stream per vessel),
so identical configs produce byte-identical output.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ScenarioMismatch
from .geo import EARTH_RADIUS_M, GeoPoint, PortIndex, haversine_arrays
from .nmea import build_dynamic_payload, build_static_payload, make_sentences

KNOT_MS = 0.514444

CRUISING, FISHING, ANCHORED = "cruising", "fishing", "anchored"


@dataclass(frozen=True)
class MovementMix:
    cruising: float = 0.6
    fishing: float = 0.3
    anchored: float = 0.1

    def __post_init__(self):
        total = self.cruising + self.fishing + self.anchored
        if abs(total - 1.0) > 1e-9 or min(self.cruising, self.fishing,
                                          self.anchored) < 0:
            raise InvalidConfig(f"movement fractions must be >= 0 and sum to 1, got {total}")


@dataclass(frozen=True)
class CoverageModel:
    pass_period_s: float = 5400.0
    pass_duration_s: float = 240.0
    drop_p: float = 0.02
    phase_s: float = 0.0
    per_vessel_phase: bool = False

    def __post_init__(self):
        if self.pass_period_s <= 0 or not (0 < self.pass_duration_s <= self.pass_period_s):
            raise InvalidConfig("pass duration must be in (0, pass period]")
        if not (0.0 <= self.drop_p < 1.0):
            raise InvalidConfig(f"drop probability {self.drop_p} outside [0, 1)")


@dataclass(frozen=True)
class ShutdownModel:
    rate_per_vessel_day: float = 0.0
    min_duration_s: float = 1800.0
    max_duration_s: float = 172_800.0
    in_coverage_starts: bool = True
    min_start_s: float = 0.0

    def __post_init__(self):
        if self.rate_per_vessel_day < 0:
            raise InvalidConfig("shutdown rate must be >= 0")
        if not (0 < self.min_duration_s <= self.max_duration_s):
            raise InvalidConfig("shutdown durations must satisfy 0 < min <= max")


@dataclass(frozen=True)
class ScenarioConfig:
    n_vessels: int
    duration_s: float
    seed: int
    t0: float = 0.0
    mix: MovementMix = field(default_factory=MovementMix)
    coverage: CoverageModel = field(default_factory=CoverageModel)
    shutdown: ShutdownModel = field(default_factory=ShutdownModel)
    ports: tuple = ()  # GeoPoints; empty means "generate n_ports"
    n_ports: int = 6
    near_port_fraction: float = 0.0
    spawn_min_port_m: float = 10_000.0
    lat_band: tuple = (-55.0, 55.0)
    static_message_p: float = 0.01
    cruise_speed_kn: tuple = (7.0, 13.5)
    fishing_speed_kn: tuple = (1.0, 5.0)

    def __post_init__(self):
        if self.n_vessels < 0 or self.duration_s <= 0:
            raise InvalidConfig("need n_vessels >= 0 and positive duration")
        if not (0.0 <= self.near_port_fraction <= 1.0):
            raise InvalidConfig("near_port_fraction outside [0, 1]")


@dataclass(frozen=True)
class Shutdown:
    mmsi: int
    start: float
    end: float


@dataclass
class GroundTruth:
    shutdowns: list[Shutdown]
    mmsi: np.ndarray      # per emission attempt
    emit_t: np.ndarray
    rx_t: np.ndarray      # nan when not received
    received: np.ndarray  # bool
    suppressed: np.ndarray  # bool: attempt fell inside a shutdown
    lat: np.ndarray
    lon: np.ndarray

    def received_by_mmsi(self) -> dict[int, dict[str, np.ndarray]]:
        out: dict[int, dict[str, np.ndarray]] = {}
        for m in np.unique(self.mmsi):
            mask = (self.mmsi == m) & self.received
            order = np.argsort(self.rx_t[mask], kind="stable")
            out[int(m)] = {
                "rx": self.rx_t[mask][order],
                "lat": self.lat[mask][order],
                "lon": self.lon[mask][order],
            }
        return out


def _quantize3(x: float) -> float:
    return float(f"{x:.3f}")


def cadence_s(speed_kn: float) -> float:
    """Reporting interval by speed band: anchored 180 s, slow 10 s, fast 2 s."""
    if speed_kn < 0.5:
        return 180.0
    if speed_kn < 14.0:
        return 10.0
    return 2.0


def _advance(lat: float, lon: float, bearing_deg: float, dist_m: float):
    """Forward geodesic on the sphere."""
    if dist_m == 0.0:
        return lat, lon
    delta = dist_m / EARTH_RADIUS_M
    theta = math.radians(bearing_deg)
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    phi2 = math.asin(math.sin(phi1) * math.cos(delta)
                     + math.cos(phi1) * math.sin(delta) * math.cos(theta))
    lam2 = lam1 + math.atan2(math.sin(theta) * math.sin(delta) * math.cos(phi1),
                             math.cos(delta) - math.sin(phi1) * math.sin(phi2))
    lon2 = (math.degrees(lam2) + 180.0) % 360.0 - 180.0
    return math.degrees(phi2), lon2


def _gen_ports(rng: np.random.Generator, cfg: ScenarioConfig) -> list[GeoPoint]:
    lo, hi = cfg.lat_band
    return [GeoPoint(float(rng.uniform(lo, hi)), float(rng.uniform(-180.0, 179.99)))
            for _ in range(cfg.n_ports)]


def _spawn_position(rng: np.random.Generator, cfg: ScenarioConfig,
                    ports: list[GeoPoint], near_port: bool):
    lo, hi = cfg.lat_band
    if near_port and ports:
        port = ports[int(rng.integers(len(ports)))]
        lat, lon = _advance(port.lat, port.lon, float(rng.uniform(0, 360)),
                            float(rng.uniform(500.0, 4000.0)))
        return lat, lon
    plat = np.array([p.lat for p in ports]) if ports else np.zeros(0)
    plon = np.array([p.lon for p in ports]) if ports else np.zeros(0)
    for _ in range(1000):
        lat = float(rng.uniform(lo, hi))
        lon = float(rng.uniform(-180.0, 179.99))
        if not len(plat):
            return lat, lon
        if float(np.min(haversine_arrays(lat, lon, plat, plon))) >= cfg.spawn_min_port_m:
            return lat, lon
    raise InvalidConfig("could not place a vessel away from ports")


def _draw_shutdowns(rng: np.random.Generator, cfg: ScenarioConfig,
                    mmsi: int, phase: float) -> list[Shutdown]:
    sd = cfg.shutdown
    if sd.rate_per_vessel_day == 0.0:
        return []
    n = int(rng.poisson(sd.rate_per_vessel_day * cfg.duration_s / 86_400.0))
    lo = cfg.t0 + sd.min_start_s
    hi = cfg.t0 + cfg.duration_s - 60.0
    if n == 0 or hi <= lo:
        return []
    cov = cfg.coverage
    starts = []
    for _ in range(n):
        if sd.in_coverage_starts:
            k_lo = math.ceil((lo - phase) / cov.pass_period_s)
            k_hi = math.floor((hi - phase) / cov.pass_period_s)
            if k_hi < k_lo:
                continue
            k = int(rng.integers(k_lo, k_hi + 1))
            pass_start = phase + k * cov.pass_period_s
            margin = min(30.0, cov.pass_duration_s / 4)
            start = pass_start + float(rng.uniform(margin, cov.pass_duration_s - margin))
        else:
            start = float(rng.uniform(lo, hi))
        dur = math.exp(float(rng.uniform(math.log(sd.min_duration_s),
                                         math.log(sd.max_duration_s))))
        starts.append((start, min(start + dur, cfg.t0 + cfg.duration_s)))
    # keep intervals non-overlapping per vessel
    starts.sort()
    kept: list[Shutdown] = []
    for start, end in starts:
        if kept and start < kept[-1].end:
            continue
        kept.append(Shutdown(mmsi=mmsi, start=start, end=end))
    return kept


def generate(cfg: ScenarioConfig) -> tuple[list[str], GroundTruth]:
    """Run the scenario; returns timestamped NMEA lines and ground truth.

    Lines are "rx_seconds<TAB>!AIVDM..." sorted by reception time; truth
    rows cover every emission attempt including suppressed ones.
    """
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(cfg.n_vessels + 1)
    root = np.random.default_rng(children[0])
    ports = list(cfg.ports) if cfg.ports else _gen_ports(root, cfg)

    mmsis = (200_000_000 + root.choice(700_000_000, size=cfg.n_vessels,
                                       replace=False)).tolist() if cfg.n_vessels else []
    regimes = root.choice([CRUISING, FISHING, ANCHORED], size=cfg.n_vessels,
                          p=[cfg.mix.cruising, cfg.mix.fishing, cfg.mix.anchored]
                          ).tolist() if cfg.n_vessels else []
    near_port = (root.random(cfg.n_vessels) < cfg.near_port_fraction
                 ).tolist() if cfg.n_vessels else []

    lines: list[tuple[float, int, int, int, str]] = []  # sort key + text
    all_shutdowns: list[Shutdown] = []
    tr_mmsi, tr_emit, tr_rx, tr_recv, tr_sup, tr_lat, tr_lon = \
        [], [], [], [], [], [], []

    for v in range(cfg.n_vessels):
        rng = np.random.default_rng(children[v + 1])
        mmsi = int(mmsis[v])
        regime = regimes[v]
        lat, lon = _spawn_position(rng, cfg, ports, bool(near_port[v]))
        heading = float(rng.uniform(0, 360))
        if regime == CRUISING:
            speed = float(rng.uniform(*cfg.cruise_speed_kn))
            drift_deg = 1.0
        elif regime == FISHING:
            speed = float(rng.uniform(*cfg.fishing_speed_kn))
            drift_deg = 15.0
        else:
            speed = 0.0
            drift_deg = 0.0
        cov = cfg.coverage
        phase = cov.phase_s + (float(rng.uniform(0, cov.pass_period_s))
                               if cov.per_vessel_phase else 0.0)
        shutdowns = _draw_shutdowns(rng, cfg, mmsi, phase)
        all_shutdowns.extend(shutdowns)

        t = cfg.t0 + float(rng.uniform(0, cadence_s(speed)))
        seq = 0
        end_t = cfg.t0 + cfg.duration_s
        while t < end_t:
            suppressed = any(s.start <= t < s.end for s in shutdowns)
            in_cov = ((t - phase) % cov.pass_period_s) < cov.pass_duration_s
            received = False
            rx = math.nan
            if not suppressed and in_cov:
                if rng.random() >= cov.drop_p:
                    received = True
                    rx = _quantize3(t + float(rng.uniform(0.2, 1.2)))
            tr_mmsi.append(mmsi)
            tr_emit.append(t)
            tr_rx.append(rx)
            tr_recv.append(received)
            tr_sup.append(suppressed)
            tr_lat.append(lat)
            tr_lon.append(lon)
            if received:
                if regime == FISHING:
                    msg_type = int(rng.choice([18, 18, 18, 19]))
                else:
                    msg_type = int(rng.choice([1, 1, 1, 2, 3]))
                payload = build_dynamic_payload(msg_type, mmsi, lat, lon, speed,
                                                utc_second=int(t) % 60)
                for fi, line in enumerate(make_sentences(payload, 0)):
                    lines.append((rx, mmsi, seq, fi, f"{rx:.3f}\t{line}"))
                seq += 1
                if rng.random() < cfg.static_message_p:
                    srx = _quantize3(rx + 0.05)
                    spayload, fill = build_static_payload(mmsi)
                    for fi, line in enumerate(make_sentences(
                            spayload, fill, seq_id=str(seq % 10))):
                        lines.append((srx, mmsi, seq, fi, f"{srx:.3f}\t{line}"))
                    seq += 1
            # advance to the next emission
            interval = max(2.0, cadence_s(speed) * float(rng.uniform(0.98, 1.02)))
            if speed > 0.0:
                lat, lon = _advance(lat, lon, heading,
                                    speed * KNOT_MS * interval)
                heading = (heading + float(rng.normal(0, drift_deg))) % 360.0
                band_lo, band_hi = cfg.lat_band
                if lat > band_hi - 0.5 or lat < band_lo + 0.5:
                    heading = (180.0 - heading) % 360.0
            t += interval

    lines.sort(key=lambda item: item[:4])
    truth = GroundTruth(
        shutdowns=sorted(all_shutdowns, key=lambda s: (s.mmsi, s.start)),
        mmsi=np.array(tr_mmsi, dtype=np.int64),
        emit_t=np.array(tr_emit, dtype=np.float64),
        rx_t=np.array(tr_rx, dtype=np.float64),
        received=np.array(tr_recv, dtype=bool),
        suppressed=np.array(tr_sup, dtype=bool),
        lat=np.array(tr_lat, dtype=np.float64),
        lon=np.array(tr_lon, dtype=np.float64),
    )
    return [item[4] for item in lines], truth


def scenario_ports(cfg: ScenarioConfig) -> list[GeoPoint]:
    """The port list a scenario will use (generated ones included)."""
    if cfg.ports:
        return list(cfg.ports)
    ss = np.random.SeedSequence(cfg.seed)
    root = np.random.default_rng(ss.spawn(cfg.n_vessels + 1)[0])
    return _gen_ports(root, cfg)


# --- ground truth persistence -------------------------------------------

def write_truth(path, truth: GroundTruth) -> None:
    with open(path, "w") as f:
        for s in truth.shutdowns:
            f.write(json.dumps({"type": "shutdown", "mmsi": s.mmsi,
                                "start": s.start, "end": s.end}) + "\n")
        for i in range(len(truth.mmsi)):
            rx = truth.rx_t[i]
            f.write(json.dumps({
                "type": "msg", "mmsi": int(truth.mmsi[i]),
                "emit": float(truth.emit_t[i]),
                "rx": None if math.isnan(rx) else float(rx),
                "received": bool(truth.received[i]),
                "suppressed": bool(truth.suppressed[i]),
                "lat": float(truth.lat[i]), "lon": float(truth.lon[i]),
            }) + "\n")


def read_truth(path) -> GroundTruth:
    shutdowns = []
    rows = {k: [] for k in ("mmsi", "emit", "rx", "received", "suppressed",
                            "lat", "lon")}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "shutdown":
                shutdowns.append(Shutdown(rec["mmsi"], rec["start"], rec["end"]))
            else:
                rows["mmsi"].append(rec["mmsi"])
                rows["emit"].append(rec["emit"])
                rows["rx"].append(math.nan if rec["rx"] is None else rec["rx"])
                rows["received"].append(rec["received"])
                rows["suppressed"].append(rec["suppressed"])
                rows["lat"].append(rec["lat"])
                rows["lon"].append(rec["lon"])
    return GroundTruth(
        shutdowns=shutdowns,
        mmsi=np.array(rows["mmsi"], dtype=np.int64),
        emit_t=np.array(rows["emit"], dtype=np.float64),
        rx_t=np.array(rows["rx"], dtype=np.float64),
        received=np.array(rows["received"], dtype=bool),
        suppressed=np.array(rows["suppressed"], dtype=bool),
        lat=np.array(rows["lat"], dtype=np.float64),
        lon=np.array(rows["lon"], dtype=np.float64),
    )


# --- scoring --------------------------------------------------------------

@dataclass(frozen=True)
class ScoreReport:
    recall: float | None  # None when no shutdown was eligible
    false_alert_rate: float
    n_eligible: int
    n_matched: int
    n_alerts: int
    n_false_alerts: int


def score_alerts(alerts: list[dict], truth: GroundTruth, match_window_s: float,
                 ports: PortIndex, min_history: int = 50,
                 min_port_dist_m: float = 5000.0) -> ScoreReport:
    """Match alerts to injected shutdowns.

    A shutdown is eligible when the vessel had at least min_history
    received messages before it began and its last received position was
    farther than min_port_dist_m from every port. An alert matches a
    shutdown when its loss time falls within match_window_s of the
    shutdown start; alerts matching no shutdown at all count as false.
    """
    per_vessel = truth.received_by_mmsi()
    known = set(per_vessel)
    for a in alerts:
        if a["mmsi"] not in known:
            raise ScenarioMismatch(f"alert for unknown MMSI {a['mmsi']}")

    eligible: list[Shutdown] = []
    for s in truth.shutdowns:
        hist = per_vessel.get(s.mmsi)
        if hist is None:
            continue
        before = hist["rx"] <= s.start
        if int(np.sum(before)) < min_history:
            continue
        last = int(np.nonzero(before)[0][-1])
        d = ports.nearest_m(GeoPoint(float(hist["lat"][last]),
                                     float(hist["lon"][last])))
        if d > min_port_dist_m:
            eligible.append(s)

    def matches(alert, s: Shutdown) -> bool:
        return alert["mmsi"] == s.mmsi and \
            abs(alert["last_msg_time"] - s.start) <= match_window_s

    n_matched = sum(1 for s in eligible if any(matches(a, s) for a in alerts))
    n_false = sum(1 for a in alerts
                  if not any(matches(a, s) for s in truth.shutdowns))
    return ScoreReport(
        recall=(n_matched / len(eligible)) if eligible else None,
        false_alert_rate=(n_false / len(alerts)) if alerts else 0.0,
        n_eligible=len(eligible),
        n_matched=n_matched,
        n_alerts=len(alerts),
        n_false_alerts=n_false,
    )
