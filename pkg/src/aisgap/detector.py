"""Near-real-time classification of missing-reception events.

Every eligible message stores one pending prediction: "will another
message from this vessel arrive within tau?". The prediction is resolved
exactly once, either by the next message (arrived within tau or not) or
by the event-time watermark passing the deadline. The four outcomes
collapse to three: Ordinary (prediction matched reality, either way),
ModelError (message expected absent but arrived), Abnormal (message
expected but missing) — only Abnormal emits an alert, carrying the
buffered vessel history.

The clock is a watermark (max seen stream time minus an allowed
lateness), never wall time, so replays are deterministic and batched
downlinks behave identically to live feeds.
"""
from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .encoding import DEFAULT_BOUNDS, NormBounds, encode_windows
from .errors import InvalidConfig
from .features import (COL_DP, COL_LAT, COL_LON, COL_SOD, COL_T,
                       second_of_day)
from .geo import GeoPoint, PortIndex, delta_components_arrays
from .nmea import DynamicReport


class Classification(enum.Enum):
    ORDINARY = "ordinary"
    MODEL_ERROR = "model_error"
    ABNORMAL = "abnormal"


def classify_event(predicted_expected: bool, message_arrived_within_tau: bool) -> Classification:
    """Collapse the prediction/outcome pair into the three-way verdict."""
    if predicted_expected and not message_arrived_within_tau:
        return Classification.ABNORMAL
    if not predicted_expected and message_arrived_within_tau:
        return Classification.MODEL_ERROR
    return Classification.ORDINARY


@dataclass(frozen=True)
class DetectorConfig:
    tau_s: float = 600.0
    w: int = 25
    min_history: int = 50
    min_port_dist_m: float = 5000.0
    lateness_s: float = 120.0
    buffer_capacity: int = 128
    evict_after_s: float = 7 * 86_400.0
    predict_batch: int = 512
    threshold: float = 0.5
    emit_classifications: bool = False

    def __post_init__(self):
        if self.tau_s <= 0 or self.w < 1 or self.min_history < self.w:
            raise InvalidConfig("need tau_s > 0 and min_history >= w >= 1")
        if self.buffer_capacity < max(self.w, self.min_history):
            raise InvalidConfig("buffer capacity below max(w, min_history)")
        if self.lateness_s < 0:
            raise InvalidConfig("lateness must be >= 0")


@dataclass
class Pending:
    made_at: float
    deadline: float
    window: np.ndarray  # (w, 9) snapshot
    owner: int = -1
    prob: float | None = None
    expected: bool | None = None
    resolved: bool = False
    alerted: bool = False


@dataclass
class VesselState:
    mmsi: int
    buffer: deque = field(default_factory=deque)
    last_msg_time: float | None = None
    lifetime: int = 0
    pending: Pending | None = None
    last_loss_pending: Pending | None = None  # for "reappeared" follow-ups
    last_activity: float = 0.0
    late_arrivals: int = 0


def new_vessel_state(mmsi: int, cfg: DetectorConfig) -> VesselState:
    return VesselState(mmsi=mmsi, buffer=deque(maxlen=cfg.buffer_capacity))


@dataclass
class DetectorCounters:
    messages: int = 0
    late_arrivals: int = 0
    predictions: int = 0
    resolutions: int = 0
    alerts: int = 0
    model_errors: int = 0
    ordinary: int = 0
    reappearances: int = 0
    evictions: int = 0
    unresolved_at_end: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _feature_row(state: VesselState, r: DynamicReport, ports: PortIndex) -> np.ndarray:
    if state.last_msg_time is None:
        dt = dv = dh = 0.0
    else:
        dt = r.timestamp_s - state.last_msg_time
        prev = state.buffer[-1]
        dva, dha = delta_components_arrays(prev[COL_LAT], prev[COL_LON],
                                           r.lat, r.lon)
        dv, dh = float(dva), float(dha)
    dp = ports.nearest_m(GeoPoint(r.lat, r.lon))
    return np.array([r.timestamp_s, r.lat, r.lon, r.sog, dt, dv, dh, dp,
                     float(second_of_day(r.timestamp_s))])


class StreamDetector:
    """Single-threaded replay/live engine over decoded reports.

    Prediction requests are batched between watermark steps, which changes
    nothing observable (predictions are pure functions of their window
    snapshot) but keeps the model in large matrix calls.
    """

    def __init__(self, model, ports: PortIndex, cfg: DetectorConfig,
                 bounds: NormBounds = DEFAULT_BOUNDS):
        self.model = model
        self.ports = ports
        self.cfg = cfg
        self.bounds = bounds
        self.states: dict[int, VesselState] = {}
        self.counters = DetectorCounters()
        self._heap: list = []
        self._serial = 0
        self._max_seen = -np.inf

    # --- phase 1: state transitions, no model calls ---

    def _resolve(self, state: VesselState, pending: Pending, arrived: bool,
                 events: list) -> None:
        pending.resolved = True
        if state.pending is pending:
            state.pending = None
        snapshot = None
        if not arrived:
            snapshot = [row.copy() for row in state.buffer]
            state.last_loss_pending = pending
        events.append(("resolve", state.mmsi, pending, arrived, snapshot))

    def _expire(self, watermark: float, events: list) -> None:
        while self._heap and self._heap[0][0] < watermark:
            _, mmsi, _, pending = heapq.heappop(self._heap)
            if pending.resolved:
                continue
            state = self.states.get(mmsi)
            if state is None:
                continue
            self._resolve(state, pending, arrived=False, events=events)

    def _step(self, r: DynamicReport, events: list, to_predict: list) -> None:
        self.counters.messages += 1
        watermark = max(self._max_seen, r.timestamp_s) - self.cfg.lateness_s
        self._expire(watermark, events)
        self._max_seen = max(self._max_seen, r.timestamp_s)
        state = self.states.get(r.mmsi)
        if state is None:
            state = new_vessel_state(r.mmsi, self.cfg)
            self.states[r.mmsi] = state
        if state.last_msg_time is not None and r.timestamp_s < state.last_msg_time:
            self.counters.late_arrivals += 1
            state.late_arrivals += 1
            return
        if state.pending is not None and not state.pending.resolved:
            gap = r.timestamp_s - state.last_msg_time
            self._resolve(state, state.pending, arrived=(gap <= self.cfg.tau_s),
                          events=events)
        if state.last_loss_pending is not None:
            events.append(("reappear", r.mmsi, state.last_loss_pending,
                           r.timestamp_s, None))
            state.last_loss_pending = None
        row = _feature_row(state, r, self.ports)
        state.buffer.append(row)
        state.lifetime += 1
        state.last_msg_time = r.timestamp_s
        state.last_activity = r.timestamp_s
        if state.lifetime >= self.cfg.min_history \
                and row[COL_DP] > self.cfg.min_port_dist_m:
            window = np.stack(list(state.buffer)[-self.cfg.w:])
            pending = Pending(made_at=r.timestamp_s,
                              deadline=r.timestamp_s + self.cfg.tau_s,
                              window=window, owner=r.mmsi)
            state.pending = pending
            self._serial += 1
            heapq.heappush(self._heap, (pending.deadline, r.mmsi, self._serial,
                                        pending))
            to_predict.append(pending)
            self.counters.predictions += 1

    # --- phase 2: batched prediction + event materialization ---

    def _predict(self, pendings: list) -> None:
        if not pendings:
            return
        windows = np.stack([p.window for p in pendings])
        vh, vp = encode_windows(windows, self.bounds)
        probs = self.model.predict_proba(vh, vp)
        for p, prob in zip(pendings, probs):
            p.prob = float(prob)
            p.expected = bool(prob > self.cfg.threshold)

    def _materialize(self, events: list) -> list[dict]:
        out = []
        for kind, mmsi, pending, arg, snapshot in events:
            if kind == "resolve":
                arrived = arg
                outcome = classify_event(pending.expected, arrived)
                self.counters.resolutions += 1
                if outcome is Classification.ABNORMAL:
                    self.counters.alerts += 1
                    pending.alerted = True
                    out.append({
                        "type": "alert", "mmsi": mmsi,
                        "loss_lat": float(snapshot[-1][COL_LAT]),
                        "loss_lon": float(snapshot[-1][COL_LON]),
                        "last_msg_time": float(snapshot[-1][COL_T]),
                        "tau_s": self.cfg.tau_s,
                        "probability": pending.prob,
                        "history": [[float(v) for v in row] for row in snapshot],
                    })
                elif outcome is Classification.MODEL_ERROR:
                    self.counters.model_errors += 1
                else:
                    self.counters.ordinary += 1
                if self.cfg.emit_classifications:
                    out.append({"type": "classification", "mmsi": mmsi,
                                "made_at": pending.made_at,
                                "expected": pending.expected,
                                "arrived": arrived,
                                "outcome": outcome.value})
            elif kind == "reappear":
                if pending.alerted:
                    self.counters.reappearances += 1
                    out.append({"type": "reappeared", "mmsi": mmsi, "t": arg})
        return out

    def _evict_idle(self) -> None:
        cutoff = self._max_seen - self.cfg.evict_after_s
        idle = [m for m, st in self.states.items()
                if st.last_activity < cutoff
                and (st.pending is None or st.pending.resolved)]
        for m in idle:
            del self.states[m]
            self.counters.evictions += 1

    def run(self, reports):
        """Process a report stream; yields alert/info records, then a summary."""
        events: list = []
        to_predict: list = []
        for r in reports:
            self._step(r, events, to_predict)
            if len(to_predict) >= self.cfg.predict_batch or len(events) >= 4096:
                self._predict(to_predict)
                yield from self._materialize(events)
                events.clear()
                to_predict.clear()
                self._evict_idle()
        self._predict(to_predict)
        yield from self._materialize(events)
        self.counters.unresolved_at_end = sum(
            1 for st in self.states.values()
            if st.pending is not None and not st.pending.resolved)
        yield {"type": "summary", **self.counters.as_dict()}


def run_stream(reports, model, ports: PortIndex, cfg: DetectorConfig,
               bounds: NormBounds = DEFAULT_BOUNDS):
    """Convenience wrapper; returns (records, counters)."""
    det = StreamDetector(model, ports, cfg, bounds)
    records = list(det.run(reports))
    return records, det.counters


# --- single-state stepping (the per-vessel contract, unbatched) -----------

def on_message(state: VesselState, r: DynamicReport, predict_fn,
               ports: PortIndex, cfg: DetectorConfig) -> Classification | None:
    """Sequential per-vessel transition with an immediate predictor.

    predict_fn maps a (w, 9) window to a probability. Returns the
    classification when this arrival resolves a pending prediction.
    """
    if r.mmsi != state.mmsi:
        raise ValueError(f"report for {r.mmsi} fed to state of {state.mmsi}")
    if state.last_msg_time is not None and r.timestamp_s < state.last_msg_time:
        state.late_arrivals += 1
        return None
    outcome = None
    if state.pending is not None and not state.pending.resolved:
        gap = r.timestamp_s - state.last_msg_time
        arrived = gap <= cfg.tau_s
        state.pending.resolved = True
        outcome = classify_event(state.pending.expected, arrived)
        state.pending = None
    row = _feature_row(state, r, ports)
    state.buffer.append(row)
    state.lifetime += 1
    state.last_msg_time = r.timestamp_s
    state.last_activity = r.timestamp_s
    if state.lifetime >= cfg.min_history and row[COL_DP] > cfg.min_port_dist_m:
        window = np.stack(list(state.buffer)[-cfg.w:])
        prob = float(predict_fn(window))
        state.pending = Pending(made_at=r.timestamp_s,
                                deadline=r.timestamp_s + cfg.tau_s,
                                window=window, prob=prob,
                                expected=prob > cfg.threshold)
    return outcome


def on_clock(state: VesselState, now: float,
             cfg: DetectorConfig) -> tuple[Classification, dict | None] | None:
    """Watermark expiry for one vessel: resolve an overdue pending."""
    p = state.pending
    if p is None or p.resolved or now <= state.last_msg_time + cfg.tau_s:
        return None
    p.resolved = True
    state.pending = None
    outcome = classify_event(p.expected, False)
    alert = None
    if outcome is Classification.ABNORMAL:
        p.alerted = True
        state.last_loss_pending = p
        alert = {
            "type": "alert", "mmsi": state.mmsi,
            "loss_lat": float(state.buffer[-1][COL_LAT]),
            "loss_lon": float(state.buffer[-1][COL_LON]),
            "last_msg_time": float(state.buffer[-1][COL_T]),
            "tau_s": cfg.tau_s,
            "probability": p.prob,
            "history": [[float(v) for v in row] for row in state.buffer],
        }
    return outcome, alert


def predictor_for(model, cfg: DetectorConfig,
                  bounds: NormBounds = DEFAULT_BOUNDS):
    """Single-window probability function over a trained model."""
    def predict_fn(window: np.ndarray) -> float:
        vh, vp = encode_windows(window[None, :, :], bounds)
        return float(model.predict_proba(vh, vp)[0])
    return predict_fn
