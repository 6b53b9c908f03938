import numpy as np
import pytest

from aisgap.detector import (Classification, DetectorConfig, StreamDetector,
                             classify_event, new_vessel_state, on_clock,
                             on_message, run_stream)
from aisgap.errors import InvalidConfig
from aisgap.geo import GeoPoint, PortIndex
from aisgap.nmea import DynamicReport

CFG = DetectorConfig(tau_s=600.0, w=5, min_history=8, min_port_dist_m=5000.0,
                     lateness_s=120.0, buffer_capacity=16)


@pytest.fixture(scope="module")
def ports():
    return PortIndex([GeoPoint(0.0, 0.0)])


class StubModel:
    """Predicts 'expected' iff the window's last gap is under 300 s."""

    def predict_proba(self, vh, vp, batch_size=0):
        # vh column 0 is symlog(delta_t); symlog(300) ~ 5.707
        return (vh[:, -1, 0] < np.log1p(300.0)).astype(np.float64) * 0.98 + 0.01


def rep(mmsi, t, lat=10.0, lon=10.0, sog=8.0):
    return DynamicReport(mmsi=mmsi, msg_type=1, timestamp_s=t, lat=lat,
                         lon=lon, sog=sog)


def test_classify_event_four_cases():
    assert classify_event(False, False) is Classification.ORDINARY
    assert classify_event(False, True) is Classification.MODEL_ERROR
    assert classify_event(True, True) is Classification.ORDINARY
    assert classify_event(True, False) is Classification.ABNORMAL


def test_config_validation():
    with pytest.raises(InvalidConfig):
        DetectorConfig(buffer_capacity=4, w=5, min_history=8)
    with pytest.raises(InvalidConfig):
        DetectorConfig(tau_s=-1)


def steady_reports(mmsi=7, n=20, gap=60.0, t0=0.0, lat=10.0):
    return [rep(mmsi, t0 + i * gap, lat=lat) for i in range(n)]


def test_no_prediction_before_min_history(ports):
    det = StreamDetector(StubModel(), ports, CFG)
    out = list(det.run(steady_reports(n=CFG.min_history - 1)))
    assert det.counters.predictions == 0
    assert out[-1]["type"] == "summary"


def test_prediction_starts_at_min_history(ports):
    det = StreamDetector(StubModel(), ports, CFG)
    list(det.run(steady_reports(n=CFG.min_history)))
    assert det.counters.predictions == 1


def test_no_prediction_in_port_zone(ports):
    # 2 km from the port at (0,0): eligible history but blocked by distance
    det = StreamDetector(StubModel(), ports, CFG)
    near = [rep(7, i * 60.0, lat=0.018, lon=0.0) for i in range(20)]
    list(det.run(near))
    assert det.counters.predictions == 0


def test_arrival_within_tau_resolves_ordinary(ports):
    cfg = DetectorConfig(tau_s=600.0, w=5, min_history=8, lateness_s=120.0,
                         buffer_capacity=16, emit_classifications=True)
    det = StreamDetector(StubModel(), ports, cfg)
    out = list(det.run(steady_reports(n=12)))
    cls = [r for r in out if r["type"] == "classification"]
    assert cls and all(c["outcome"] == "ordinary" for c in cls)
    assert all(c["arrived"] for c in cls)


def test_expiry_emits_abnormal_alert_with_history(ports):
    reports = steady_reports(n=12)  # predictions active, expecting arrivals
    # silence afterwards; a later message from another vessel drives the clock
    reports += [rep(99, 2000.0)]
    det = StreamDetector(StubModel(), ports, CFG)
    out = list(det.run(reports))
    alerts = [r for r in out if r["type"] == "alert"]
    assert len(alerts) == 1
    a = alerts[0]
    assert a["mmsi"] == 7
    assert a["last_msg_time"] == 11 * 60.0
    assert a["tau_s"] == 600.0
    assert a["probability"] > 0.5
    assert len(a["history"]) == 12
    assert a["loss_lat"] == 10.0


def test_not_expected_expiry_is_ordinary_no_alert(ports):
    cfg = DetectorConfig(tau_s=600.0, w=5, min_history=8, lateness_s=120.0,
                         buffer_capacity=16, emit_classifications=True)
    # slow cadence (400 s): StubModel predicts "not expected"
    reports = steady_reports(n=10, gap=400.0)
    reports += [rep(99, 400.0 * 9 + 5000.0)]
    det = StreamDetector(StubModel(), ports, cfg)
    out = list(det.run(reports))
    alerts = [r for r in out if r["type"] == "alert"]
    assert not alerts
    cls = [r for r in out if r["type"] == "classification" and r["mmsi"] == 7]
    assert cls[-1]["outcome"] == "ordinary"
    assert cls[-1]["arrived"] is False


def test_late_arrival_counted_not_processed(ports):
    det = StreamDetector(StubModel(), ports, CFG)
    reports = steady_reports(n=10)
    reports.insert(5, rep(7, 10.0))  # 10 s is far older than 4*60
    list(det.run(reports))
    assert det.counters.late_arrivals == 1


def test_exactly_once_resolution(ports):
    cfg = DetectorConfig(tau_s=600.0, w=5, min_history=8, lateness_s=120.0,
                         buffer_capacity=16, emit_classifications=True)
    det = StreamDetector(StubModel(), ports, cfg)
    reports = steady_reports(n=30)
    reports += [rep(7, 30 * 60.0 + 5000.0)]  # distant revival after silence
    reports += [rep(99, 30 * 60.0 + 20_000.0)]
    out = list(det.run(reports))
    cls = [r for r in out if r["type"] == "classification" and r["mmsi"] == 7]
    # predictions made from message index 7 (min_history) through the revival
    assert det.counters.predictions == 30 - 8 + 1 + 1
    assert len(cls) == det.counters.predictions - det.counters.unresolved_at_end
    assert det.counters.resolutions == len(cls)


def test_reappeared_record_after_alert(ports):
    reports = steady_reports(n=12)
    reports += [rep(99, 3000.0)]         # watermark driver -> alert for 7
    reports += [rep(7, 4000.0)]          # vessel 7 comes back
    det = StreamDetector(StubModel(), ports, CFG)
    out = list(det.run(reports))
    kinds = [r["type"] for r in out]
    assert "alert" in kinds and "reappeared" in kinds
    assert kinds.index("alert") < kinds.index("reappeared")
    re = next(r for r in out if r["type"] == "reappeared")
    assert re["mmsi"] == 7 and re["t"] == 4000.0


def test_partition_isolation_two_vessels(ports):
    # vessel 7 goes dark, vessel 8 keeps sailing
    reports = sorted(steady_reports(7, n=12) + steady_reports(8, n=60),
                     key=lambda r: r.timestamp_s)
    det = StreamDetector(StubModel(), ports, CFG)
    out = list(det.run(reports))
    alerts = [r for r in out if r["type"] == "alert"]
    assert [a["mmsi"] for a in alerts] == [7]


def test_replay_determinism(ports):
    reports = sorted(steady_reports(7, n=40) + steady_reports(8, n=25),
                     key=lambda r: r.timestamp_s)
    out1, c1 = run_stream(reports, StubModel(), ports, CFG)
    out2, c2 = run_stream(reports, StubModel(), ports, CFG)
    assert out1 == out2
    assert c1.as_dict() == c2.as_dict()


def test_memory_bound_ring_buffer(ports):
    det = StreamDetector(StubModel(), ports, CFG)
    list(det.run(steady_reports(n=500)))
    st = det.states[7]
    assert len(st.buffer) == CFG.buffer_capacity
    assert st.lifetime == 500


def test_eviction_after_inactivity(ports):
    cfg = DetectorConfig(tau_s=600.0, w=5, min_history=8, lateness_s=120.0,
                         buffer_capacity=16, evict_after_s=3600.0,
                         predict_batch=4)
    det = StreamDetector(StubModel(), ports, cfg)
    reports = steady_reports(7, n=10)
    reports += [rep(8, 10_000.0 + i * 60.0) for i in range(10)]
    list(det.run(reports))
    assert 7 not in det.states
    assert det.counters.evictions == 1


def test_unresolved_at_end_counted(ports):
    det = StreamDetector(StubModel(), ports, CFG)
    list(det.run(steady_reports(n=12)))  # stream ends within tau
    assert det.counters.unresolved_at_end == 1


# --- single-state stepping -----------------------------------------------------

def fixed_predictor(prob):
    return lambda window: prob


def test_on_message_49th_no_prediction(ports):
    cfg = DetectorConfig(tau_s=600.0, w=25, min_history=50,
                         buffer_capacity=64)
    state = new_vessel_state(7, cfg)
    for i in range(49):
        out = on_message(state, rep(7, i * 60.0), fixed_predictor(0.9),
                         ports, cfg)
        assert out is None
    assert state.pending is None
    on_message(state, rep(7, 49 * 60.0), fixed_predictor(0.9), ports, cfg)
    assert state.pending is not None  # 50th lifetime message


def test_on_message_resolves_case3(ports):
    state = new_vessel_state(7, CFG)
    for i in range(9):
        on_message(state, rep(7, i * 60.0), fixed_predictor(0.9), ports, CFG)
    out = on_message(state, rep(7, 9 * 60.0 + 300.0), fixed_predictor(0.9),
                     ports, CFG)
    assert out is Classification.ORDINARY


def test_on_message_mmsi_check(ports):
    state = new_vessel_state(7, CFG)
    with pytest.raises(ValueError):
        on_message(state, rep(8, 0.0), fixed_predictor(0.5), ports, CFG)


def test_on_clock_cases(ports):
    # expected -> abnormal with alert carrying the full buffered history
    state = new_vessel_state(7, CFG)
    for i in range(10):
        on_message(state, rep(7, i * 60.0), fixed_predictor(0.9), ports, CFG)
    assert on_clock(state, state.last_msg_time + 600.0, CFG) is None
    outcome, alert = on_clock(state, state.last_msg_time + 600.1, CFG)
    assert outcome is Classification.ABNORMAL
    assert alert is not None and alert["mmsi"] == 7
    assert len(alert["history"]) == 10
    assert on_clock(state, 1e9, CFG) is None  # consumed exactly once

    # not expected -> ordinary, no alert
    state = new_vessel_state(7, CFG)
    for i in range(10):
        on_message(state, rep(7, i * 60.0), fixed_predictor(0.1), ports, CFG)
    outcome, alert = on_clock(state, state.last_msg_time + 601.0, CFG)
    assert outcome is Classification.ORDINARY
    assert alert is None


def test_stream_matches_single_state_stepping(ports):
    """The batched engine equals sequential on_message/on_clock stepping."""
    cfg = DetectorConfig(tau_s=600.0, w=5, min_history=8, lateness_s=120.0,
                         buffer_capacity=16, emit_classifications=True,
                         predict_batch=3)
    rng = np.random.default_rng(5)
    reports = []
    for mmsi in (7, 8):
        t = 0.0
        for _ in range(60):
            t += float(rng.choice([30.0, 60.0, 800.0], p=[0.5, 0.4, 0.1]))
            reports.append(rep(mmsi, t))
    reports.sort(key=lambda r: r.timestamp_s)

    out, _ = run_stream(reports, StubModel(), ports, cfg)
    stream_outcomes = [(r["mmsi"], r["made_at"], r["outcome"])
                       for r in out if r["type"] == "classification"]

    # sequential reference: per-vessel stepping with an explicit watermark
    model = StubModel()
    from aisgap.encoding import encode_windows

    def predict_fn(window):
        vh, vp = encode_windows(window[None])
        return float(model.predict_proba(vh, vp)[0])

    states = {m: new_vessel_state(m, cfg) for m in (7, 8)}
    seq = []
    max_seen = -np.inf
    for r in reports:
        wm = max(max_seen, r.timestamp_s) - cfg.lateness_s
        for m in sorted(states):
            st = states[m]
            while st.pending is not None and not st.pending.resolved \
                    and wm > st.last_msg_time + cfg.tau_s:
                made = st.pending.made_at
                outcome, _ = on_clock(st, wm, cfg)
                seq.append((m, made, outcome.value))
        st = states[r.mmsi]
        made = st.pending.made_at if st.pending else None
        outcome = on_message(st, r, predict_fn, ports, cfg)
        if outcome is not None:
            seq.append((r.mmsi, made, outcome.value))
        max_seen = max(max_seen, r.timestamp_s)
    assert sorted(stream_outcomes) == sorted(seq)
