"""Normalization of samples into model inputs.

A window becomes two pieces: a history matrix (w x 6) holding only
relative quantities per message (sign-preserving log of the time gap and
of the north/east displacements, sin/cos of the second of day, linearly
normalized speed), and an 11-value vector pinning the latest position
precisely via a degree/minute/second decomposition with cyclic parts.
The history carries no absolute time or position, so encodings are
invariant to day shifts and to translating the whole track.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import DegenerateRange
from .features import (COL_DDH, COL_DDV, COL_DT, COL_LAT, COL_LON, COL_SOD,
                       COL_SOG, FeatureMessage)

H_DIM = 6
P_DIM = 11


@dataclass(frozen=True)
class NormBounds:
    speed_min: float = 0.0
    speed_max: float = 102.2  # AIS speed-over-ground field maximum
    day_period_s: float = 86_400.0
    minsec_period: float = 60.0
    lat_deg_min: float = -90.0
    lat_deg_max: float = 90.0


DEFAULT_BOUNDS = NormBounds()


def cyclic_norm(x, lo: float, hi: float):
    """Map x in [lo, hi) onto the unit circle; returns (sin, cos) parts."""
    if hi <= lo:
        raise DegenerateRange(f"cyclic range [{lo}, {hi}] is empty")
    phase = 2.0 * np.pi * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
    return np.sin(phase), np.cos(phase)


def linear_norm(x, lo: float, hi: float):
    """Map x onto [0, 1], clamping out-of-range inputs to the edges."""
    if hi <= lo:
        raise DegenerateRange(f"linear range [{lo}, {hi}] is empty")
    return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def symlog(x):
    """Sign-preserving log compression: sign(x) * ln(1 + |x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def encode_history(window, bounds: NormBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """(w, 9) feature rows -> (w, 6) normalized history matrix."""
    rows = _as_rows(window)
    return _encode_history_batch(rows[None, :, :], bounds)[0]


def _encode_history_batch(wins: np.ndarray, bounds: NormBounds) -> np.ndarray:
    n, w, _ = wins.shape
    out = np.empty((n, w, H_DIM), dtype=np.float64)
    out[:, :, 0] = symlog(wins[:, :, COL_DT])
    out[:, :, 1] = symlog(wins[:, :, COL_DDV])
    out[:, :, 2] = symlog(wins[:, :, COL_DDH])
    s, c = cyclic_norm(wins[:, :, COL_SOD], 0.0, bounds.day_period_s)
    out[:, :, 3] = s
    out[:, :, 4] = c
    out[:, :, 5] = linear_norm(wins[:, :, COL_SOG], bounds.speed_min, bounds.speed_max)
    return out


def encode_position(last, bounds: NormBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """Latest position -> 11 values.

    Layout: [linear signed integer latitude degree] then sin/cos pairs for
    latitude minute, latitude second, longitude (cyclic over the full
    circle, phase 0 at Greenwich so the antimeridian is seamless),
    longitude minute, longitude second. Minutes and seconds come from the
    coordinate magnitudes; only the degree slots carry sign.
    """
    if isinstance(last, FeatureMessage):
        lat, lon = last.lat, last.lon
    else:
        row = np.asarray(last, dtype=np.float64)
        lat, lon = float(row[COL_LAT]), float(row[COL_LON])
    return _encode_position_batch(np.array([[lat, lon]]), bounds)[0]


def _dms(mag: np.ndarray):
    deg = np.floor(mag)
    rem = (mag - deg) * 60.0
    minute = np.floor(rem)
    sec = (rem - minute) * 60.0
    return deg, minute, sec


def _encode_position_batch(latlon: np.ndarray, bounds: NormBounds) -> np.ndarray:
    lat = latlon[:, 0]
    lon = latlon[:, 1]
    out = np.empty((latlon.shape[0], P_DIM), dtype=np.float64)
    lat_deg, lat_min, lat_sec = _dms(np.abs(lat))
    out[:, 0] = linear_norm(np.sign(lat) * lat_deg, bounds.lat_deg_min,
                            bounds.lat_deg_max)
    out[:, 1], out[:, 2] = cyclic_norm(lat_min, 0.0, bounds.minsec_period)
    out[:, 3], out[:, 4] = cyclic_norm(lat_sec, 0.0, bounds.minsec_period)
    out[:, 5], out[:, 6] = cyclic_norm(np.mod(lon, 360.0), 0.0, 360.0)
    _, lon_min, lon_sec = _dms(np.abs(lon))
    out[:, 7], out[:, 8] = cyclic_norm(lon_min, 0.0, bounds.minsec_period)
    out[:, 9], out[:, 10] = cyclic_norm(lon_sec, 0.0, bounds.minsec_period)
    return out


@dataclass(frozen=True)
class EncodedSample:
    v_h: np.ndarray  # (w, 6)
    v_p: np.ndarray  # (11,)
    label: bool


def encode_sample(sample, bounds: NormBounds = DEFAULT_BOUNDS) -> EncodedSample:
    win = _as_rows(sample.window)
    return EncodedSample(v_h=encode_history(win, bounds),
                         v_p=encode_position(win[-1], bounds),
                         label=sample.label)


def encode_windows(wins: np.ndarray, bounds: NormBounds = DEFAULT_BOUNDS):
    """(n, w, 9) raw windows -> (n, w, 6) histories and (n, 11) positions."""
    vh = _encode_history_batch(wins, bounds)
    vp = _encode_position_batch(wins[:, -1, [COL_LAT, COL_LON]], bounds)
    return vh, vp


def encode_dataset(ds: Dataset, bounds: NormBounds = DEFAULT_BOUNDS):
    """Dataset -> (VH (n,w,6), VP (n,11), y (n,)) training arrays."""
    wins = ds.windows()
    vh, vp = encode_windows(wins, bounds)
    return vh, vp, ds.labels.astype(np.float64)


def _as_rows(window) -> np.ndarray:
    if isinstance(window, np.ndarray):
        return window
    return np.stack([m.as_row() if isinstance(m, FeatureMessage) else np.asarray(m)
                     for m in window])


# --- flat binary cache -------------------------------------------------
# layout: magic "AISGAPE1" | uint32 LE: count, w, h_dim, p_dim |
#         VH as count*w*h_dim float64 LE | VP as count*p_dim float64 LE |
#         labels as count uint8

_MAGIC = b"AISGAPE1"


def save_encoded(path, vh: np.ndarray, vp: np.ndarray, y: np.ndarray) -> None:
    n, w, hd = vh.shape
    if vp.shape != (n, P_DIM) or y.shape[0] != n:
        raise ValueError("inconsistent array shapes")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4I", n, w, hd, vp.shape[1]))
        f.write(np.ascontiguousarray(vh, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(vp, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(y > 0.5, dtype=np.uint8).tobytes())


def load_encoded(path):
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an encoded-dataset cache")
        n, w, hd, pd = struct.unpack("<4I", f.read(16))
        vh = np.frombuffer(f.read(n * w * hd * 8), dtype="<f8").reshape(n, w, hd)
        vp = np.frombuffer(f.read(n * pd * 8), dtype="<f8").reshape(n, pd)
        y = np.frombuffer(f.read(n), dtype=np.uint8).astype(np.float64)
    return vh.copy(), vp.copy(), y
