"""Shared test utilities: oracles and small builders."""
from __future__ import annotations

import numpy as np

from aisgap.features import Trajectory
from aisgap.nn import Tensor


def xor_checksum(body: str) -> str:
    """Independent XOR oracle over the byte string."""
    from functools import reduce
    from operator import xor
    return format(reduce(xor, body.encode(), 0), "02X")


def finite_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    # differences below the central-difference noise floor (~eps_machine /
    # (2*eps) on an O(1) loss) carry no signal, e.g. directions with a true
    # zero gradient such as attention key biases
    diff = np.where(diff < 1e-9, 0.0, diff)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(diff / denom))


def gradcheck(build_loss, params: list[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between autograd and finite differences.

    build_loss() must rebuild the graph from the params' current data and
    return the scalar loss Tensor.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference(lambda: float(build_loss().data), p.data, eps)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def make_trajectory(times, lats=None, lons=None, sogs=None, mmsi=1234,
                    dist_port_m=20_000.0) -> Trajectory:
    """Trajectory with plain columns; deltas derived from the inputs."""
    from aisgap.geo import delta_components_arrays
    t = np.asarray(times, dtype=np.float64)
    n = len(t)
    lat = np.full(n, 10.0) if lats is None else np.asarray(lats, dtype=np.float64)
    lon = np.full(n, 20.0) if lons is None else np.asarray(lons, dtype=np.float64)
    sog = np.full(n, 8.0) if sogs is None else np.asarray(sogs, dtype=np.float64)
    cols = np.zeros((n, 9))
    cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3] = t, lat, lon, sog
    if n > 1:
        cols[1:, 4] = np.diff(t)
        dv, dh = delta_components_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
        cols[1:, 5] = dv
        cols[1:, 6] = dh
    cols[:, 7] = dist_port_m
    cols[:, 8] = np.floor(t % 86_400)
    return Trajectory(mmsi=mmsi, track_id=str(mmsi), columns=cols)
