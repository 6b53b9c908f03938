"""Balanced self-supervised datasets of fixed-size message windows.

A sample is a window of w consecutive messages from one trajectory,
labeled true when another message from the same vessel arrives within
tau_s of the window's last message. Windows whose outcome cannot be
known (trajectory ends less than tau_s before the collection period
does) are right-censored and excluded rather than labeled.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyDataset, InsufficientSamples, MissingPeriod
from .features import (COL_DP, COL_LAT, COL_LON, COL_T, FEATURE_COLUMNS,
                       Trajectory)
from .geo import GeoPoint, haversine_arrays


@dataclass(frozen=True)
class DatasetConfig:
    w: int = 25
    tau_s: float = 600.0
    min_history: int = 50
    min_port_dist_m: float = 5000.0
    target_size: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("w must be >= 1")
        if self.tau_s <= 0:
            raise ValueError("tau_s must be positive")
        if self.min_history < self.w:
            raise ValueError("min_history must be >= w")
        if self.target_size % 2:
            raise ValueError("target_size must be even for a 50/50 split")


@dataclass(frozen=True)
class Sample:
    window: np.ndarray  # (w, 9) feature rows
    label: bool
    loss_point: GeoPoint
    mmsi: int
    track_id: str

    @property
    def last_t(self) -> float:
        return float(self.window[-1, COL_T])


@dataclass
class Dataset:
    samples: list[Sample]
    config: DatasetConfig

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=bool)

    def windows(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.config.w, 9))
        return np.stack([s.window for s in self.samples])


def label_window(traj: Trajectory, end_idx: int, cfg: DatasetConfig,
                 period_end: float) -> Sample | None:
    """Window ending at end_idx with its arrival-within-tau label.

    Returns None when the window is right-censored: end_idx is the last
    message and the collection period stops less than tau_s later.
    """
    if end_idx < cfg.w - 1:
        raise ValueError(f"end_idx {end_idx} leaves no room for w={cfg.w}")
    t_end = float(traj.t[end_idx])
    if end_idx + 1 < len(traj):
        label = (float(traj.t[end_idx + 1]) - t_end) <= cfg.tau_s
    else:
        if period_end - t_end < cfg.tau_s:
            return None
        label = False
    window = traj.window(end_idx, cfg.w)
    return Sample(window=window, label=label,
                  loss_point=GeoPoint(float(window[-1, COL_LAT]),
                                      float(window[-1, COL_LON])),
                  mmsi=traj.mmsi, track_id=traj.track_id)


def eligible(traj: Trajectory, end_idx: int, cfg: DatasetConfig) -> bool:
    """History length and port-distance conditions at the window's end."""
    if end_idx < 0 or end_idx >= len(traj):
        raise ValueError(f"index {end_idx} out of range")
    if end_idx + 1 < cfg.min_history:
        return False
    return float(traj.dist_port_m[end_idx]) > cfg.min_port_dist_m


def _candidates(traj: Trajectory, cfg: DatasetConfig, period_end: float):
    """(true_indices, false_indices) of eligible, labelable windows."""
    n = len(traj)
    first = max(cfg.w - 1, cfg.min_history - 1)
    if n <= first:
        return [], []
    idx = np.arange(first, n)
    ok_port = traj.dist_port_m[first:] > cfg.min_port_dist_m
    t = traj.t
    has_next = idx + 1 < n
    gap = np.empty(idx.shape, dtype=np.float64)
    gap[has_next] = t[idx[has_next] + 1] - t[idx[has_next]]
    gap[~has_next] = np.inf
    label = gap <= cfg.tau_s
    censored = (~has_next) & (period_end - t[idx] < cfg.tau_s)
    usable = ok_port & ~censored
    return (idx[usable & label].tolist(), idx[usable & ~label].tolist())


def build_dataset(trajs: dict[str, Trajectory], cfg: DatasetConfig,
                  period_end: float) -> Dataset:
    """Balanced dataset: target_size windows, half per label, seeded draw.

    Candidate windows are enumerated at stride 1 over every trajectory;
    each class is then sampled uniformly without replacement. The result
    is deterministic for identical inputs and seed.
    """
    true_c: list[tuple[str, int]] = []
    false_c: list[tuple[str, int]] = []
    for track_id in sorted(trajs):
        t_idx, f_idx = _candidates(trajs[track_id], cfg, period_end)
        true_c.extend((track_id, i) for i in t_idx)
        false_c.extend((track_id, i) for i in f_idx)
    need = cfg.target_size // 2
    rng = np.random.default_rng(cfg.seed)
    picked: list[tuple[str, int]] = []
    for label, cands in ((True, true_c), (False, false_c)):
        if len(cands) < need:
            raise InsufficientSamples(label, len(cands), need)
        sel = rng.choice(len(cands), size=need, replace=False)
        picked.extend(cands[i] for i in np.sort(sel))
    order = rng.permutation(len(picked))
    samples = []
    for k in order:
        track_id, i = picked[k]
        s = label_window(trajs[track_id], i, cfg, period_end)
        assert s is not None
        samples.append(s)
    return Dataset(samples=samples, config=cfg)


def split_by_date(datasets: dict[str, Dataset], train_period: str,
                  eval_period: str) -> tuple[Dataset, Dataset, Dataset]:
    """Date-based split: all of train_period for training, a seeded 10%
    of eval_period for validation, the remaining 90% for test."""
    if train_period not in datasets:
        raise MissingPeriod(f"train period {train_period!r} not present")
    if eval_period not in datasets:
        raise MissingPeriod(f"eval period {eval_period!r} not present")
    train = datasets[train_period]
    ev = datasets[eval_period]
    n = len(ev)
    n_val = n // 10
    rng = np.random.default_rng(ev.config.seed)
    val_idx = set(rng.choice(n, size=n_val, replace=False).tolist())
    val = [s for i, s in enumerate(ev.samples) if i in val_idx]
    test = [s for i, s in enumerate(ev.samples) if i not in val_idx]
    return (Dataset(train.samples, train.config),
            Dataset(val, ev.config),
            Dataset(test, ev.config))


PERCENTILES = (1, 5, 25, 50, 75, 95, 100)


def dataset_stats(ds: Dataset) -> dict[str, dict[int, float]]:
    """Percentiles of inter-message distance/time and per-window totals."""
    if not ds.samples:
        raise EmptyDataset("cannot compute stats of an empty dataset")
    win = ds.windows()
    lat, lon, t = win[:, :, COL_LAT], win[:, :, COL_LON], win[:, :, COL_T]
    dd = haversine_arrays(lat[:, :-1], lon[:, :-1], lat[:, 1:], lon[:, 1:])
    dt = np.diff(t, axis=1)
    out = {}
    for name, values in (("delta_d_m", dd.ravel()),
                         ("delta_t_s", dt.ravel()),
                         ("sum_d_m", dd.sum(axis=1)),
                         ("sum_t_s", t[:, -1] - t[:, 0])):
        out[name] = {p: float(np.percentile(values, p)) for p in PERCENTILES}
    return out


def format_stats(stats: dict[str, dict[int, float]]) -> str:
    lines = ["metric        " + "".join(f"{p:>12}" for p in PERCENTILES)]
    for name, row in stats.items():
        lines.append(f"{name:<14}" + "".join(f"{row[p]:>12.1f}" for p in PERCENTILES))
    return "\n".join(lines)


# --- JSONL persistence with config echo + content hash header ---

def _sample_line(s: Sample) -> str:
    return json.dumps({
        "mmsi": s.mmsi, "track": s.track_id, "label": bool(s.label),
        "loss_lat": s.loss_point.lat, "loss_lon": s.loss_point.lon,
        "window": [[float(v) for v in row] for row in s.window],
    })


def save_dataset(path, ds: Dataset) -> str:
    """Write the dataset; returns the content hash recorded in the header."""
    body = [_sample_line(s) for s in ds.samples]
    digest = hashlib.sha256("\n".join(body).encode()).hexdigest()
    header = json.dumps({"format": "aisgap-dataset-v1", "count": len(body),
                         "config": asdict(ds.config), "content_hash": digest})
    with open(path, "w") as f:
        f.write(header + "\n")
        for line in body:
            f.write(line + "\n")
    return digest


def load_dataset(path, verify: bool = True) -> Dataset:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != "aisgap-dataset-v1":
            raise ValueError(f"{path} is not a dataset file")
        body = [line.rstrip("\n") for line in f if line.strip()]
    if verify:
        digest = hashlib.sha256("\n".join(body).encode()).hexdigest()
        if digest != header["content_hash"]:
            raise ValueError(f"{path}: content hash mismatch")
    cfg = DatasetConfig(**header["config"])
    samples = []
    for line in body:
        rec = json.loads(line)
        window = np.array(rec["window"], dtype=np.float64)
        samples.append(Sample(window=window, label=rec["label"],
                              loss_point=GeoPoint(rec["loss_lat"], rec["loss_lon"]),
                              mmsi=rec["mmsi"], track_id=rec["track"]))
    return Dataset(samples=samples, config=cfg)
