"""The reception-prediction model and its training/evaluation harness.

History windows go through an input projection, positional encodings and
two pre-norm transformer blocks; mean-pooling plus a dense projection
yields the first part of the representation vector, which is concatenated
with the 11-value latest-position vector and fed to a three-layer dense
head ending in a single sigmoid logit: the probability that the vessel's
next message arrives within the horizon.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .dataset import Dataset, DatasetConfig, build_dataset
from .encoding import DEFAULT_BOUNDS, NormBounds, encode_dataset
from .errors import (CorruptCheckpoint, DivergedLoss, EmptyDataset,
                     InvalidConfig, InvalidGrid, ShapeMismatch,
                     VersionMismatch)
from .features import (COL_DDH, COL_DDV, COL_DT, COL_LAT, COL_LON, COL_SOD,
                       COL_SOG, Trajectory)
from .nn import Adam, LayerSpec, Tensor, bce_with_logits, sigmoid


@dataclass(frozen=True)
class ModelConfig:
    w: int = 25
    d_model: int = 128
    heads: int = 4
    blocks: int = 2
    repr_dim: int = 64
    head_dims: tuple = (100, 50, 50)
    dropout: float = 0.10
    tau_s: float = 600.0
    vh_dim: int = 6
    vp_dim: int = 11
    ff_mult: int = 2

    def __post_init__(self):
        if self.w < 1 or self.d_model < 2 or self.blocks < 1:
            raise InvalidConfig("w, d_model and blocks must be positive")
        if self.d_model % self.heads:
            raise InvalidConfig(f"{self.heads} heads do not divide d_model")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even for positional encoding")
        if len(self.head_dims) != 3:
            raise InvalidConfig("the classification head has exactly three hidden layers")
        if not (0.0 <= self.dropout < 1.0):
            raise InvalidConfig(f"dropout {self.dropout} outside [0, 1)")
        if self.repr_dim <= self.vp_dim:
            raise InvalidConfig("repr_dim must exceed the position vector length")
        if self.tau_s <= 0:
            raise InvalidConfig("tau_s must be positive")

    @property
    def encoder_part_dim(self) -> int:
        return self.repr_dim - self.vp_dim


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    batches_per_epoch: int = 1562
    patience: int = 10
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidConfig("batch_size, max_epochs and patience must be >= 1")
        if self.batches_per_epoch < 1:
            raise InvalidConfig("batches_per_epoch must be >= 1")


class ReceptionModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.in_proj = nn.Dense(cfg.vh_dim, cfg.d_model, rng)
        self.pe = Tensor(nn.positional_encoding(cfg.w, cfg.d_model))
        self.blocks = [
            nn.TransformerBlock(cfg.d_model, cfg.heads, cfg.ff_mult * cfg.d_model,
                                cfg.dropout, rng)
            for _ in range(cfg.blocks)
        ]
        self.pool_proj = nn.Dense(cfg.d_model, cfg.encoder_part_dim, rng)
        # head layout validated through LayerSpec before instantiation
        specs = []
        prev = cfg.repr_dim
        for dim in cfg.head_dims:
            specs.append(LayerSpec("dense", dims=(prev, dim)))
            specs.append(LayerSpec("relu"))
            specs.append(LayerSpec("dropout", rate=cfg.dropout))
            prev = dim
        specs.append(LayerSpec("dense", dims=(prev, 1)))
        self.head_specs = tuple(specs)
        self.head = [nn.Dense(*s.dims, rng) for s in specs if s.kind == "dense"]

    def forward(self, vh: np.ndarray, vp: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits (n, 1) for histories (n, w, vh_dim) and positions (n, vp_dim)."""
        vh = np.asarray(vh, dtype=np.float64)
        vp = np.asarray(vp, dtype=np.float64)
        if vh.ndim != 3 or vh.shape[1:] != (self.cfg.w, self.cfg.vh_dim):
            raise ShapeMismatch(f"history batch {vh.shape}, expected "
                                f"(n, {self.cfg.w}, {self.cfg.vh_dim})")
        if vp.ndim != 2 or vp.shape != (vh.shape[0], self.cfg.vp_dim):
            raise ShapeMismatch(f"position batch {vp.shape}, expected "
                                f"({vh.shape[0]}, {self.cfg.vp_dim})")
        x = nn.add(self.in_proj(Tensor(vh)), self.pe)
        for block in self.blocks:
            x = block(x, train=train, rng=rng)
        pooled = nn.mean_axis(x, axis=-2)
        enc = self.pool_proj(pooled)
        h = nn.concat_last(enc, Tensor(vp))
        for dense in self.head[:-1]:
            h = nn.dropout(nn.relu(dense(h)), self.cfg.dropout, rng, train)
        return self.head[-1](h)

    def forward_arrays(self, vh: np.ndarray, vp: np.ndarray) -> np.ndarray:
        """Eval-mode logits without the autodiff graph.

        Mirrors forward() operation for operation (same reductions, same
        order) so the two stay numerically interchangeable; buffers are
        reused in place, which matters on memory-bound hosts.
        """
        cfg = self.cfg
        n = vh.shape[0]
        d = cfg.d_model
        x = np.matmul(vh.reshape(-1, cfg.vh_dim), self.in_proj.W.data)
        x += self.in_proj.b.data
        x = x.reshape(n, cfg.w, d)
        x += self.pe.data

        def ln(v, layer):
            mu = v.mean(axis=-1, keepdims=True)
            xc = v - mu
            var = np.mean(xc * xc, axis=-1, keepdims=True)
            xc *= 1.0 / np.sqrt(var + 1e-5)
            xc *= layer.gain.data
            xc += layer.bias.data
            return xc

        def dense_flat(v, layer):
            out = np.matmul(v.reshape(-1, layer.W.data.shape[0]), layer.W.data)
            out += layer.b.data
            return out

        for block in self.blocks:
            a = block.attn
            h1 = ln(x, block.ln1)
            qkv_w = np.concatenate([a.q.W.data, a.k.W.data, a.v.W.data], axis=1)
            qkv_b = np.concatenate([a.q.b.data, a.k.b.data, a.v.b.data])
            z = np.matmul(h1.reshape(-1, d), qkv_w)
            z += qkv_b
            z = z.reshape(n, cfg.w, 3, a.heads, a.d_head)
            q = np.ascontiguousarray(z[:, :, 0].swapaxes(1, 2))
            k = np.ascontiguousarray(z[:, :, 1].swapaxes(1, 2))
            v = np.ascontiguousarray(z[:, :, 2].swapaxes(1, 2))
            scores = np.matmul(q, np.swapaxes(k, -1, -2))
            scores *= 1.0 / math.sqrt(a.d_head)
            scores -= scores.max(axis=-1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=-1, keepdims=True)
            ctx = np.swapaxes(np.matmul(scores, v), 1, 2).reshape(n, cfg.w, d)
            proj = dense_flat(ctx, a.o).reshape(n, cfg.w, d)
            x = x + proj
            h2 = ln(x, block.ln2)
            f = dense_flat(h2, block.ff1)
            np.maximum(f, 0.0, out=f)
            f2 = np.matmul(f, block.ff2.W.data)
            f2 += block.ff2.b.data
            x += f2.reshape(n, cfg.w, d)
        pooled = x.mean(axis=-2)
        enc = np.matmul(pooled, self.pool_proj.W.data)
        enc += self.pool_proj.b.data
        h = np.concatenate([enc, vp], axis=-1)
        for dense in self.head[:-1]:
            h = np.matmul(h, dense.W.data)
            h += dense.b.data
            np.maximum(h, 0.0, out=h)
        out = np.matmul(h, self.head[-1].W.data)
        out += self.head[-1].b.data
        return out

    def predict_proba(self, vh: np.ndarray, vp: np.ndarray,
                      batch_size: int = 128) -> np.ndarray:
        vh = np.asarray(vh, dtype=np.float64)
        vp = np.asarray(vp, dtype=np.float64)
        out = np.empty(vh.shape[0], dtype=np.float64)
        for s in range(0, vh.shape[0], batch_size):
            e = min(s + batch_size, vh.shape[0])
            out[s:e] = sigmoid(self.forward_arrays(vh[s:e], vp[s:e]).reshape(-1))
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("in_proj.W", self.in_proj.W), ("in_proj.b", self.in_proj.b)]
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{n}", t) for n, t in block.params())
        out.extend((f"pool.{n}", t) for n, t in self.pool_proj.params())
        for i, dense in enumerate(self.head):
            out.extend((f"head{i}.{n}", t) for n, t in dense.params())
        return out

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    def get_weights(self) -> list[np.ndarray]:
        return [t.data.copy() for _, t in self.named_params()]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        params = self.named_params()
        if len(weights) != len(params):
            raise ShapeMismatch("weight list length mismatch")
        for (name, t), w in zip(params, weights):
            if t.data.shape != w.shape:
                raise ShapeMismatch(f"{name}: {t.data.shape} vs {w.shape}")
            t.data[...] = w


def build_model(cfg: ModelConfig, seed: int = 0) -> ReceptionModel:
    return ReceptionModel(cfg, seed)


def predict(model, sample) -> float:
    """Probability that a message arrives within the horizon, one sample."""
    return float(model.predict_proba(sample.v_h[None, :, :], sample.v_p[None, :])[0])


# --- training -----------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    stopped_epoch: int
    best_val_loss: float


def _eval_loss(model, vh, vp, y, batch_size: int) -> float:
    total = 0.0
    for s in range(0, len(y), batch_size):
        e = min(s + batch_size, len(y))
        logits = model.forward(vh[s:e], vp[s:e]).data.reshape(-1)
        z, yy = logits, y[s:e]
        total += float(np.sum(np.maximum(z, 0) - z * yy + np.log1p(np.exp(-np.abs(z)))))
    return total / len(y)


def train(model, train_arrays, val_arrays, cfg: TrainConfig,
          verbose: bool = False) -> TrainResult:
    """Minimize BCE with Adam; early-stops on the validation loss and
    restores the best-validation weights."""
    vh, vp, y = train_arrays
    vvh, vvp, vy = val_arrays
    if len(y) == 0 or len(vy) == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    tensors = [t for _, t in model.named_params()]
    opt = Adam(tensors, lr=cfg.lr)
    best_val = math.inf
    best_epoch = -1
    best_weights = model.get_weights()
    history = []
    epoch = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(y))
        n_batches = min(math.ceil(len(y) / cfg.batch_size), cfg.batches_per_epoch)
        epoch_loss = 0.0
        seen = 0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                break
            opt.zero_grad()
            logits = model.forward(vh[idx], vp[idx], train=True, rng=rng)
            loss = bce_with_logits(logits, y[idx])
            if not np.isfinite(loss.data):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data) * idx.size
            seen += idx.size
        val_loss = _eval_loss(model, vvh, vvp, vy, cfg.batch_size * 4)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(seen, 1),
                        "val_loss": val_loss})
        if verbose:
            print(f"epoch {epoch}: train {epoch_loss / max(seen, 1):.4f} "
                  f"val {val_loss:.4f}")
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            best_weights = model.get_weights()
        elif epoch - best_epoch >= cfg.patience:
            break
    model.set_weights(best_weights)
    return TrainResult(history=history, best_epoch=best_epoch,
                       stopped_epoch=epoch, best_val_loss=best_val)


# --- evaluation ---------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def ppv(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def npv(self) -> float:
        return self.tn / (self.tn + self.fn) if self.tn + self.fn else float("nan")

    def as_text(self) -> str:
        n = self.total
        return "\n".join([
            "confusion matrix (% of all windows; truth in columns):",
            f"                 msg arrived   no msg",
            f"  pred arrived   {100 * self.tp / n:11.2f} {100 * self.fp / n:8.2f}",
            f"  pred no msg    {100 * self.fn / n:11.2f} {100 * self.tn / n:8.2f}",
            f"accuracy = {100 * self.accuracy:.2f}%  "
            f"PPV = {100 * self.ppv:.2f}%  NPV = {100 * self.npv:.2f}%",
        ])


def evaluate(model, arrays, threshold: float = 0.5) -> EvalReport:
    vh, vp, y = arrays
    if len(y) == 0:
        raise EmptyDataset("cannot evaluate on an empty set")
    pred = model.predict_proba(vh, vp) > threshold
    truth = np.asarray(y, dtype=np.float64) > 0.5
    return EvalReport(tp=int(np.sum(pred & truth)),
                      fp=int(np.sum(pred & ~truth)),
                      fn=int(np.sum(~pred & truth)),
                      tn=int(np.sum(~pred & ~truth)))


# --- checkpointing ------------------------------------------------------

_CKPT_MAGIC = b"AISGAPC1"
_CKPT_VERSION = 1


def save_checkpoint(model: ReceptionModel, path) -> None:
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    params = model.named_params()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(params)))
        for name, t in params:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptCheckpoint(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path, expected: ModelConfig | None = None) -> ReceptionModel:
    with open(path, "rb") as f:
        if _read_exact(f, len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic bytes")
        version, cfg_len = struct.unpack("<II", _read_exact(f, 8))
        if version != _CKPT_VERSION:
            raise VersionMismatch(f"checkpoint format v{version}, expected v{_CKPT_VERSION}")
        try:
            cfg_dict = json.loads(_read_exact(f, cfg_len))
            cfg_dict["head_dims"] = tuple(cfg_dict["head_dims"])
            cfg = ModelConfig(**cfg_dict)
        except (ValueError, TypeError, KeyError) as e:
            raise CorruptCheckpoint(f"unreadable config block: {e}") from None
        if expected is not None and cfg != expected:
            raise VersionMismatch(f"checkpoint config {cfg} != requested {expected}")
        model = ReceptionModel(cfg, seed=0)
        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
        params = dict(model.named_params())
        if n_params != len(params):
            raise CorruptCheckpoint(f"{n_params} stored params, model has {len(params)}")
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            data = np.frombuffer(_read_exact(f, 8 * int(np.prod(shape))),
                                 dtype="<f8").reshape(shape)
            if name not in params:
                raise CorruptCheckpoint(f"unknown parameter {name!r}")
            if params[name].data.shape != data.shape:
                raise CorruptCheckpoint(f"{name}: shape {data.shape} does not fit")
            params[name].data[...] = data
    return model


# --- architecture baselines ----------------------------------------------

class FeedForwardModel:
    """Plain dense baseline on the flattened encoded inputs."""

    def __init__(self, w: int, vh_dim: int = 6, vp_dim: int = 11,
                 dims: tuple = (10, 20, 25, 20, 10), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w, self.vh_dim, self.vp_dim = w, vh_dim, vp_dim
        self.layers = []
        prev = w * vh_dim + vp_dim
        for dim in dims:
            self.layers.append(nn.Dense(prev, dim, rng))
            prev = dim
        self.out = nn.Dense(prev, 1, rng)

    def forward(self, vh, vp, train: bool = False, rng=None) -> Tensor:
        vh = np.asarray(vh, dtype=np.float64)
        vp = np.asarray(vp, dtype=np.float64)
        flat = np.concatenate([vh.reshape(vh.shape[0], -1), vp], axis=1)
        h = Tensor(flat)
        for dense in self.layers:
            h = nn.relu(dense(h))
        return self.out(h)

    def predict_proba(self, vh, vp, batch_size: int = 4096) -> np.ndarray:
        out = np.empty(len(vh), dtype=np.float64)
        for s in range(0, len(vh), batch_size):
            e = min(s + batch_size, len(vh))
            out[s:e] = sigmoid(self.forward(vh[s:e], vp[s:e]).data.reshape(-1))
        return out

    def named_params(self):
        out = []
        for i, dense in enumerate(self.layers):
            out.extend((f"ff{i}.{n}", t) for n, t in dense.params())
        out.extend((f"out.{n}", t) for n, t in self.out.params())
        return out

    def get_weights(self):
        return [t.data.copy() for _, t in self.named_params()]

    def set_weights(self, weights):
        for (_, t), w in zip(self.named_params(), weights):
            t.data[...] = w


def raw_inputs(ds: Dataset):
    """Un-encoded inputs for the no-encoding transformer baseline."""
    wins = ds.windows()
    vh = wins[:, :, [COL_DT, COL_DDV, COL_DDH, COL_SOD, COL_SOG]]
    vp = wins[:, -1, [COL_LAT, COL_LON]]
    return vh, vp, ds.labels.astype(np.float64)


# --- robustness harness ---------------------------------------------------

ABLATION_AXES = ("dataset_size", "window_size", "horizon", "architecture")
ARCHITECTURES = ("transformer", "feed_forward", "transformer_raw")


@dataclass
class AblationContext:
    train_trajs: dict[str, Trajectory]
    test_trajs: dict[str, Trajectory]
    train_period_end: float
    test_period_end: float
    dataset_cfg: DatasetConfig
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    test_size: int | None = None
    bounds: NormBounds = field(default_factory=lambda: DEFAULT_BOUNDS)


def _split_val(arrays, fraction: float, seed: int):
    vh, vp, y = arrays
    n = len(y)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)
    n_val = max(1, int(n * fraction))
    v, t = idx[:n_val], idx[n_val:]
    return (vh[t], vp[t], y[t]), (vh[v], vp[v], y[v])


def ablation_run(axis: str, grid, ctx: AblationContext,
                 verbose: bool = False) -> list[dict]:
    """Train/evaluate once per grid point along one configuration axis."""
    grid = list(grid)
    if axis not in ABLATION_AXES:
        raise InvalidGrid(f"unknown axis {axis!r}; pick one of {ABLATION_AXES}")
    if not grid:
        raise InvalidGrid("empty grid")
    rows = []
    for value in grid:
        ds_cfg, m_cfg, variant = _grid_point(axis, value, ctx)
        test_cfg = replace(ds_cfg, target_size=ctx.test_size or ds_cfg.target_size,
                           seed=ds_cfg.seed + 1)
        train_ds = build_dataset(ctx.train_trajs, ds_cfg, ctx.train_period_end)
        test_ds = build_dataset(ctx.test_trajs, test_cfg, ctx.test_period_end)
        if variant == "transformer_raw":
            train_arrays = raw_inputs(train_ds)
            test_arrays = raw_inputs(test_ds)
        else:
            train_arrays = encode_dataset(train_ds, ctx.bounds)
            test_arrays = encode_dataset(test_ds, ctx.bounds)
        if variant == "feed_forward":
            model = FeedForwardModel(w=ds_cfg.w, seed=ctx.train_cfg.seed)
        else:
            model = ReceptionModel(m_cfg, seed=ctx.train_cfg.seed)
        tr, val = _split_val(train_arrays, 0.1, ds_cfg.seed)
        result = train(model, tr, val, ctx.train_cfg, verbose=verbose)
        report = evaluate(model, test_arrays)
        rows.append({
            "axis": axis, "value": value, "accuracy": report.accuracy,
            "ppv": report.ppv, "npv": report.npv,
            "train_size": len(train_ds), "test_size": len(test_ds),
            "epochs": result.stopped_epoch + 1,
        })
        if verbose:
            print(f"[{axis}={value}] accuracy {report.accuracy:.4f}")
    return rows


def _grid_point(axis: str, value, ctx: AblationContext):
    ds_cfg, m_cfg = ctx.dataset_cfg, ctx.model_cfg
    variant = "transformer"
    if axis == "dataset_size":
        if not isinstance(value, int) or value < 2:
            raise InvalidGrid(f"dataset size {value!r} must be an int >= 2")
        ds_cfg = replace(ds_cfg, target_size=value)
    elif axis == "window_size":
        if not isinstance(value, int) or value < 1:
            raise InvalidGrid(f"window size {value!r} must be a positive int")
        ds_cfg = replace(ds_cfg, w=value,
                         min_history=max(ds_cfg.min_history, value))
        m_cfg = replace(m_cfg, w=value)
    elif axis == "horizon":
        if value <= 0:
            raise InvalidGrid(f"horizon {value!r} must be positive seconds")
        ds_cfg = replace(ds_cfg, tau_s=float(value))
        m_cfg = replace(m_cfg, tau_s=float(value))
    elif axis == "architecture":
        if value not in ARCHITECTURES:
            raise InvalidGrid(f"architecture {value!r} not in {ARCHITECTURES}")
        variant = value
        if value == "transformer_raw":
            m_cfg = replace(m_cfg, vh_dim=5, vp_dim=2)
    return ds_cfg, m_cfg, variant


def write_ablation_csv(rows: list[dict], path, config_echo: dict | None = None) -> None:
    cols = ["axis", "value", "accuracy", "ppv", "npv", "train_size",
            "test_size", "epochs"]
    with open(path, "w") as f:
        if config_echo is not None:
            f.write("# " + json.dumps(config_echo, sort_keys=True) + "\n")
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row[c]) for c in cols) + "\n")
