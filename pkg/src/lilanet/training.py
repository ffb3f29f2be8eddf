"""Training loop, evaluation and checkpoint persistence."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import AdamState, Tensor
from .geometry_io import DatasetManifest, ManifestEntry
from .model import ConfigError, LiLaNet, ModelConfig, build, forward

log = logging.getLogger(__name__)

MAGIC = b"LILA"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 5e-4
    seed: int = 0
    split_train_fraction: float = 0.9
    shuffle_each_epoch: bool = True
    precision: int = 32
    freeze_batch_norm: bool = False
    # "constant"; "cosine" anneals to lr_floor * learning_rate by the last epoch;
    # "step" multiplies by lr_floor from epoch floor(lr_drop_at * epochs) on
    lr_schedule: str = "constant"
    lr_floor: float = 0.05
    lr_drop_at: float = 0.9

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0 < self.split_train_fraction < 1:
            raise ConfigError("split_train_fraction", "must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.precision not in (32, 64):
            raise ConfigError("precision", "must be 32 or 64")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.lr_schedule not in ("constant", "cosine", "step"):
            raise ConfigError("lr_schedule", "must be 'constant', 'cosine' or 'step'")
        if not 0 <= self.lr_floor <= 1:
            raise ConfigError("lr_floor", "must lie in [0, 1]")
        if not 0 <= self.lr_drop_at <= 1:
            raise ConfigError("lr_drop_at", "must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "step":
            drop = epoch >= int(np.floor(self.lr_drop_at * self.epochs))
            return self.learning_rate * (self.lr_floor if drop else 1.0)
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        frac = 0.5 * (1 + np.cos(np.pi * epoch / (self.epochs - 1)))
        return self.learning_rate * (self.lr_floor + (1 - self.lr_floor) * frac)

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- data

def split_dataset(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle, first floor(fraction * N) entries train, rest test."""
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    n_train = int(np.floor(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"fraction {fraction} leaves one side empty for {n} entries")
    perm = np.random.default_rng(seed).permutation(n)
    pick = lambda ids, split: [ManifestEntry(manifest.entries[i].path, manifest.entries[i].label, split) for i in ids]
    return (DatasetManifest(pick(perm[:n_train], "train"), seed),
            DatasetManifest(pick(perm[n_train:], "test"), seed))


def stack_clouds(clouds, dtype=np.float32) -> np.ndarray:
    """Processed clouds (or (M, 3) arrays) -> ``[K, 3, M]``."""
    arrs = [np.asarray(getattr(c, "points", c)) for c in clouds]
    if not arrs:
        raise TrainingError("empty training set")
    sizes = {a.shape[0] for a in arrs}
    if len(sizes) != 1:
        raise TrainingError(f"clouds must share one point count, got {sorted(sizes)}")
    return np.ascontiguousarray(np.stack(arrs).transpose(0, 2, 1), dtype=dtype)


# ---------------------------------------------------------------- loss

def _nn_indices(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """For each column of ``A`` ([3, Ma]) the index of the nearest column of ``B``."""
    a2 = (A * A).sum(axis=0)
    b2 = (B * B).sum(axis=0)
    D = a2[:, None] + b2[None, :] - 2.0 * (A.T @ B)
    return np.argmin(D, axis=1)


def chamfer_loss(R: Tensor, X: np.ndarray, per_cloud: Optional[np.ndarray] = None) -> Tensor:
    """Batch-mean Chamfer distance between reconstruction ``R`` and target ``X`` ([B, 3, M]).

    Nearest-neighbour correspondences are constants of the step; gradients
    flow through the selected squared distances.
    """
    Rd = R.data
    X = np.asarray(X, dtype=Rd.dtype)
    B = Rd.shape[0]
    grad = np.zeros_like(Rd)
    values = np.empty(B)
    for b in range(B):
        r, x = Rd[b], X[b]
        mr, mx = r.shape[1], x.shape[1]
        i_xr = _nn_indices(x, r)  # target -> reconstruction
        i_rx = _nn_indices(r, x)  # reconstruction -> target
        d1 = x - r[:, i_xr]
        d2 = r - x[:, i_rx]
        values[b] = (d1 * d1).sum() / mx + (d2 * d2).sum() / mr
        g = 2.0 * d2 / mr
        np.add.at(g.T, i_xr, (-2.0 * d1 / mx).T)
        grad[b] = g
    if per_cloud is not None:
        per_cloud[:] = values
    loss = np.asarray(values.mean(), dtype=Rd.dtype)
    grad /= B
    return ad.record("chamfer_loss", loss, (R,), lambda g: (g * grad,))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: LiLaNet
    history: list[float]
    adam: AdamState
    epoch: int


def train(model: LiLaNet, clouds, cfg: TrainConfig, adam: Optional[AdamState] = None,
          start_epoch: int = 0, history: Optional[list[float]] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Adam on the Chamfer loss. Shuffling for epoch ``e`` is seeded by ``(seed, e)``,
    so resuming from a checkpoint replays the same batches."""
    cfg.validate()
    data = stack_clouds(clouds, model.dtype)
    if data.shape[2] != model.config.points:
        log.debug("training on M=%d with a model configured for M=%d", data.shape[2], model.config.points)
    K = data.shape[0]
    adam = adam if adam is not None else AdamState(lr=cfg.learning_rate)
    adam.lr = cfg.learning_rate
    history = list(history or [])
    for epoch in range(start_epoch, cfg.epochs):
        adam.lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(K) if cfg.shuffle_each_epoch else np.arange(K)
        per_cloud = np.empty(K)
        for bi, s in enumerate(range(0, K, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            X = data[idx]
            if cfg.freeze_batch_norm:
                model.eval()
            else:
                model.train()
            try:
                R = forward(model, X)
                vals = np.empty(len(idx))
                loss = chamfer_loss(R, X, vals)
                grads = ad.backward(loss)
            except ad.NumericError as e:
                raise ad.NumericError(f"epoch {epoch} batch {bi}: {e}") from e
            per_cloud[idx] = vals
            named = {name: grads[p] for name, p in model.params.items() if p in grads}
            ad.adam_step(model.params, named, adam)
        model.zero_grad()
        mean = float(per_cloud.mean())
        if not np.isfinite(mean):
            raise ad.NumericError(f"epoch {epoch}: non-finite loss")
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        log.debug("epoch %d mean CD %.6g", epoch, mean)
    model.eval()
    return TrainResult(model, history, adam, cfg.epochs)


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    report: metrics.MetricReport
    cd: list[float]
    emd: list[float]
    times: list[float]


def reconstruct(model, cloud: np.ndarray) -> np.ndarray:
    """(M, 3) input -> (M, 3) reconstruction, without graph recording."""
    X = np.asarray(cloud).T[None]
    with ad.no_grad():
        R = model(X)
    return np.asarray(R.data[0].T, dtype=np.float64)


def evaluate(model, clouds, emd_mode: str = "auto", emd_cap: int = metrics.EXACT_EMD_CAP,
             timing_repeats: int = 3, compute_emd: bool = True) -> Evaluation:
    """Per-cloud forward + metrics; wall time is the best of ``timing_repeats`` forward passes."""
    model.eval()
    cds, emds, times, modes = [], [], [], set()
    dtype = getattr(model, "dtype", np.float64)
    for c in clouds:
        pts = np.asarray(getattr(c, "points", c), dtype=np.float64)
        X = np.asarray(pts.T[None], dtype=dtype)
        best = np.inf
        with ad.no_grad():
            for _ in range(max(1, timing_repeats)):
                t0 = time.perf_counter()
                R = model(X)
                best = min(best, time.perf_counter() - t0)
        rec = np.asarray(R.data[0].T, dtype=np.float64)
        times.append(best)
        cds.append(metrics.chamfer_accelerated(pts, rec) if len(pts) > 2048 else metrics.chamfer(pts, rec))
        if compute_emd:
            e, mode = metrics.emd(pts, rec, mode=emd_mode, cap=emd_cap)
            emds.append(e)
            modes.add(mode)
    mode = "approx" if "approx" in modes else ("exact" if modes else "none")
    report = metrics.MetricReport(float(np.mean(cds)), float(np.mean(emds)) if emds else float("nan"),
                                  mode, float(np.mean(times)))
    return Evaluation(report, cds, emds, times)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: LiLaNet
    adam: Optional[AdamState] = None
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(model: LiLaNet, path, adam: Optional[AdamState] = None, epoch: int = 0,
                    loss_history: Sequence[float] = (), extra: Optional[dict] = None) -> None:
    """Binary layout: b"LILA", u32 version, u32 header length, JSON header, then
    float32 little-endian arrays in header order."""
    arrays = dict(model.state_arrays())
    adam_meta = None
    if adam is not None:
        adam_meta = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        for name in model.params:
            if name in adam.m:
                arrays[f"adam.m.{name}"] = adam.m[name]
                arrays[f"adam.v.{name}"] = adam.v[name]
    header = {
        "model_config": model.config.to_dict(),
        "epoch": int(epoch),
        "loss_history": [float(x) for x in loss_history],
        "adam": adam_meta,
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float32).reshape(spec["shape"])
        offset = end
    if offset != len(raw):
        raise CheckpointError("trailing bytes after last array")
    config = ModelConfig.from_dict(header["model_config"])
    model = build(config, dtype=np.float32)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data = arrays[name].copy()
    for name, st in model.bn.items():
        st.running_mean = arrays[f"{name}.running_mean"].copy()
        st.running_var = arrays[f"{name}.running_var"].copy()
    adam = None
    if header.get("adam"):
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for name in model.params:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"].copy()
                adam.v[name] = arrays[f"adam.v.{name}"].copy()
    model.eval()
    return Checkpoint(model, adam, header["epoch"], header["loss_history"], header.get("extra", {}))
