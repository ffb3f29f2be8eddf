"""Latent-vector extraction and a one-vs-rest linear SVM probe."""
from __future__ import annotations

import base64
import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ConfigError, LiLaNet, latent_vectors
from .preprocess import ProcessedCloud


class LabelError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    vectors: np.ndarray          # [N, L]
    labels: np.ndarray           # [N] int
    class_names: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be [N, L]")
        if len(self.labels) != len(self.vectors):
            raise ValueError("one label per vector")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise LabelError("label index outside class_names")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + [f"v{i}" for i in range(self.dim)])
        for lab, vec in zip(self.labels, self.vectors):
            w.writerow([self.class_names[lab]] + [repr(float(v)) for v in vec])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, class_names: Sequence[str] | None = None) -> "EmbeddingSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "label":
            raise ValueError("missing header")
        body = rows[1:]
        names = list(class_names) if class_names is not None else sorted({r[0] for r in body})
        index = {n: i for i, n in enumerate(names)}
        try:
            labels = [index[r[0]] for r in body]
        except KeyError as e:
            raise LabelError(f"unknown class {e.args[0]!r}") from None
        vecs = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(rows[0]) - 1)
        return cls(vecs, labels, names)


def embed(model: LiLaNet, clouds: Sequence[ProcessedCloud],
          class_names: Sequence[str] | None = None, batch_size: int = 32) -> EmbeddingSet:
    """One latent vector per cloud. Labels come from ``cloud.label``."""
    missing = [c.source_id for c in clouds if c.label is None]
    if missing:
        raise LabelError(f"clouds without a label: {missing[:3]}")
    names = list(class_names) if class_names is not None else sorted({c.label for c in clouds})
    index = {n: i for i, n in enumerate(names)}
    unknown = {c.label for c in clouds} - index.keys()
    if unknown:
        raise LabelError(f"labels not in class_names: {sorted(unknown)}")
    was_training = model.training
    model.eval()
    try:
        chunks = []
        for s in range(0, len(clouds), batch_size):
            X = np.stack([c.points.T for c in clouds[s:s + batch_size]]).astype(model.dtype)
            chunks.append(latent_vectors(model, X).astype(np.float64))
    finally:
        if was_training:
            model.train()
    vecs = np.concatenate(chunks) if chunks else np.zeros((0, model.config.latent_dim))
    return EmbeddingSet(vecs, [index[c.label] for c in clouds], names)


@dataclass
class LinearSvmModel:
    weights: np.ndarray      # [K, L]
    bias: np.ndarray         # [K]
    mean: np.ndarray         # [L] standardization, from the train set
    std: np.ndarray          # [L]
    class_names: list[str]
    C: float = 1.0
    epochs: int = 100
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, vectors) -> np.ndarray:
        X = np.asarray(vectors, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ConfigError("latent_dim", f"model expects {self.dim}, got {X.shape[-1]}")
        Z = (X - self.mean) / self.std
        return Z @ self.weights.T + self.bias

    def to_json(self) -> str:
        def enc(a):
            a = np.ascontiguousarray(a, dtype="<f8")
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}
        return json.dumps({
            "class_names": self.class_names, "C": self.C, "epochs": self.epochs, "seed": self.seed,
            "weights": enc(self.weights), "bias": enc(self.bias),
            "mean": enc(self.mean), "std": enc(self.std),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LinearSvmModel":
        d = json.loads(text)

        def dec(o):
            return np.frombuffer(base64.b64decode(o["data"]), dtype="<f8").reshape(o["shape"]).copy()
        return cls(dec(d["weights"]), dec(d["bias"]), dec(d["mean"]), dec(d["std"]),
                   list(d["class_names"]), d["C"], d["epochs"], d["seed"])


def _pegasos(Z: np.ndarray, y: np.ndarray, lam: float, epochs: int, seed: int, cls: int) -> np.ndarray:
    # bias folded in as a constant feature, so w has L + 1 entries
    n, d = Z.shape
    w = np.zeros(d)
    t = 0
    radius = 1.0 / np.sqrt(lam)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, cls, epoch]).permutation(n)
        for i in order:
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[i] * (Z[i] @ w)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * Z[i]
            nrm = np.linalg.norm(w)
            if nrm > radius:
                w *= radius / nrm
    return w


def train_linear_svm(train: EmbeddingSet, C: float = 1.0, epochs: int = 100, seed: int = 0) -> LinearSvmModel:
    if C <= 0:
        raise ConfigError("C", "must be positive")
    if epochs < 1:
        raise ConfigError("epochs", "must be >= 1")
    present = np.unique(train.labels)
    if len(present) < 2:
        raise LabelError("need at least two classes with samples")
    X = train.vectors
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = np.hstack([(X - mean) / std, np.ones((len(X), 1))])
    lam = 1.0 / (C * len(X))
    K = len(train.class_names)
    W = np.zeros((K, X.shape[1]))
    b = np.zeros(K)
    for k in range(K):
        if k not in present:
            b[k] = -np.inf   # never predicted
            continue
        y = np.where(train.labels == k, 1.0, -1.0)
        w = _pegasos(Z, y, lam, epochs, seed, k)
        W[k], b[k] = w[:-1], w[-1]
    return LinearSvmModel(W, b, mean, std, list(train.class_names), C, epochs, seed)


def classify(svm: LinearSvmModel, vectors) -> np.ndarray:
    # np.argmax returns the first maximum, which is the lowest class index
    return np.argmax(svm.scores(vectors), axis=1)


def accuracy(svm: LinearSvmModel, test: EmbeddingSet) -> float:
    if len(test) == 0:
        return 0.0
    return float(np.mean(classify(svm, test.vectors) == test.labels))


def confusion_matrix(svm: LinearSvmModel, test: EmbeddingSet) -> np.ndarray:
    K = len(svm.class_names)
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (test.labels, classify(svm, test.vectors)), 1)
    return cm


def confusion_csv(cm: np.ndarray, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + list(class_names))
    for name, row in zip(class_names, cm):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()
