"""Small tanh MLP with a linear classifier head and hand-written gradients.

The network stands in for a CNN feature extractor plus a fully connected
classifier.  ``forward`` returns both the penultimate activations (the
latent space the bases live in) and the logits.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    ContractError,
    NumericError,
    ParameterError,
    ParseError,
    ShapeError,
)
from .numerics import SeededRng, matmul, seq_sum

UNLABELED = -1
ACTIVATIONS = ("identity", "tanh")
CHECKPOINT_MAGIC = b"UAST1"


@dataclass
class Layer:
    weight: np.ndarray  # d_in x d_out
    bias: np.ndarray  # d_out
    activation: str = "tanh"

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    """Stack of dense layers; the last one is the classifier head.

    ``att`` is the optional K x d weight matrix of the basis-extraction
    block, applied to the penultimate features.
    """

    layers: list
    att: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out != b.d_in:
                raise ShapeError(f"layer {i} outputs {a.d_out} but layer {i + 1} expects {b.d_in}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {layer.activation!r}")
        if self.att is not None and self.att.shape[1] != self.feature_dim:
            raise ShapeError(f"ATT block has {self.att.shape[1]} columns, features have {self.feature_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].d_in

    @property
    def class_count(self) -> int:
        return self.layers[-1].d_out

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def params(self) -> list:
        """Flat list of parameter arrays (views), weight then bias per layer."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.features):
            raise ShapeError(f"{len(self.features)} rows but {len(self.labels)} labels")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.class_count))
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0])
            raise ConsistencyError(f"row {row}: label {self.labels[row]} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def labeled(self) -> "Dataset":
        m = self.labeled_mask
        return Dataset(self.features[m], self.labels[m], self.class_count)

    def unlabeled(self) -> "Dataset":
        m = ~self.labeled_mask
        return Dataset(self.features[m], self.labels[m], self.class_count)

    def hide_labels(self) -> "Dataset":
        return Dataset(self.features.copy(), np.full(len(self), UNLABELED), self.class_count)


def init_mlp(
    input_dim: int,
    n_classes: int,
    rng: SeededRng,
    hidden: Sequence[int] = (32, 32),
    att_rows: Optional[int] = None,
) -> MlpModel:
    """Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weights, zero biases."""
    dims = [input_dim, *hidden, n_classes]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / math.sqrt(d_in)
        w = (2.0 * rng.uniform((d_in, d_out)) - 1.0) * bound
        act = "identity" if i == len(dims) - 2 else "tanh"
        layers.append(Layer(w, np.zeros(d_out), act))
    att = None
    if att_rows is not None:
        d = dims[-2]
        bound = 1.0 / math.sqrt(d)
        att = (2.0 * rng.uniform((att_rows, d)) - 1.0) * bound
    return MlpModel(layers, att)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else z


def _forward_all(model: MlpModel, x) -> list:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects {model.input_dim} columns")
    acts = [x]
    for i, layer in enumerate(model.layers):
        z = matmul(acts[-1], layer.weight) + layer.bias
        a = _activate(z, layer.activation)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {i}")
        acts.append(a)
    return acts


def forward(model: MlpModel, x) -> tuple:
    """Return ``(features, logits)``; features are the input to the head."""
    acts = _forward_all(model, x)
    return acts[-2], acts[-1]


def predict(model: MlpModel, x) -> np.ndarray:
    return np.argmax(forward(model, x)[1], axis=1)


def evaluate(model: MlpModel, data: Dataset) -> dict:
    """Per-class accuracy and its unweighted mean over classes present in ``data``.

    Uses the labeled rows only; classes without rows report None.
    """
    labeled = data.labeled()
    if labeled.features.shape[1] != model.input_dim:
        raise ConsistencyError(
            f"data has {labeled.features.shape[1]} features, model expects {model.input_dim}"
        )
    n_classes = max(model.class_count, data.class_count)
    pred = predict(model, labeled.features) if len(labeled) else np.zeros(0, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labeled.labels, pred), 1)
    per_class = []
    for c in range(n_classes):
        total = int(confusion[c].sum())
        per_class.append(None if total == 0 else confusion[c, c] / total)
    present = [a for a in per_class if a is not None]
    return {
        "per_class_accuracy": per_class,
        "mean_class_accuracy": float(np.mean(present)) if present else None,
        "overall_accuracy": float(np.trace(confusion) / max(1, len(labeled))),
        "confusion": confusion.tolist(),
        "n": len(labeled),
    }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != n_rows:
        raise ShapeError(f"{n_rows} logit rows but {len(labels)} labels")
    if np.any(labels == UNLABELED):
        raise ContractError("unlabeled rows must be filtered out before computing the NLL")
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return labels


def nll_loss(logits, labels, weights=None) -> float:
    """Mean negative log-likelihood; optional per-row weights scale each term."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    per_row = -log_softmax(logits)[np.arange(len(labels)), labels]
    if weights is not None:
        per_row = per_row * np.asarray(weights, dtype=np.float64)
    return float(np.mean(per_row))


@dataclass
class NllLoss:
    """Loss specification for :func:`backward`: weighted mean NLL."""

    labels: np.ndarray
    weights: Optional[np.ndarray] = None


@dataclass
class Gradients:
    weights: list
    biases: list
    loss: float = float("nan")

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def backward(model: MlpModel, x, loss: NllLoss) -> Gradients:
    """Gradients of the weighted mean NLL with respect to every layer parameter."""
    acts = _forward_all(model, x)
    logits = acts[-1]
    n = logits.shape[0]
    labels = _check_labels(loss.labels, n, model.class_count)
    w = np.ones(n) if loss.weights is None else np.asarray(loss.weights, dtype=np.float64)
    logp = log_softmax(logits)
    value = float(np.mean(-logp[np.arange(n), labels] * w))
    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta *= (w / n)[:, None]

    gw = [None] * len(model.layers)
    gb = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "tanh":
            delta = delta * (1.0 - acts[i + 1] ** 2)
        gw[i] = matmul(acts[i].T, delta)
        gb[i] = seq_sum(delta, axis=0)
        if not (np.all(np.isfinite(gw[i])) and np.all(np.isfinite(gb[i]))):
            raise NumericError(f"non-finite gradient in layer {i}")
        if i > 0:
            delta = matmul(delta, layer.weight.T)
    return Gradients(gw, gb, value)


class Sgd:
    """SGD with heavy-ball momentum and L2 weight decay.

    velocity = momentum * velocity - lr * (grad + weight_decay * param)
    param += velocity
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr >= 0:
            raise ParameterError(f"lr must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        if not weight_decay >= 0:
            raise ParameterError(f"weight_decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def update(self, params: list, grads: list) -> None:
        """In-place update of ``params``; velocity is keyed by list position."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        staged = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
            v = self._velocity.get(i)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v - self.lr * (g + self.weight_decay * p)
            if not np.all(np.isfinite(v)) or not np.all(np.isfinite(p + v)):
                raise NumericError(f"non-finite update for parameter {i}")
            staged.append(v)
        for i, (p, v) in enumerate(zip(params, staged)):
            self._velocity[i] = v
            p += v


def sgd_step(
    model: MlpModel,
    grads: Gradients,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    optimizer: Optional[Sgd] = None,
) -> MlpModel:
    """One SGD step on every layer parameter, in place.

    Pass the same ``optimizer`` across calls to carry the momentum buffer.
    """
    opt = optimizer if optimizer is not None else Sgd(lr, momentum, weight_decay)
    opt.update(model.params(), grads.arrays())
    return model


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: MlpModel, path) -> None:
    """Write ``model`` as little-endian binary, or JSON when the suffix is .json."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(checkpoint_dict(model), sort_keys=True) + "\n")
        return
    path.write_bytes(checkpoint_bytes(model))


def checkpoint_dict(model: MlpModel) -> dict:
    return {
        "magic": CHECKPOINT_MAGIC.decode(),
        "layer_count": len(model.layers),
        "class_count": model.class_count,
        "layers": [
            {
                "d_in": l.d_in,
                "d_out": l.d_out,
                "activation": l.activation,
                "weights": l.weight.ravel().tolist(),
                "bias": l.bias.tolist(),
            }
            for l in model.layers
        ],
        "att": None if model.att is None else {
            "k": model.att.shape[0], "d": model.att.shape[1], "values": model.att.ravel().tolist()
        },
    }


def checkpoint_bytes(model: MlpModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", len(model.layers), model.class_count)]
    for l in model.layers:
        parts.append(struct.pack("<IIB", l.d_in, l.d_out, ACTIVATIONS.index(l.activation)))
        parts.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    if model.att is None:
        parts.append(struct.pack("<II", 0, 0))
    else:
        parts.append(struct.pack("<II", *model.att.shape))
        parts.append(np.ascontiguousarray(model.att, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw.startswith(CHECKPOINT_MAGIC):
        return _from_bytes(raw)
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: not a UAST1 checkpoint") from exc
    return _from_dict(doc)


def _from_bytes(raw: bytes) -> MlpModel:
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ParseError("truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def take_floats(count):
        nonlocal pos
        end = pos + 8 * count
        if end > len(raw):
            raise ParseError("truncated checkpoint")
        arr = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64)
        pos = end
        return arr

    n_layers, n_classes = take("<II")
    layers = []
    for _ in range(n_layers):
        d_in, d_out, act = take("<IIB")
        w = take_floats(d_in * d_out).reshape(d_in, d_out)
        b = take_floats(d_out)
        layers.append(Layer(w, b, ACTIVATIONS[act]))
    att = None
    if pos < len(raw):
        k, d = take("<II")
        if k:
            att = take_floats(k * d).reshape(k, d)
    model = MlpModel(layers, att)
    if model.class_count != n_classes:
        raise ParseError(f"header says {n_classes} classes, head has {model.class_count}")
    return model


def _from_dict(doc: dict) -> MlpModel:
    if doc.get("magic") != CHECKPOINT_MAGIC.decode():
        raise ParseError("missing UAST1 magic")
    layers = [
        Layer(
            np.asarray(l["weights"], dtype=np.float64).reshape(l["d_in"], l["d_out"]),
            np.asarray(l["bias"], dtype=np.float64),
            l["activation"],
        )
        for l in doc["layers"]
    ]
    att = doc.get("att")
    att = None if att is None else np.asarray(att["values"], dtype=np.float64).reshape(att["k"], att["d"])
    return MlpModel(layers, att)
