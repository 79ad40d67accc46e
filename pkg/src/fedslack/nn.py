"""Minimal dense-network engine: MLP forward/backward, softmax cross-entropy,
SGD with momentum, flat parameter vectors, and a binary checkpoint format.

Everything is float64 and pure given explicit inputs; models and parameter
vectors are plain values that can be copied between threads freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, LabelError, ShapeError

Layout = tuple[tuple[str, tuple[int, ...]], ...]

CHECKPOINT_MAGIC = b"FSLK"
CHECKPOINT_VERSION = 1


@dataclass
class ParamVector:
    """Flat ordered view of model parameters plus the layout mapping it back."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.size != expected:
            raise ShapeError(
                f"param vector has {self.values.size} values, layout needs {expected}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ShapeError("param vector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def scale(self, a: float) -> "ParamVector":
        return ParamVector(self.values * a, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class Model:
    """MLP with ReLU hidden activations and linear output logits."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "Model":
        """Glorot-uniform initialization: uniform(-a, a), a = sqrt(6/(fi+fo))."""
        if len(dims) < 2:
            raise ShapeError("need at least input and output dims")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def layout(self) -> Layout:
        entries = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            entries.append((f"dense{i}.W", w.shape))
            entries.append((f"dense{i}.b", b.shape))
        return tuple(entries)

    def to_vector(self) -> ParamVector:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return ParamVector(np.concatenate(parts), self.layout)

    def load_vector(self, vec: ParamVector) -> None:
        if vec.layout != self.layout:
            raise ShapeError("param vector layout does not match model")
        off = 0
        for i in range(len(self.weights)):
            n = self.weights[i].size
            self.weights[i] = vec.values[off:off + n].reshape(self.weights[i].shape).copy()
            off += n
            n = self.biases[i].size
            self.biases[i] = vec.values[off:off + n].copy()
            off += n

    def copy(self) -> "Model":
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected ({model.input_dim},)")
    return forward_batch(model, x[None, :])[0]


def forward_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (n, C)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"batch has shape {X.shape}, expected (n, {model.input_dim})")
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cache(model: Model, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping the post-activation of every layer (acts[0] = X)."""
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backprop(model: Model, acts: list[np.ndarray],
             dlogits: np.ndarray) -> tuple[ParamVector, np.ndarray]:
    """Backpropagate d(loss)/d(logits) through the cached forward pass.

    Returns parameter gradients (summed over the batch) and per-sample
    input gradients of shape (n, input_dim).
    """
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    return ParamVector(np.concatenate(parts), model.layout), delta


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy; logits (n, C), y (n,)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(y)), y]


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.intp)


def loss_and_grads(model: Model, x: np.ndarray,
                   y: int) -> tuple[float, ParamVector, np.ndarray]:
    """Cross-entropy loss, parameter gradients, and input gradient for one sample."""
    loss, pgrads, xgrads = batch_loss_and_grads(model, np.asarray(x, dtype=np.float64)[None, :],
                                                np.array([y]))
    return loss, pgrads, xgrads[0]


def batch_loss_and_grads(model: Model, X: np.ndarray,
                         y: np.ndarray) -> tuple[float, ParamVector, np.ndarray]:
    """Mean cross-entropy over a batch, mean parameter grads, per-sample input grads."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"batch has shape {X.shape}, expected (n, {model.input_dim})")
    y = _check_labels(y, model.num_classes)
    n = X.shape[0]
    logits, acts = _forward_cache(model, X)
    p = softmax(logits)
    loss = float(cross_entropy(logits, y).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    pgrads, xgrads = backprop(model, acts, dlogits)
    # backprop sums over the batch; dlogits already carries the 1/n factor,
    # but per-sample input grads must not, so rescale them back.
    return loss, pgrads, xgrads * n


def input_grads_ce(model: Model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample input gradients of the cross-entropy loss (used by attacks)."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y, model.num_classes)
    logits, acts = _forward_cache(model, X)
    p = softmax(logits)
    dlogits = p
    dlogits[np.arange(X.shape[0]), y] -= 1.0
    _, xgrads = backprop(model, acts, dlogits)
    return xgrads


@dataclass
class SgdState:
    """SGD with momentum and weight decay; velocity lives per round."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: ParamVector | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def fresh(self) -> "SgdState":
        return SgdState(self.lr, self.momentum, self.weight_decay)


def sgd_step(model: Model, grads: ParamVector, state: SgdState) -> Model:
    """v <- m*v + g + wd*theta; theta <- theta - lr*v.  Updates model in place."""
    theta = model.to_vector()
    if grads.layout != theta.layout:
        raise ShapeError("gradient layout does not match model")
    if state.velocity is None:
        state.velocity = theta.zeros_like()
    elif state.velocity.layout != theta.layout:
        raise ShapeError("velocity layout does not match model")
    v = state.momentum * state.velocity.values + grads.values \
        + state.weight_decay * theta.values
    state.velocity = ParamVector(v, theta.layout)
    model.load_vector(ParamVector(theta.values - state.lr * v, theta.layout))
    return model


def save_checkpoint(model: Model, path) -> None:
    """Binary checkpoint: magic, version, layer entries, row-major float64 LE."""
    layout = model.layout
    vec = model.to_vector()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(layout)))
        for name, shape in layout:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
        f.write(vec.values.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        layout = []
        for _ in range(n_layers):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            layout.append((name, shape))
        total = sum(int(np.prod(s)) for _, s in layout)
        raw = f.read(total * 8)
        if len(raw) != total * 8:
            raise FormatError("checkpoint truncated")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    # rebuild the MLP from the dense<i>.W shapes
    dims = None
    weights, biases = [], []
    off = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        arr = values[off:off + n].reshape(shape)
        off += n
        if name.endswith(".W"):
            weights.append(arr.copy())
        elif name.endswith(".b"):
            biases.append(arr.copy())
        else:
            raise FormatError(f"unknown layer entry {name!r}")
    if len(weights) != len(biases) or not weights:
        raise FormatError("checkpoint layer entries inconsistent")
    return Model(weights, biases)
