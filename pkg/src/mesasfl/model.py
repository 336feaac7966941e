"""Layered parameter containers and a small numpy MLP classifier.

Every parameter block (``W1``, ``b1``, ...) is a named layer inside a
:class:`LayeredModel`. Metrics, attacks and aggregation all operate on these
blocks or on the canonical flattening, which is the concatenation of the
blocks in declaration order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np


class SchemaError(ValueError):
    """Parameter blocks or batch shapes do not line up."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


class LayeredModel:
    """Immutable ordered collection of named float64 parameter blocks."""

    __slots__ = ("_schema", "_flat", "_index")

    def __init__(self, layers: Iterable[tuple[str, np.ndarray]]):
        schema = []
        chunks = []
        offset = 0
        for name, values in layers:
            arr = np.asarray(values, dtype=np.float64)
            schema.append(LayerSpec(str(name), tuple(arr.shape), offset))
            chunks.append(arr.ravel())
            offset += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        self._init(tuple(schema), flat)

    def _init(self, schema: tuple[LayerSpec, ...], flat: np.ndarray) -> None:
        index = {spec.name: i for i, spec in enumerate(schema)}
        if len(index) != len(schema):
            raise SchemaError("layer names must be unique")
        flat = np.array(flat, dtype=np.float64, copy=True)
        flat.setflags(write=False)
        self._schema = schema
        self._flat = flat
        self._index = index

    @classmethod
    def from_flat(cls, schema: Sequence[LayerSpec], flat: np.ndarray) -> "LayeredModel":
        schema = tuple(schema)
        flat = np.asarray(flat, dtype=np.float64)
        expected = schema[-1].stop if schema else 0
        if flat.ndim != 1 or flat.size != expected:
            raise SchemaError(f"flat vector of length {flat.size} does not fit schema of {expected}")
        obj = cls.__new__(cls)
        obj._init(schema, flat)
        return obj

    # -- introspection -------------------------------------------------
    @property
    def schema(self) -> tuple[LayerSpec, ...]:
        return self._schema

    @property
    def names(self) -> list[str]:
        return [spec.name for spec in self._schema]

    @property
    def flat_len(self) -> int:
        return int(self._flat.size)

    def flatten(self) -> np.ndarray:
        """Read-only view of all parameters in declaration order."""
        return self._flat

    def layer_slice(self, name: str) -> slice:
        try:
            spec = self._schema[self._index[name]]
        except KeyError:
            raise SchemaError(f"unknown layer {name!r}") from None
        return slice(spec.offset, spec.stop)

    def layer(self, name: str) -> np.ndarray:
        spec = self._schema[self._index[name]] if name in self._index else None
        if spec is None:
            raise SchemaError(f"unknown layer {name!r}")
        return self._flat[spec.offset:spec.stop].reshape(spec.shape)

    def layers(self) -> list[tuple[str, np.ndarray]]:
        return [(spec.name, self.layer(spec.name)) for spec in self._schema]

    def unflatten(self, vector: np.ndarray) -> "LayeredModel":
        """Build a model with this schema from a flat vector."""
        return LayeredModel.from_flat(self._schema, vector)

    def same_schema(self, other: "LayeredModel") -> bool:
        return self._schema == other._schema

    def check_schema(self, other: "LayeredModel") -> None:
        if not self.same_schema(other):
            raise SchemaError("models have different layer schemas")

    def replace_layers(self, mapping: Mapping[str, np.ndarray]) -> "LayeredModel":
        flat = self._flat.copy()
        for name, values in mapping.items():
            sl = self.layer_slice(name)
            values = np.asarray(values, dtype=np.float64).ravel()
            if values.size != sl.stop - sl.start:
                raise SchemaError(f"layer {name!r} expects {sl.stop - sl.start} values")
            flat[sl] = values
        return LayeredModel.from_flat(self._schema, flat)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other: "LayeredModel") -> "LayeredModel":
        self.check_schema(other)
        return LayeredModel.from_flat(self._schema, self._flat + other._flat)

    def __sub__(self, other: "LayeredModel") -> "LayeredModel":
        self.check_schema(other)
        return LayeredModel.from_flat(self._schema, self._flat - other._flat)

    def __mul__(self, scalar: float) -> "LayeredModel":
        return LayeredModel.from_flat(self._schema, self._flat * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "LayeredModel":
        return LayeredModel.from_flat(self._schema, -self._flat)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayeredModel):
            return NotImplemented
        return self._schema == other._schema and np.array_equal(self._flat, other._flat)

    __hash__ = None  # type: ignore[assignment]

    def norm(self) -> float:
        return float(np.linalg.norm(self._flat))

    def __repr__(self) -> str:
        blocks = ", ".join(f"{s.name}{list(s.shape)}" for s in self._schema)
        return f"LayeredModel({blocks})"


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpArchitecture:
    """ReLU hidden layers, softmax output; weights stored as (fan_in, fan_out)."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    class_count: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.class_count)
        if any(d < 1 for d in dims):
            raise SchemaError(f"all layer widths must be positive, got {dims}")
        if self.class_count < 2:
            raise SchemaError("class_count must be at least 2")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.class_count)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:]), start=1):
            shapes.append((f"W{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return shapes

    def init(self, seed: int) -> LayeredModel:
        # Glorot-uniform weights, zero biases
        rng = np.random.default_rng(seed)
        layers = []
        for name, shape in self.layer_shapes():
            if name.startswith("W"):
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                layers.append((name, rng.uniform(-limit, limit, size=shape)))
            else:
                layers.append((name, np.zeros(shape)))
        return LayeredModel(layers)


@dataclass(frozen=True)
class TrainHyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.005
    batch_size: int = 64
    epochs: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # lr == 0 is allowed as the degenerate no-step case
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def with_seed(self, seed: int) -> "TrainHyperparams":
        return TrainHyperparams(self.learning_rate, self.momentum, self.weight_decay,
                                self.batch_size, self.epochs, int(seed))


def _blocks(schema: Sequence[LayerSpec]) -> list[tuple[LayerSpec, LayerSpec]]:
    if len(schema) % 2 or len(schema) == 0:
        raise SchemaError("MLP schema must consist of (W, b) pairs")
    pairs = []
    for i in range(0, len(schema), 2):
        w, b = schema[i], schema[i + 1]
        if len(w.shape) != 2 or b.shape != (w.shape[1],):
            raise SchemaError(f"blocks {w.name}/{b.name} are not a dense layer")
        pairs.append((w, b))
    for (w0, _), (w1, _) in zip(pairs[:-1], pairs[1:]):
        if w0.shape[1] != w1.shape[0]:
            raise SchemaError(f"{w0.name} output does not feed {w1.name}")
    return pairs


def _check_batch(pairs, features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise SchemaError("batch must be (n, d) features with n labels")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != pairs[0][0].shape[0]:
        raise SchemaError(f"feature dim {x.shape[1]} != input dim {pairs[0][0].shape[0]}")
    classes = pairs[-1][0].shape[1]
    if y.min() < 0 or y.max() >= classes:
        raise SchemaError(f"labels must lie in [0, {classes})")
    return x, y.astype(np.int64)


def _forward(flat: np.ndarray, pairs, x: np.ndarray):
    acts = [x]
    h = x
    last = len(pairs) - 1
    for i, (w, b) in enumerate(pairs):
        W = flat[w.offset:w.stop].reshape(w.shape)
        z = h @ W + flat[b.offset:b.stop]
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def _loss_from_logits(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    probs = expz / denom
    log_probs = shifted - np.log(denom)
    loss = -float(np.mean(log_probs[np.arange(y.size), y]))
    return loss, probs


def loss_and_grad(flat: np.ndarray, schema: Sequence[LayerSpec], features, labels):
    """Mean cross-entropy and its gradient w.r.t. the flat parameter vector."""
    pairs = _blocks(schema)
    x, y = _check_batch(pairs, features, labels)
    acts = _forward(flat, pairs, x)
    loss, probs = _loss_from_logits(acts[-1], y)
    grad = np.empty_like(flat)
    delta = probs
    delta[np.arange(y.size), y] -= 1.0
    delta /= y.size
    for i in range(len(pairs) - 1, -1, -1):
        w, b = pairs[i]
        h_in = acts[i]
        grad[w.offset:w.stop] = (h_in.T @ delta).ravel()
        grad[b.offset:b.stop] = delta.sum(axis=0)
        if i:
            W = flat[w.offset:w.stop].reshape(w.shape)
            delta = (delta @ W.T) * (h_in > 0)
    return loss, grad


def forward_loss(model: LayeredModel, features, labels) -> tuple[float, np.ndarray]:
    """Return (mean cross-entropy, class probabilities) for a batch."""
    pairs = _blocks(model.schema)
    x, y = _check_batch(pairs, features, labels)
    acts = _forward(model.flatten(), pairs, x)
    return _loss_from_logits(acts[-1], y)


def backward(model: LayeredModel, features, labels) -> LayeredModel:
    """Gradient of the mean cross-entropy, in the model's own layer schema."""
    _, grad = loss_and_grad(model.flatten(), model.schema, features, labels)
    return model.unflatten(grad)


def predict(model: LayeredModel, features) -> np.ndarray:
    pairs = _blocks(model.schema)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pairs[0][0].shape[0]:
        raise SchemaError("feature dimension does not match the model")
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(_forward(model.flatten(), pairs, x)[-1], axis=1)


class CompositeLoss(Protocol):
    """Extra objective mixed into the task loss during local training.

    Called once per mini-batch with the current flat parameters and the task
    loss/gradient; returns the combined loss and gradient.
    """

    def __call__(self, params: np.ndarray, task_loss: float,
                 task_grad: np.ndarray) -> tuple[float, np.ndarray]: ...


def train_local(init: LayeredModel, data, hp: TrainHyperparams,
                extra_loss: CompositeLoss | None = None) -> LayeredModel:
    """SGD with momentum and L2 weight decay, starting from ``init``.

    ``data`` is anything exposing ``features`` and ``labels`` arrays (a
    :class:`~mesasfl.data.ClientDataset`). Mini-batch order comes from a
    generator seeded with ``hp.rng_seed`` and nothing else.
    """
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    n = y.size
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    schema = init.schema
    _check_batch(_blocks(schema), x[:1], y[:1])
    rng = np.random.default_rng(hp.rng_seed)
    theta = init.flatten().copy()
    velocity = np.zeros_like(theta)
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, grad = loss_and_grad(theta, schema, x[idx], y[idx])
            if extra_loss is not None:
                loss, grad = extra_loss(theta, loss, grad)
            if hp.weight_decay:
                grad = grad + hp.weight_decay * theta
            velocity = hp.momentum * velocity + grad
            theta = theta - hp.learning_rate * velocity
    return LayeredModel.from_flat(schema, theta)
