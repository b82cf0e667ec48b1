"""A small fully-connected network engine used to score candidate weights.

Provides forward inference (fitness), a backward pass (diagonal Fisher
estimates), activation capture (input Gram matrices for regression-mean
merging), and plain SGD training (to manufacture populations of fine-tuned
checkpoints). Weights live in float32 checkpoints; all computation happens in
float64 internally so gradient checks against finite differences are tight.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor_store import F32, FlatVector, ParamSchema, SchemaMismatch

_ACTIVATIONS = ("tanh", "relu")


class DimensionMismatch(ValueError):
    """Batch features do not match the network's input width."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected classifier.

    ``layer_dims`` is (input, hidden..., classes). Linear layers are named
    ``layer{i}.weight`` (shape [out, in]) and ``layer{i}.bias`` (shape [out]),
    which fixes a deterministic mapping onto a ParamSchema.
    """

    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least (input, classes)")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def weight_name(self, i: int) -> str:
        return f"layer{i}.weight"

    def bias_name(self, i: int) -> str:
        return f"layer{i}.bias"

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.layer_dims[i], self.layer_dims[i + 1]
            shapes[self.weight_name(i)] = (fan_out, fan_in)
            shapes[self.bias_name(i)] = (fan_out,)
        return shapes

    def param_schema(self) -> ParamSchema:
        return _cached_schema(self)

    def to_json(self) -> str:
        return json.dumps({"layer_dims": list(self.layer_dims), "activation": self.activation})

    @classmethod
    def from_json(cls, text: str) -> "MlpSpec":
        obj = json.loads(text)
        return cls(layer_dims=tuple(obj["layer_dims"]), activation=obj["activation"])


@functools.lru_cache(maxsize=None)
def _cached_schema(spec: "MlpSpec") -> ParamSchema:
    return ParamSchema.from_shapes(spec.tensor_shapes())


@dataclass(frozen=True)
class Batch:
    """Features [n, input_dim] with integer labels [n]."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError(f"labels shape {labels.shape} does not match {feats.shape[0]} rows")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


def concat_batches(batches) -> Batch:
    feats = np.concatenate([b.features for b in batches], axis=0)
    labels = np.concatenate([b.labels for b in batches], axis=0)
    return Batch(feats, labels)


def _check_compat(spec: MlpSpec, weights: FlatVector, batch: Batch | None = None) -> None:
    if weights.schema != spec.param_schema():
        raise SchemaMismatch("weights schema does not match the network spec")
    if batch is not None:
        if batch.features.shape[1] != spec.input_dim:
            raise DimensionMismatch(
                f"batch has {batch.features.shape[1]} features, network expects {spec.input_dim}"
            )
        if len(batch) and batch.labels.max() >= spec.n_classes:
            raise ValueError("labels exceed the network's class count")


def _layer_params(spec: MlpSpec, values64: np.ndarray):
    """Yield (W [out, in], b [out]) float64 views per layer."""
    schema = spec.param_schema()
    for i in range(spec.n_layers):
        ws = schema.slot(spec.weight_name(i))
        bs = schema.slot(spec.bias_name(i))
        w = values64[ws.offset : ws.offset + ws.size].reshape(ws.shape)
        b = values64[bs.offset : bs.offset + bs.size]
        yield w, b


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


def _forward_cached(spec: MlpSpec, values64: np.ndarray, features: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for backprop."""
    inputs = []
    preacts = []
    x = features
    params = list(_layer_params(spec, values64))
    for li, (w, b) in enumerate(params):
        inputs.append(x)
        z = x @ w.T + b
        preacts.append(z)
        x = _activate(z, spec.activation) if li < len(params) - 1 else z
    return x, inputs, preacts


def forward(spec: MlpSpec, weights: FlatVector, batch: Batch) -> np.ndarray:
    """Logits [n, classes]; pure, deterministic, weights untouched."""
    _check_compat(spec, weights, batch)
    values64 = weights.values.astype(np.float64)
    logits, _, _ = _forward_cached(spec, values64, batch.features)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


_PREDICT_CHUNK = 512


def predict(spec: MlpSpec, weights: FlatVector, batch: Batch) -> np.ndarray:
    """Predicted labels; argmax ties go to the lowest class index.

    Rows are processed in fixed-size chunks so peak memory stays bounded for
    arbitrarily long batches.
    """
    _check_compat(spec, weights, batch)
    values64 = weights.values.astype(np.float64)
    n = len(batch)
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, _PREDICT_CHUNK):
        stop = min(start + _PREDICT_CHUNK, n)
        logits, _, _ = _forward_cached(spec, values64, batch.features[start:stop])
        preds[start:stop] = np.argmax(logits, axis=1)
    return preds


def accuracy(spec: MlpSpec, weights: FlatVector, batch: Batch) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    preds = predict(spec, weights, batch)
    return float(np.mean(preds == batch.labels))


def macro_f1(spec: MlpSpec, weights: FlatVector, batch: Batch) -> float:
    """Unweighted mean of per-class F1 over all classes of the spec."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    preds = predict(spec, weights, batch)
    f1s = []
    for c in range(spec.n_classes):
        tp = int(np.sum((preds == c) & (batch.labels == c)))
        fp = int(np.sum((preds == c) & (batch.labels != c)))
        fn = int(np.sum((preds != c) & (batch.labels == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def _backward(spec: MlpSpec, values64: np.ndarray, inputs, preacts, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar objective wrt the flat parameter vector.

    ``dlogits`` is d(objective)/d(logits), shape [n, classes]; rows are summed.
    """
    schema = spec.param_schema()
    grad = np.zeros(schema.total_dim, dtype=np.float64)
    params = list(_layer_params(spec, values64))
    dz = dlogits
    for li in range(len(params) - 1, -1, -1):
        w, _ = params[li]
        dw = dz.T @ inputs[li]
        db = dz.sum(axis=0)
        ws = schema.slot(spec.weight_name(li))
        bs = schema.slot(spec.bias_name(li))
        grad[ws.offset : ws.offset + ws.size] = dw.reshape(-1)
        grad[bs.offset : bs.offset + bs.size] = db
        if li > 0:
            dx = dz @ w
            dz = dx * _activate_grad(preacts[li - 1], spec.activation)
    return grad


def log_likelihood_and_grad(spec: MlpSpec, weights: FlatVector, features: np.ndarray, label: int):
    """(log p(label | x), d log p / d theta) for a single example, in float64."""
    _check_compat(spec, weights)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.shape[1] != spec.input_dim:
        raise DimensionMismatch("feature width does not match the network input")
    values64 = weights.values.astype(np.float64)
    logits, inputs, preacts = _forward_cached(spec, values64, features)
    logp_rows = log_softmax(logits)
    probs = np.exp(logp_rows)
    onehot = np.zeros_like(probs)
    onehot[0, label] = 1.0
    grad = _backward(spec, values64, inputs, preacts, onehot - probs)
    return float(logp_rows[0, label]), grad


@dataclass(frozen=True)
class FisherState:
    """Per-model diagonal Fisher estimate, aligned with the weight schema."""

    diagonal: FlatVector
    sample_count: int

    def __post_init__(self):
        if np.any(self.diagonal.values < 0):
            raise ValueError("Fisher diagonal entries must be non-negative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def fisher_diagonal(
    spec: MlpSpec,
    weights: FlatVector,
    batch: Batch,
    label_mode: str = "sampled",
    m_draws: int | None = None,
    seed: int = 0,
) -> FisherState:
    """Average of squared per-example log-likelihood gradients over ``m_draws``.

    Draw m uses example m % n. ``sampled`` draws the label from the model's
    own predictive distribution (the usual Fisher-merging recipe);
    ``empirical`` uses the batch label.
    """
    if label_mode not in ("sampled", "empirical"):
        raise ValueError(f"label_mode must be 'sampled' or 'empirical', got {label_mode!r}")
    _check_compat(spec, weights, batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    m = len(batch) if m_draws is None else int(m_draws)
    if m < 1:
        raise ValueError("m_draws must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    probs = softmax(forward(spec, weights, batch))
    acc = np.zeros(spec.param_schema().total_dim, dtype=np.float64)
    for draw in range(m):
        idx = draw % len(batch)
        if label_mode == "sampled":
            label = int(rng.choice(spec.n_classes, p=probs[idx]))
        else:
            label = int(batch.labels[idx])
        _, grad = log_likelihood_and_grad(spec, weights, batch.features[idx], label)
        acc += grad * grad
    acc /= m
    diag = FlatVector(schema=weights.schema, values=acc.astype(F32))
    return FisherState(diagonal=diag, sample_count=m)


@dataclass(frozen=True)
class GramState:
    """Input Gram matrix X^T X per linear layer, keyed by the weight tensor name."""

    grams: dict[str, np.ndarray]
    sample_count: int

    def __post_init__(self):
        frozen = {}
        for name, g in self.grams.items():
            g = np.ascontiguousarray(g, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError(f"Gram for {name!r} must be square, got {g.shape}")
            if not np.allclose(g, g.T, atol=1e-9):
                raise ValueError(f"Gram for {name!r} is not symmetric")
            g = g.copy()
            g.flags.writeable = False
            frozen[name] = g
        object.__setattr__(self, "grams", frozen)


def capture_grams(spec: MlpSpec, weights: FlatVector, batch: Batch) -> GramState:
    """Accumulate each linear layer's input inner-product matrix over the batch."""
    _check_compat(spec, weights, batch)
    values64 = weights.values.astype(np.float64)
    _, inputs, _ = _forward_cached(spec, values64, batch.features)
    grams = {spec.weight_name(i): inputs[i].T @ inputs[i] for i in range(spec.n_layers)}
    return GramState(grams=grams, sample_count=len(batch))


def init_weights(spec: MlpSpec, seed: int) -> FlatVector:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, drawn in schema slot order."""
    schema = spec.param_schema()
    fan_in = {}
    for i in range(spec.n_layers):
        fan_in[spec.weight_name(i)] = spec.layer_dims[i]
        fan_in[spec.bias_name(i)] = spec.layer_dims[i]
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 1], dtype=np.uint64)))
    values = np.empty(schema.total_dim, dtype=F32)
    for slot in schema.slots:
        bound = 1.0 / math.sqrt(fan_in[slot.name])
        values[slot.offset : slot.offset + slot.size] = rng.uniform(
            -bound, bound, size=slot.size
        ).astype(F32)
    return FlatVector(schema=schema, values=values)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0


def _mean_ce_grad(spec: MlpSpec, values64: np.ndarray, feats: np.ndarray, labels: np.ndarray):
    logits, inputs, preacts = _forward_cached(spec, values64, feats)
    logp = log_softmax(logits)
    n = feats.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    grad = _backward(spec, values64, inputs, preacts, (probs - onehot) / n)
    return loss, grad


def train(spec: MlpSpec, init: FlatVector, data: Batch, hyper: TrainConfig) -> FlatVector:
    """Mini-batch SGD on cross-entropy; deterministic under the config seed."""
    _check_compat(spec, init, data)
    if len(data) == 0:
        raise ValueError("empty training batch")
    rng = np.random.Generator(np.random.Philox(key=np.array([hyper.seed, 2], dtype=np.uint64)))
    values = init.values.astype(np.float64)
    n = len(data)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grad = _mean_ce_grad(spec, values, data.features[idx], data.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // hyper.batch_size}")
            values -= hyper.lr * grad
    return FlatVector(schema=init.schema, values=values.astype(F32))
