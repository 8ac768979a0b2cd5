"""Dense feed-forward networks with layer-addressable parameters.

All parameters are float64 numpy arrays, frozen after construction:
operations return new models instead of mutating, which makes layer
substitution, flattening, and sharing across workers trivially safe.
Backpropagation is written out by hand; the only optimizer is plain SGD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")

CHECKPOINT_MAGIC = b"FEDBED-MODEL-V1\n"


class ShapeError(ValueError):
    """Layer shapes, labels, or vector lengths do not line up."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ArchSpec:
    """Recipe for a dense network: input width, hidden widths, class count.

    Hidden layers use relu, the final layer ends in a softmax. The string
    form (arch_id) encodes the full shape chain, so two models with equal
    arch_id are guaranteed layout-compatible.
    """

    input_dim: int
    hidden: tuple[int, ...]
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for i, w in enumerate(self.widths):
            if w <= 0:
                raise ShapeError(f"layer {i}: width must be positive, got {w}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def arch_id(self) -> str:
        return "mlp-" + "x".join(str(w) for w in self.widths)

    @classmethod
    def from_arch_id(cls, arch_id: str) -> "ArchSpec":
        if not arch_id.startswith("mlp-"):
            raise ShapeError(f"unparseable arch_id: {arch_id!r}")
        try:
            widths = [int(w) for w in arch_id[4:].split("x")]
        except ValueError:
            raise ShapeError(f"unparseable arch_id: {arch_id!r}") from None
        if len(widths) < 2:
            raise ShapeError(f"arch_id needs at least two widths: {arch_id!r}")
        return cls(widths[0], tuple(widths[1:-1]), widths[-1])

    def layer_name(self, index: int) -> str:
        return f"fc{index + 1}"


@dataclass(frozen=True)
class LayerBlock:
    name: str
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2:
            raise ShapeError(f"{self.name}: weights must be 2-d")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"{self.name}: bias length {self.bias.shape[0]} != output width "
                f"{self.weights.shape[1]}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class Model:
    layers: tuple[LayerBlock, ...]
    arch_id: str

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].fan_out != self.layers[k + 1].fan_in:
                raise ShapeError(
                    f"layer {k + 1} ({self.layers[k + 1].name}): input width "
                    f"{self.layers[k + 1].fan_in} != previous output width "
                    f"{self.layers[k].fan_out}"
                )
        names = [b.name for b in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate layer names")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def num_params(self) -> int:
        return sum(b.size for b in self.layers)

    def layer(self, name: str) -> LayerBlock:
        for b in self.layers:
            if b.name == name:
                return b
        raise ShapeError(f"unknown layer name {name!r}")

    def layer_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.layers)


@dataclass(frozen=True)
class GradBlock:
    name: str
    d_weights: np.ndarray
    d_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d_weights", _frozen(self.d_weights))
        object.__setattr__(self, "d_bias", _frozen(self.d_bias))


@dataclass(frozen=True)
class GradientSet:
    blocks: tuple[GradBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))


@dataclass(frozen=True)
class FlatVector:
    """A model's parameters as one contiguous vector plus its layer layout.

    layout entries are (layer name, offset, length); they tile the value
    vector exactly, in layer order, with weights preceding the bias inside
    each block.
    """

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "layout", tuple(map(tuple, self.layout)))
        if self.values.ndim != 1:
            raise ShapeError("flat vector must be 1-d")
        cursor = 0
        for name, offset, length in self.layout:
            if offset != cursor or length <= 0:
                raise ShapeError(f"layout has a gap or overlap at {name!r}")
            cursor += length
        if cursor != self.values.size:
            raise ShapeError(
                f"layout covers {cursor} values, vector has {self.values.size}"
            )

    def block(self, name: str) -> np.ndarray:
        for n, offset, length in self.layout:
            if n == name:
                return self.values[offset : offset + length]
        raise ShapeError(f"unknown layer name {name!r}")


def build_model(arch: ArchSpec, seed: int) -> Model:
    """Deterministically initialize a dense model from an architecture recipe.

    Weights are uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)),
    biases start at zero. Same (arch, seed) gives bit-identical models.
    """
    if arch.num_layers < 2:
        raise ShapeError("architecture must have at least 2 parameterized layers")
    rng = np.random.default_rng(seed)
    widths = arch.widths
    layers = []
    for k in range(arch.num_layers):
        fan_in, fan_out = widths[k], widths[k + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        activation = "softmax" if k == arch.num_layers - 1 else "relu"
        layers.append(
            LayerBlock(arch.layer_name(k), w, np.zeros(fan_out), activation)
        )
    return Model(tuple(layers), arch.arch_id)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError("inputs must be a vector or a (n, d) batch")
    return x, False


def _forward_raw(weights, biases, activations, x):
    """Forward pass on raw arrays; returns (pre-activations, activations)."""
    pre, act = [], [x]
    a = x
    for w, b, kind in zip(weights, biases, activations):
        z = a @ w + b
        if kind == "relu":
            a = np.maximum(z, 0.0)
        elif kind == "identity":
            a = z
        else:
            a = _softmax(z)
        pre.append(z)
        act.append(a)
    return pre, act


def forward(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Class scores per sample; softmax rows sum to 1."""
    x, single = _as_batch(inputs)
    if x.shape[1] != model.input_dim:
        raise ShapeError(
            f"input width {x.shape[1]} != first layer width {model.input_dim}"
        )
    _, act = _forward_raw(
        [b.weights for b in model.layers],
        [b.bias for b in model.layers],
        [b.activation for b in model.layers],
        x,
    )
    out = act[-1]
    return out[0] if single else out


def _backprop_raw(weights, biases, activations, x, y):
    """Mean cross-entropy loss and parameter gradients on raw arrays.

    Requires a softmax final layer; y is a vector of integer labels.
    """
    if activations[-1] != "softmax":
        raise ShapeError("backward requires a softmax output layer")
    n = x.shape[0]
    pre, act = _forward_raw(weights, biases, activations, x)
    z_last = pre[-1]
    shifted = z_last - z_last.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    probs = act[-1]
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n

    d_weights = [None] * len(weights)
    d_biases = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        d_weights[k] = act[k].T @ delta
        d_biases[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ weights[k].T
            if activations[k - 1] == "relu":
                delta = delta * (pre[k - 1] > 0.0)
    return loss, d_weights, d_biases


def backward(model: Model, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, GradientSet]:
    """Mean cross-entropy over the batch plus gradients for every parameter."""
    x, _ = _as_batch(inputs)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != x.shape[0]:
        raise ShapeError("labels and inputs disagree on batch size")
    classes = model.output_dim
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    loss, dws, dbs = _backprop_raw(
        [b.weights for b in model.layers],
        [b.bias for b in model.layers],
        [b.activation for b in model.layers],
        x,
        y,
    )
    blocks = tuple(
        GradBlock(b.name, dw, db)
        for b, dw, db in zip(model.layers, dws, dbs)
    )
    return loss, GradientSet(blocks)


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    """One plain gradient step: every parameter p becomes p - lr * g."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(grads.blocks) != len(model.layers):
        raise ShapeError("gradient set and model disagree on layer count")
    layers = []
    for layer, g in zip(model.layers, grads.blocks):
        if g.d_weights.shape != layer.weights.shape or g.d_bias.shape != layer.bias.shape:
            raise ShapeError(f"{layer.name}: gradient shape mismatch")
        layers.append(
            LayerBlock(
                layer.name,
                layer.weights - lr * g.d_weights,
                layer.bias - lr * g.d_bias,
                layer.activation,
            )
        )
    return Model(tuple(layers), model.arch_id)


def train_local(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch: int,
    rng_seed: int,
) -> Model:
    """Mini-batch SGD on one dataset; shuffle order is derived from rng_seed.

    epochs=0 returns the input model unchanged. Deterministic for a fixed
    seed regardless of platform.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, d) batch")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("labels and inputs disagree on batch size")
    if lr <= 0 or batch < 1 or epochs < 0:
        raise ValueError("need lr > 0, batch >= 1, epochs >= 0")
    if epochs == 0:
        return model
    weights = [b.weights.copy() for b in model.layers]
    biases = [b.bias.copy() for b in model.layers]
    activations = [b.activation for b in model.layers]
    rng = np.random.default_rng(rng_seed)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            _, dws, dbs = _backprop_raw(weights, biases, activations, x[idx], y[idx])
            for k in range(len(weights)):
                weights[k] -= lr * dws[k]
                biases[k] -= lr * dbs[k]
    layers = tuple(
        LayerBlock(b.name, w, bb, b.activation)
        for b, w, bb in zip(model.layers, weights, biases)
    )
    return Model(layers, model.arch_id)


def substitute_layers(base: Model, donor: Model, layer_set: Iterable[str]) -> Model:
    """Copy of `base` with the named layers taken verbatim from `donor`."""
    if base.arch_id != donor.arch_id:
        raise ShapeError(
            f"arch mismatch: {base.arch_id!r} vs {donor.arch_id!r}"
        )
    wanted = set(layer_set)
    known = set(base.layer_names())
    unknown = wanted - known
    if unknown:
        raise ShapeError(f"unknown layer name {sorted(unknown)[0]!r}")
    layers = tuple(
        donor.layers[k] if b.name in wanted else b
        for k, b in enumerate(base.layers)
    )
    return Model(layers, base.arch_id)


def flatten(model: Model) -> FlatVector:
    """Concatenate parameters layer by layer (weights then bias)."""
    chunks = []
    layout = []
    offset = 0
    for b in model.layers:
        chunks.append(b.weights.ravel())
        chunks.append(b.bias)
        layout.append((b.name, offset, b.size))
        offset += b.size
    return FlatVector(np.concatenate(chunks), tuple(layout))


def unflatten(arch: ArchSpec | str, flat: FlatVector | np.ndarray) -> Model:
    """Rebuild a model from its flat parameter vector."""
    spec = ArchSpec.from_arch_id(arch) if isinstance(arch, str) else arch
    values = flat.values if isinstance(flat, FlatVector) else np.asarray(flat, dtype=np.float64)
    widths = spec.widths
    total = sum((widths[k] + 1) * widths[k + 1] for k in range(spec.num_layers))
    if values.ndim != 1 or values.size != total:
        raise ShapeError(
            f"flat vector length {values.size} != parameter count {total} "
            f"of {spec.arch_id}"
        )
    layers = []
    offset = 0
    for k in range(spec.num_layers):
        fan_in, fan_out = widths[k], widths[k + 1]
        w = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset : offset + fan_out]
        offset += fan_out
        activation = "softmax" if k == spec.num_layers - 1 else "relu"
        layers.append(LayerBlock(spec.layer_name(k), w.copy(), b.copy(), activation))
    return Model(tuple(layers), spec.arch_id)


def save_model(path, model: Model) -> None:
    """Checkpoint format: magic header, JSON metadata, raw float64 LE values."""
    flat = flatten(model)
    header = {
        "arch_id": model.arch_id,
        "activations": [b.activation for b in model.layers],
        "shapes": [[b.fan_in, b.fan_out] for b in model.layers],
        "layout": [[n, o, l] for n, o, l in flat.layout],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(flat.values.astype("<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    layers = []
    offset = 0
    for (name, _, _), (fan_in, fan_out), activation in zip(
        header["layout"], header["shapes"], header["activations"]
    ):
        w = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset : offset + fan_out]
        offset += fan_out
        layers.append(LayerBlock(name, w.copy(), b.copy(), activation))
    if offset != values.size:
        raise ShapeError(f"{path}: checkpoint length mismatch")
    return Model(tuple(layers), header["arch_id"])
