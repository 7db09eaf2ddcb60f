"""Small dense-network engine: forward, explicit backprop, SGD/Adam, weight I/O.

Everything is float64. A network is a list of :class:`Layer` objects with
weights shaped ``[out, in]`` so a batch ``x`` of shape ``[n, in]`` maps to
``x @ W.T + b``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh", "linear")
LEAKY_SLOPE = 0.2

WEIGHTS_MAGIC = b"DNWT"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "leaky_relu":
        return np.where(a > 0, a, LEAKY_SLOPE * a)
    if kind == "sigmoid":
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    if kind == "tanh":
        return np.tanh(a)
    if kind == "linear":
        return a
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Derivative of the activation, given pre-activation ``a`` and output ``h``."""
    if kind == "relu":
        return (a > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(a > 0, 1.0, LEAKY_SLOPE)
    if kind == "sigmoid":
        return h * (1.0 - h)
    if kind == "tanh":
        return 1.0 - h * h
    return np.ones_like(a)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]
    net_id: int
    version: int


class DenseNet:
    """Feed-forward stack of dense layers."""

    def __init__(self, layers: Sequence[Layer], rng_seed: int | None = None):
        layers = list(layers)
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ShapeError(
                    f"layer {k} expects {layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {layers[k - 1].out_dim}"
                )
        self.layers = layers
        self.rng_seed = rng_seed
        # bumped on every parameter update so caches from older forwards are rejected
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(layer.activation for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for k in range(len(self.layers)):
            names.extend((f"layer{k}.weight", f"layer{k}.bias"))
        return names

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.rng_seed,
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def __repr__(self) -> str:
        chain = "->".join(str(d) for d in self.dims)
        return f"DenseNet({chain}, {','.join(self.activations)})"


def init(dims: Sequence[int], activations: Sequence[str], seed: int) -> DenseNet:
    """Xavier-uniform weights and zero biases, deterministic in ``seed``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ShapeError("need at least an input and an output dimension")
    if any(d <= 0 for d in dims):
        raise ShapeError(f"dimensions must be positive, got {dims}")
    if len(activations) != len(dims) - 1:
        raise ShapeError(f"{len(dims) - 1} layers but {len(activations)} activations")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers, rng_seed=seed)


def forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input with {net.in_dim} columns, got shape {x.shape}")
    inputs, pre, outputs = [], [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, a)
        pre.append(a)
        outputs.append(h)
    return h, ForwardCache(inputs, pre, outputs, id(net), net.version)


def backward(
    net: DenseNet, cache: ForwardCache, loss_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``dL/d(output)``.

    Returns parameter gradients (same order as ``net.parameters()``) and the
    gradient with respect to the network input.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("forward cache does not belong to the current network state")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        ga = g * _activation_grad(layer.activation, cache.pre[k], cache.outputs[k])
        grads[2 * k] = ga.T @ cache.inputs[k]
        grads[2 * k + 1] = ga.sum(axis=0)
        g = ga @ layer.weight
    return grads, g


# ---------------------------------------------------------------- losses
# Each returns (value, dvalue/dprediction). Means run over every element.

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def bce_loss(prob: np.ndarray, target: np.ndarray, eps: float = 1e-12) -> tuple[float, np.ndarray]:
    p = np.clip(prob, eps, 1.0 - eps)
    value = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p)) / p.size
    return float(value), grad


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def sgd(learning_rate: float) -> OptimizerState:
    return OptimizerState("sgd", learning_rate)


def adam(learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
         eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("adam", learning_rate, beta1, beta2, eps)


def step_params(opt: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray],
                names: list[str] | None = None) -> None:
    """Update ``params`` in place. Works on any flat list of arrays."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    names = names or [f"param{i}" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    opt.step_count += 1
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        return
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def step(opt: OptimizerState, net: DenseNet, grads: list[np.ndarray]) -> tuple[DenseNet, OptimizerState]:
    step_params(opt, net.parameters(), grads, net.parameter_names())
    net.version += 1
    return net, opt


# ---------------------------------------------------------------- weights I/O

@dataclass
class ModelWeights:
    """Ordered flat list of parameter tensors."""

    tensors: list[np.ndarray]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    def to_bytes(self) -> bytes:
        return encode_tensors(self.tensors)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelWeights":
        return cls(decode_tensors(blob))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def encode_tensors(tensors: Sequence[np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<HI", WEIGHTS_VERSION, len(tensors))]
    for t in tensors:
        t = np.ascontiguousarray(t, dtype="<f8")
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(t.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> list[np.ndarray]:
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a weights container (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    offset = 10
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        tensors.append(data.reshape(shape).astype(np.float64))
    if offset != len(blob):
        raise ValueError(f"{len(blob) - offset} trailing bytes in weights container")
    return tensors


def serialize_weights(net: DenseNet) -> ModelWeights:
    return ModelWeights([p.copy() for p in net.parameters()])


def deserialize_weights(weights: ModelWeights, dims: Sequence[int],
                        activations: Sequence[str], rng_seed: int | None = None) -> DenseNet:
    dims = list(dims)
    expected = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        expected.extend([(fan_out, fan_in), (fan_out,)])
    if [tuple(s) for s in weights.shapes] != expected:
        raise ShapeError(f"weights shapes {weights.shapes} do not match architecture {dims}")
    layers = [
        Layer(weights.tensors[2 * k].copy(), weights.tensors[2 * k + 1].copy(), act)
        for k, act in enumerate(activations)
    ]
    return DenseNet(layers, rng_seed)


def load_into(net: DenseNet, tensors: Sequence[np.ndarray]) -> None:
    """Overwrite the parameters of ``net`` in place."""
    params = net.parameters()
    if [p.shape for p in params] != [np.shape(t) for t in tensors]:
        raise ShapeError("tensor shapes do not match network parameters")
    for p, t in zip(params, tensors):
        p[...] = t
    net.version += 1


def save_weights(path: str | Path, net: DenseNet, manifest: dict | None = None) -> None:
    """Write the binary container plus a ``.json`` manifest next to it."""
    path = Path(path)
    blob = serialize_weights(net).to_bytes()
    path.write_bytes(blob)
    meta = {
        "dims": list(net.dims),
        "activations": list(net.activations),
        "seed": net.rng_seed,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    meta.update(manifest or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_weights(path: str | Path) -> DenseNet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    weights = ModelWeights.from_bytes(path.read_bytes())
    return deserialize_weights(weights, meta["dims"], meta["activations"], meta.get("seed"))
