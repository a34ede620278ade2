"""Minimal dense feed-forward network in float64 numpy.

Forward/backward accept a single sample ``(in,)`` or a batch ``(batch, in)``;
batched losses are averaged, so gradients are mean gradients. All operations
return new parameter values (no hidden state), which keeps agents free to
copy parameters between workers.

Parameter wire format (checkpoints, agent-to-server transfer): little-endian
``uint32`` layer count, then per layer ``uint32 out, uint32 in``, then per
layer the row-major weight matrix followed by the bias vector as
little-endian float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, DomainError

__all__ = [
    "Activation",
    "Loss",
    "SgdConfig",
    "NetworkParams",
    "ForwardCache",
    "forward",
    "backprop",
    "backprop_from_output_grad",
    "loss_value",
    "huber_loss",
    "softmax",
    "sgd_step",
    "params_to_bytes",
    "params_from_bytes",
]


class Activation(Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Loss(Enum):
    CROSS_ENTROPY = "cross_entropy"
    HUBER = "huber"
    SQUARED_ERROR = "squared_error"


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be a positive integer")


@dataclass
class NetworkParams:
    """Ordered (weights, bias) pairs; weights are ``(out, in)`` float64."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases must pair up")
        if not self.weights:
            raise DimensionError("network needs at least one layer")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {j}: weight {w.shape} / bias {b.shape}")
            if j > 0 and w.shape[1] != self.weights[j - 1].shape[0]:
                raise DimensionError(
                    f"layer {j} input dim {w.shape[1]} != previous output "
                    f"{self.weights[j - 1].shape[0]}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    def check_finite(self) -> None:
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {j} has non-finite entries")

    @staticmethod
    def glorot(dims: tuple[int, ...] | list, rng: np.random.Generator) -> "NetworkParams":
        """Uniform +-sqrt(6/(in+out)) weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return NetworkParams(weights, biases)

    @staticmethod
    def zeros_like(other: "NetworkParams") -> "NetworkParams":
        return NetworkParams([np.zeros_like(w) for w in other.weights],
                             [np.zeros_like(b) for b in other.biases])


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations retained for backprop."""

    inputs: list          # x fed to each layer, (batch, in)
    preacts: list         # z = x W^T + b, (batch, out)
    activations: tuple
    single: bool          # original input was a 1-D vector


def _apply(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.SIGMOID:
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _apply_grad(act: Activation, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if act is Activation.RELU:
        return grad * (z > 0.0)
    if act is Activation.SIGMOID:
        s = 1.0 / (1.0 + np.exp(-z))
        return grad * s * (1.0 - s)
    return grad


def forward(params: NetworkParams, x, activations) -> tuple[np.ndarray, ForwardCache]:
    """Propagate ``x`` through the network; returns output and backprop cache."""
    activations = tuple(activations)
    if len(activations) != params.n_layers:
        raise DimensionError(f"{len(activations)} activations for {params.n_layers} layers")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(
            f"input dim {x.shape} incompatible with first layer "
            f"{params.weights[0].shape}")
    inputs, preacts = [], []
    for w, b, act in zip(params.weights, params.biases, activations):
        inputs.append(x)
        z = x @ w.T + b
        preacts.append(z)
        x = _apply(act, z)
    out = x[0] if single else x
    return out, ForwardCache(inputs, preacts, activations, single)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def huber_loss(delta):
    """Piecewise loss: ``delta**2 / 2`` inside [-1, 1], ``|delta| - 1/2`` outside."""
    delta = np.asarray(delta, dtype=np.float64)
    small = np.abs(delta) <= 1.0
    out = np.where(small, 0.5 * delta * delta, np.abs(delta) - 0.5)
    return float(out) if out.ndim == 0 else out


def _as_batch(arr, single: bool) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None, ...] if single else arr


def loss_value(output: np.ndarray, target, loss: Loss, single: bool | None = None) -> float:
    """Mean loss over the batch (softmax applied internally for cross-entropy)."""
    output = np.asarray(output, dtype=np.float64)
    if single is None:
        single = output.ndim == 1
    out = _as_batch(output, single)
    if loss is Loss.CROSS_ENTROPY:
        labels = np.atleast_1d(np.asarray(target)).astype(np.int64)
        logp = out - out.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(out.shape[0]), labels].mean())
    tgt = _as_batch(np.asarray(target, dtype=np.float64), single)
    diff = out - tgt
    if loss is Loss.SQUARED_ERROR:
        return float(0.5 * (diff * diff).sum(axis=1).mean())
    if loss is Loss.HUBER:
        return float(huber_loss(diff).sum(axis=1).mean())
    raise DomainError(f"unknown loss {loss!r}")


def _output_grad(output: np.ndarray, target, loss: Loss) -> np.ndarray:
    """d(mean batch loss)/d(output), shape (batch, out)."""
    batch = output.shape[0]
    if loss is Loss.CROSS_ENTROPY:
        labels = np.atleast_1d(np.asarray(target)).astype(np.int64)
        grad = softmax(output)
        grad[np.arange(batch), labels] -= 1.0
        return grad / batch
    tgt = np.asarray(target, dtype=np.float64).reshape(output.shape)
    diff = output - tgt
    if loss is Loss.SQUARED_ERROR:
        return diff / batch
    if loss is Loss.HUBER:
        return np.clip(diff, -1.0, 1.0) / batch
    raise DomainError(f"unknown loss {loss!r}")


def backprop_from_output_grad(params: NetworkParams, cache: ForwardCache,
                              output_grad: np.ndarray) -> NetworkParams:
    """Backpropagate an explicit gradient w.r.t. the network output.

    ``output_grad`` has shape (batch, out) and already carries any batch
    averaging. Returns gradients in a NetworkParams-shaped container.
    """
    grad = np.asarray(output_grad, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    g_weights = [None] * params.n_layers
    g_biases = [None] * params.n_layers
    for j in range(params.n_layers - 1, -1, -1):
        gz = _apply_grad(cache.activations[j], cache.preacts[j], grad)
        g_weights[j] = gz.T @ cache.inputs[j]
        g_biases[j] = gz.sum(axis=0)
        if j > 0:
            grad = gz @ params.weights[j]
    return NetworkParams(g_weights, g_biases)


def backprop(params: NetworkParams, cache: ForwardCache, target,
             loss: Loss) -> NetworkParams:
    """Gradients of the mean batch loss w.r.t. all weights and biases."""
    output = _apply(cache.activations[-1], cache.preacts[-1])
    if loss is Loss.CROSS_ENTROPY and cache.activations[-1] is not Activation.IDENTITY:
        raise DomainError("cross-entropy expects an identity output layer "
                          "(softmax is applied inside the loss)")
    return backprop_from_output_grad(params, cache, _output_grad(output, target, loss))


def sgd_step(params: NetworkParams, grads: NetworkParams,
             config: SgdConfig) -> NetworkParams:
    """One gradient-descent update; returns new parameters."""
    if [w.shape for w in params.weights] != [g.shape for g in grads.weights]:
        raise DimensionError("gradient shapes do not match parameters")
    lr = config.learning_rate
    return NetworkParams(
        [w - lr * g for w, g in zip(params.weights, grads.weights)],
        [b - lr * g for b, g in zip(params.biases, grads.biases)],
    )


def sgd_step_inplace(params: NetworkParams, grads: NetworkParams, lr: float) -> None:
    """In-place update for hot training loops; numerically identical to sgd_step."""
    for w, g in zip(params.weights, grads.weights):
        w -= lr * g
    for b, g in zip(params.biases, grads.biases):
        b -= lr * g


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def params_to_bytes(params: NetworkParams) -> bytes:
    chunks = [struct.pack("<I", params.n_layers)]
    for w in params.weights:
        chunks.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for w, b in zip(params.weights, params.biases):
        chunks.append(w.astype("<f8", copy=False).tobytes(order="C"))
        chunks.append(b.astype("<f8", copy=False).tobytes())
    return b"".join(chunks)


def params_from_bytes(buf: bytes) -> NetworkParams:
    if len(buf) < 4:
        raise ValueError("truncated parameter stream: missing header")
    (n_layers,) = struct.unpack_from("<I", buf, 0)
    if n_layers < 1:
        raise ValueError("parameter stream declares zero layers")
    offset = 4
    shapes = []
    for _ in range(n_layers):
        if offset + 8 > len(buf):
            raise ValueError("truncated parameter stream: incomplete dims")
        out_dim, in_dim = struct.unpack_from("<II", buf, offset)
        shapes.append((out_dim, in_dim))
        offset += 8
    weights, biases = [], []
    for out_dim, in_dim in shapes:
        w_bytes = out_dim * in_dim * 8
        if offset + w_bytes + out_dim * 8 > len(buf):
            raise ValueError("truncated parameter stream: incomplete payload")
        weights.append(np.frombuffer(buf, dtype="<f8", count=out_dim * in_dim,
                                     offset=offset).reshape(out_dim, in_dim).copy())
        offset += w_bytes
        biases.append(np.frombuffer(buf, dtype="<f8", count=out_dim,
                                    offset=offset).copy())
        offset += out_dim * 8
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes in parameter stream")
    return NetworkParams(weights, biases)
