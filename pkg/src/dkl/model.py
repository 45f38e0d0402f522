"""Small dense rectifier network with explicit backpropagation.

Just enough model to host the losses in real training loops: affine
layers with ReLU between them, plain momentum SGD, and a flat binary
parameter file. Everything is float64 and deterministic; the forward pass
is safe for concurrent read-only use of the parameters.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError

__all__ = [
    "MlpParams",
    "ForwardCache",
    "init_mlp",
    "forward",
    "backward",
    "SgdOptimizer",
    "cosine_lr",
    "save_params",
    "load_params",
]

PARAMS_MAGIC = b"DKLM"


@dataclass
class MlpParams:
    """Per-layer weight matrices (fan_in, fan_out) and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights) + (self.weights[-1].shape[1],)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    """Activations kept from one forward pass for the matching backward."""

    dims: tuple[int, ...]
    inputs: list[np.ndarray]  # layer inputs: x, then each hidden activation
    pre: list[np.ndarray]     # pre-activations of the hidden layers


def init_mlp(dims, seed=0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Same seed gives bitwise-identical parameters.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"dims must list at least two positive sizes, got {dims}")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward(params: MlpParams, batch) -> tuple[np.ndarray, ForwardCache]:
    """Affine + ReLU hidden layers, affine output; returns raw logits."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ValueError(f"batch must be (B, {params.dims[0]}), got {x.shape}")
    inputs, pre = [x], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == last:
            return z, ForwardCache(params.dims, inputs, pre)
        pre.append(z)
        h = np.maximum(z, 0.0)
        inputs.append(h)
    raise AssertionError("unreachable")


def backward(params: MlpParams, cache: ForwardCache, grad_logits) -> tuple[MlpParams, np.ndarray]:
    """Exact reverse-mode gradients of sum(logits * grad_logits).

    Callers fold any batch reduction into grad_logits. Returns the
    parameter gradients (same container shape as the parameters) and the
    gradient with respect to the input batch.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.dims != params.dims:
        raise ValueError(f"cache built for dims {cache.dims}, params have {params.dims}")
    if g.shape != (cache.inputs[0].shape[0], params.dims[-1]):
        raise ValueError(f"grad_logits must be (B, {params.dims[-1]}), got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("grad_logits must be finite")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    delta = g
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (cache.pre[i - 1] > 0.0)
    return MlpParams(gw, gb), delta


class SgdOptimizer:
    """Momentum SGD with a decoupled L2 term.

    v <- mu * v + g;  p <- p - lr * (v + wd * p)

    The velocity accumulates only the loss gradient, so under a constant
    gradient it converges to g / (1 - mu).
    """

    def __init__(self, params: MlpParams, momentum: float = 0.9, weight_decay: float = 5e-4):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._vel = [np.zeros_like(a) for a in params.weights + params.biases]

    def step(self, params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
        if lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        arrays = params.weights + params.biases
        grad_arrays = grads.weights + grads.biases
        for p, g, v in zip(arrays, grad_arrays, self._vel):
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradients")
            v *= self.momentum
            v += g
            p -= lr * (v + self.weight_decay * p)
        return params


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine schedule: base_lr at step 0, zero at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0


def save_params(path, params: MlpParams) -> None:
    """Flat binary file: magic, dims header (u32 count + u32 dims), then
    little-endian float64 payload, per layer weights then bias."""
    dims = params.dims
    chunks = [PARAMS_MAGIC, struct.pack("<I", len(dims))]
    chunks.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PARAMS_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}, expected {PARAMS_MAGIC!r}")
    if len(blob) < 8:
        raise FileFormatError(f"{path}: truncated header")
    (ndims,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 4 * ndims
    if ndims < 2 or len(blob) < header_end:
        raise FileFormatError(f"{path}: bad dims header (count {ndims})")
    dims = struct.unpack_from(f"<{ndims}I", blob, 8)
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    payload = np.frombuffer(blob, dtype="<f8", offset=header_end)
    if payload.size != expected:
        raise FileFormatError(f"{path}: payload holds {payload.size} floats, dims {dims} need {expected}")
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(payload[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(payload[pos:pos + fan_out].copy())
        pos += fan_out
    return MlpParams(weights, biases)
