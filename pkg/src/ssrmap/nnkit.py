"""Minimal dense-network kit: forward, exact reverse-mode backward, Adam.

Everything is float64 and deterministic under a fixed seed.  Parameters
of a network travel as one flat vector (all layer weights in layer
order, each raveled row-major, then all biases in layer order); the
same ordering is used by the checkpoint format and the optimizer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PARAMS_MAGIC = b"SSRN"
PARAMS_VERSION = 1

_ACTIVATIONS = ("identity", "tanh")

__all__ = [
    "DenseNet",
    "AdamState",
    "adam_step",
    "dump_params",
    "parse_params",
    "save_params",
    "load_params",
]


class DenseNet:
    """Fully connected net with identity or tanh hidden activations.

    The output layer is always linear.  Weights are (fan_in, fan_out)
    matrices applied as ``x @ W + b``.
    """

    def __init__(
        self,
        layer_sizes: tuple[int, ...] | list[int],
        activation: str = "identity",
        *,
        init: str = "gaussian",
        init_scale: float = 0.01,
        seed: int = 0,
    ) -> None:
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if init not in ("gaussian", "identity"):
            raise ValueError("init must be 'gaussian' or 'identity'")
        self.layer_sizes = layer_sizes
        self.activation = activation
        rng = np.random.default_rng([seed, 0x1217])
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = rng.normal(0.0, init_scale, size=(fan_in, fan_out))
            if init == "identity":
                m = min(fan_in, fan_out)
                w[:m, :m] += np.eye(m)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Run the net on a (B, in) batch, keeping layer inputs for backward."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input dim {x.shape[1]} does not match net input {self.layer_sizes[0]}"
            )
        cache = [x]
        out = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = out @ w + b
            if i != last and self.activation == "tanh":
                out = np.tanh(out)
            cache.append(out)
        if squeeze:
            return out[0], cache
        return out, cache

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact reverse-mode pass.

        Args:
            cache: layer inputs recorded by forward_cached.
            grad_out: dL/d(output), same shape as the forward output.

        Returns:
            (flat parameter gradient, dL/d(input batch)).
        """
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.ndim == 1:
            grad_out = grad_out[None, :]
        grads_w: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        grads_b: list[np.ndarray] = [np.empty(0)] * len(self.biases)
        delta = grad_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last and self.activation == "tanh":
                # cache[i + 1] stores tanh output; derivative is 1 - y^2.
                delta = delta * (1.0 - cache[i + 1] ** 2)
            grads_w[i] = cache[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        flat = np.concatenate(
            [g.ravel() for g in grads_w] + [g.ravel() for g in grads_b]
        )
        return flat, delta

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} params, got {flat.shape}")
        pos = 0
        for w in self.weights:
            w[...] = flat[pos : pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = flat[pos : pos + b.size]
            pos += b.size


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, num_params: int) -> "AdamState":
        return cls(m=np.zeros(num_params), v=np.zeros(num_params))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    learning_rate: float = 1e-4,
) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shapes differ")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def dump_params(net: DenseNet) -> bytes:
    """Little-endian binary form of the net: sizes, activation, fp64 params."""
    flat = net.get_params()
    act = _ACTIVATIONS.index(net.activation)
    return (
        PARAMS_MAGIC
        + struct.pack("<HBH", PARAMS_VERSION, act, len(net.layer_sizes))
        + struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
        + flat.astype("<f8").tobytes()
    )


def save_params(net: DenseNet, path: str) -> None:
    """Write a binary checkpoint of the net parameters."""
    with open(path, "wb") as fh:
        fh.write(dump_params(net))


def parse_params(blob: bytes) -> DenseNet:
    """Inverse of dump_params (exact round-trip)."""
    if blob[:4] != PARAMS_MAGIC:
        raise ValueError(f"not a parameter file: bad magic {blob[:4]!r}")
    version, act, nsizes = struct.unpack_from("<HBH", blob, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    if act >= len(_ACTIVATIONS):
        raise ValueError(f"unknown activation code {act}")
    sizes = struct.unpack_from(f"<{nsizes}I", blob, 9)
    offset = 9 + 4 * nsizes
    net = DenseNet(sizes, activation=_ACTIVATIONS[act], init_scale=0.0)
    expected = net.num_params * 8
    payload = blob[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"parameter payload is {len(payload)} bytes, expected {expected}"
        )
    net.set_params(np.frombuffer(payload, dtype="<f8").copy())
    return net


def load_params(path: str) -> DenseNet:
    """Read a checkpoint back into a fresh DenseNet."""
    with open(path, "rb") as fh:
        return parse_params(fh.read())
