"""Dense numerical substrate: a small MLP with hand-derived backprop,
numerically stable softmax cross-entropy, cosine similarity, momentum
updates, and a counter-based deterministic random source.

Everything runs in 64-bit floats. Inputs may be single vectors ``(d,)``
or row batches ``(n, d)``; weight gradients accumulate over batch rows.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    NumericalError,
    TapeError,
    ZeroVectorError,
)

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def _mix64(x: int) -> int:
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, which is exactly what we want
    with np.errstate(over="ignore"):
        x = x.copy()
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


class Rng:
    """Counter-based deterministic random source.

    The stream is a pure function of (seed, counter), so the same seed
    always reproduces the same sequence. ``substream`` derives an
    independent stream keyed by arbitrary labels; adding draws to one
    component never perturbs any other component's sequence.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def substream(self, *key) -> "Rng":
        """Derive an independent stream keyed by (seed, *key)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.seed.to_bytes(8, "little"))
        for part in key:
            h.update(repr(part).encode("utf-8"))
            h.update(b"\x1f")
        return Rng(int.from_bytes(h.digest(), "little"))

    def _next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * _GAMMA) & _MASK64)

    def _bits_block(self, n: int) -> np.ndarray:
        """n raw uint64 words, consuming n counter positions."""
        start = self.counter
        self.counter += n
        idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        return _mix64_array(state)

    def uniform(self) -> float:
        """One double in (0, 1]."""
        return ((self._next_u64() >> 11) + 1) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in (0, 1]."""
        bits = self._bits_block(n)
        return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53

    def standard_normal(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal draws via Box-Muller.

        Consumes 2*ceil(n/2) uniforms so the stream position does not
        depend on parity bookkeeping.
        """
        if n <= 0:
            raise ValueError(f"need n > 0, got {n}")
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        radius = np.sqrt(-2.0 * np.log(u[:m]))
        theta = (2.0 * math.pi) * u[m:]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return z[:n]

    def integer(self, low: int, high: int) -> int:
        """One integer in [low, high). Modulo bias is negligible for any
        span this package uses (span << 2**64)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        return low + self._next_u64() % span

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order random."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = self.integer(i, n)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def choice_with_replacement(self, n: int, k: int) -> list[int]:
        return [self.integer(0, n) for _ in range(k)]


def rng_standard_normal(rng: Rng, n: int) -> np.ndarray:
    """Module-level alias for Rng.standard_normal."""
    return rng.standard_normal(n)


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains non-finite values")


def as_vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise DimensionMismatchError(what, "a nonempty 1-D vector", v.shape)
    return v


# ---------------------------------------------------------------------------
# MLP with explicit tape
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("identity", "tanh", "relu")


@dataclass
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimensionMismatchError("layer weight", "2-D matrix", self.weight.shape)
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatchError(
                "layer bias", (self.weight.shape[0],), self.bias.shape
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        ensure_finite(self.weight, "layer weight")
        ensure_finite(self.bias, "layer bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionMismatchError(
                    "consecutive layer dims", a.out_dim, b.in_dim
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def freeze(self) -> None:
        """Make all parameter arrays read-only."""
        for l in self.layers:
            l.weight.setflags(write=False)
            l.bias.setflags(write=False)


@dataclass
class MlpTape:
    params: MlpParams
    inputs: list[np.ndarray] = field(default_factory=list)  # activation entering layer i
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of layer i


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Forward pass. ``inputs`` is (in_dim,) or (n, in_dim); the tape
    records everything needed for an exact gradient replay."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise DimensionMismatchError("mlp input", params.in_dim, x.shape[-1])
    tape = MlpTape(params)
    a = x
    for layer in params.layers:
        tape.inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        tape.pre.append(z)
        a = _apply_activation(z, layer.activation)
    return a, tape


def mlp_backward(
    params: MlpParams, tape: MlpTape, output_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backward pass for a recorded forward call.

    Returns ([(dW, db) per layer], input_grad). For batched tapes the
    weight gradients are summed over rows.
    """
    if tape.params is not params:
        raise TapeError("tape was recorded with different parameters")
    if len(tape.pre) != len(params.layers):
        raise TapeError("tape layer count does not match parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.pre[-1].shape:
        raise DimensionMismatchError("output grad", tape.pre[-1].shape, g.shape)
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for layer, a_in, z in zip(
        reversed(params.layers), reversed(tape.inputs), reversed(tape.pre)
    ):
        g = g * _activation_grad(z, layer.activation)
        if g.ndim == 1:
            dw = np.outer(g, a_in)
            db = g.copy()
        else:
            dw = g.T @ a_in
            db = g.sum(axis=0)
        g = g @ layer.weight
        grads.append((dw, db))
    grads.reverse()
    return grads, g


# ---------------------------------------------------------------------------
# Losses and similarities
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target_index: int) -> tuple[float, np.ndarray]:
    """Loss -log softmax(logits)[target] and its gradient w.r.t. logits."""
    z = as_vector(logits, "logits")
    if not 0 <= target_index < z.shape[0]:
        raise IndexError(
            f"target index {target_index} out of range for {z.shape[0]} logits"
        )
    log_p = log_softmax(z)
    grad = np.exp(log_p)
    grad[target_index] -= 1.0
    return float(-log_p[target_index]), grad


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; errors on zero norm."""
    va = as_vector(a, "cosine lhs")
    vb = as_vector(b, "cosine rhs")
    if va.shape != vb.shape:
        raise DimensionMismatchError("cosine operands", va.shape, vb.shape)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def momentum_update(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD-with-momentum step: v <- momentum*v + g, p <- p - lr*v."""
    if grad.shape != param.shape:
        raise DimensionMismatchError("gradient", param.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in momentum update")
    v = momentum * velocity + grad
    return param - lr * v, v
