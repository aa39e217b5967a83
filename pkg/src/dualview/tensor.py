"""Dense float64 kernels with a fixed summation order, plus seeded initialization.

Matrix products accumulate sequentially over the inner axis (one rank-1
update per step), so a result matches a plain triple loop to the last bit
and does not depend on the BLAS build.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import NonFinite, NotDivisible, ShapeMismatch
from .validation import check_finite


def matmul(a, b):
    """Product of ``a (..., m, k)`` and ``b (..., k, n)``; leading axes broadcast."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]))
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def softmax_rows(x):
    """Softmax over the last axis, shifted by the row maximum."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("softmax input contains NaN or Inf")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def avg_pool(x, kh: int, kw: int):
    """Mean over non-overlapping ``kh x kw`` windows of an (h, w, d) array."""
    x = np.asarray(x, dtype=np.float64)
    h, w, d = x.shape[-3:]
    if kh < 1 or kw < 1 or h % kh or w % kw:
        raise NotDivisible(f"window {kh}x{kw} does not tile {h}x{w}")
    t = x.reshape(x.shape[:-3] + (h // kh, kh, w // kw, kw, d))
    return t.mean(axis=(-4, -2))


@dataclass
class LinearParams:
    """``y = x @ weight + bias`` with ``weight`` of shape (d_in, d_out)."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeMismatch(f"weight must be 2-D, got {self.weight.shape}")
        check_finite(self.weight, "weight")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[1],):
                raise ShapeMismatch(
                    f"bias shape {self.bias.shape} does not match d_out={self.weight.shape[1]}"
                )
            check_finite(self.bias, "bias")

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]


def linear(x, p: LinearParams):
    out = matmul(x, p.weight)
    if p.bias is not None:
        out = out + p.bias
    return out


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 stream.

    Draw ``k`` (counting from 1) mixes ``seed + k * 0x9E3779B97F4A7C15``,
    so the sequence is a pure function of the seed and of how many values
    have been drawn before.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; always consumes an even number of draws."""
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = 1.0 - u[:m], u[m:]  # u1 in (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return (std * z[:n]).reshape(shape)


def round_to_f32(x: np.ndarray) -> np.ndarray:
    """Float64 values exactly representable in float32 (lossless to serialize)."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)
