"""Deterministic dense linear algebra and elementary functions.

Everything here is plain float64 numpy with no hidden state. A "matrix"
is a 2-D, row-major float64 ndarray; vectors are 1-D float64 ndarrays.
All reference math stays in double precision so that quantization error
can be measured against it without float noise.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import erf

Matrix = np.ndarray

DEFAULT_LN_EPS = 1e-6


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Dense product with double-precision accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def layernorm(x: Matrix, gamma, beta, eps: float = DEFAULT_LN_EPS) -> Matrix:
    """Per-row normalization followed by the per-channel affine (gamma, beta).

    Uses the population variance (divide by the row length). eps guards the
    zero-variance row; a constant row maps to beta exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("layernorm expects a 2-D input")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(
            f"gamma/beta length must equal the column count {x.shape[1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def softmax_row(x) -> np.ndarray:
    """Numerically stable softmax of a single row (max-subtracted)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax_row expects a non-empty 1-D array")
    e = np.exp(x - x.max())
    return e / e.sum()


def gelu(x):
    """Exact erf-based GELU, x * Phi(x). Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return out if out.ndim else float(out)


class Rng:
    """Counter-based deterministic random source (Philox-4x64-2 keyed streams).

    The same (seed, label path) yields a bit-identical stream on every
    platform. Sub-streams are derived by hashing a text label into the
    second Philox key word, so generation order never depends on call
    interleaving across streams.
    """

    def __init__(self, seed: int, _key1: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._key1 = int(_key1)
        key = np.array([self.seed, self._key1], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, label: str) -> "Rng":
        """Independent child stream named by label (stable across runs)."""
        digest = hashlib.blake2b(
            f"{self._key1}/{label}".encode(), digest_size=8
        ).digest()
        return Rng(self.seed, int.from_bytes(digest, "little"))

    def normal(self, rows: int, cols: int | None = None, scale: float = 1.0):
        shape = (rows,) if cols is None else (rows, cols)
        return self._gen.standard_normal(shape) * scale

    def lognormal(self, n: int, sigma: float) -> np.ndarray:
        return np.exp(self._gen.standard_normal(n) * sigma)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)
