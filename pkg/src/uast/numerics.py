"""Dense linear algebra, seeded randomness and gradient-checking helpers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and rank 2.
Products are accumulated in a fixed order (inner index ascending) so that
every run reproduces bit-identical results, independent of the BLAS build.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_CHUNK_ELEMENTS = 1 << 20
_WIDE_OUTPUT = 512  # above this many outputs, loop over the inner index instead
_SEED_MASK = (1 << 64) - 1


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite float64 matrix, raising ShapeError otherwise."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with sequential accumulation over the inner index.

    Each output entry equals ``s = 0.0; for k: s += a[i, k] * b[k, j]``
    exactly, which is what makes results reproducible across machines.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    n, inner = a.shape
    if inner != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    m = b.shape[1]
    out = np.zeros((n, m))
    if n == 0 or m == 0 or inner == 0:
        return out
    if n * m >= _WIDE_OUTPUT:
        cols = np.ascontiguousarray(a.T)
        tmp = np.empty_like(out)
        for k in range(inner):
            np.multiply(cols[k][:, None], b[k], out=tmp)
            out += tmp
        return out
    step = max(1, _CHUNK_ELEMENTS // (inner * m))
    for start in range(0, n, step):
        stop = min(n, start + step)
        terms = a[start:stop, :, None] * b[None, :, :]
        # add.accumulate is strictly sequential along the axis; +0.0 maps -0.0 to 0.0
        out[start:stop] = np.add.accumulate(terms, axis=1)[:, -1, :] + 0.0
    return out


def seq_sum(values, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` in ascending index order."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] == 0:
        return np.zeros(np.delete(values.shape, axis))
    return np.take(np.add.accumulate(values, axis=axis), -1, axis=axis)


def row_softmax(m, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``temperature * row`` for every row, with max subtraction."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    s = float(temperature) * np.asarray(m, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {s.shape}")
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(math.sqrt(float(np.sum(m * m))))


def orthogonality_residual(w) -> float:
    """``||W W^T - I||_F`` with I the rows x rows identity."""
    w = np.asarray(w, dtype=np.float64)
    gram = matmul(w, w.T)
    return frobenius_norm(gram - np.eye(w.shape[0]))


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not h > 0:
        raise ParameterError(f"step must be positive, got {h}")
    at = np.array(at, dtype=np.float64)
    grad = np.zeros_like(at)
    probe = at.copy()
    for idx in np.ndindex(at.shape):
        orig = probe[idx]
        probe[idx] = orig + h
        up = float(f(probe))
        probe[idx] = orig - h
        down = float(f(probe))
        probe[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite function value near index {idx}")
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, abs_floor: float = 1e-7) -> float:
    """Largest entrywise relative error, ignoring entries where both sides are tiny."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= abs_floor, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


class SeededRng:
    """Reproducible random stream on a counter-based (Philox) generator.

    Normal deviates come from the Box-Muller transform of the uniform stream.
    Instances are single-owner; use :meth:`split` to hand independent
    streams to workers.
    """

    def __init__(self, seed: int, spawn_key: tuple = ()):
        self.seed = int(seed) & _SEED_MASK
        self.spawn_key = tuple(int(k) & _SEED_MASK for k in spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: int) -> "SeededRng":
        """Child stream determined only by (seed, spawn path, keys), not by draws so far."""
        return SeededRng(self.seed, self.spawn_key + tuple(keys))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        out = out[:count]
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs, size=None):
        """Inverse-CDF draws from a (not necessarily normalized) probability vector."""
        p = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(p)
        u = self.uniform(size) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, len(p) - 1)
