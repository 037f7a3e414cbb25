"""Dense float64 helpers, a seeded random stream, and a finite-difference oracle.

Matrices throughout the package are plain 2-D numpy arrays (float64,
row-major); vectors are 1-D. All randomness flows through :class:`Rng`, a
thin wrapper over numpy's PCG64 bit generator, so equal seeds give identical
streams regardless of platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float64 array; reject anything else."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit conformance check.

    Delegates to numpy's ``@`` (which may parallelize internally but is
    deterministic for fixed inputs on a fixed build).
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, "
            f"{a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


class Rng:
    """Deterministic random stream backed by PCG64.

    The seed is kept around so a stream can be reconstructed or forked
    (``child``) without global state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def child(self, offset: int = 1) -> "Rng":
        """A fresh stream with a derived seed (deterministic, uncorrelated in use)."""
        return Rng(self.seed * 1_000_003 + offset)


def gaussian_sample(rng: Rng, n: int) -> np.ndarray:
    """n iid standard-normal draws from the given stream."""
    if n < 1:
        raise ValueError(f"gaussian_sample: n must be >= 1, got {n}")
    return rng.standard_normal(n)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Accepts any array shape; the returned gradient has the same shape. Used
    as the independent check against the analytic backward passes.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place below
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    g = np.empty_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_grad: non-finite value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return g
