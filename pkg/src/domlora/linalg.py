"""Dense float64 matrix primitives and deterministic, splittable random streams.

Everything downstream (model gradients, sensitivity scores, adapter
initialization, Monte Carlo estimates) is built on the few functions here,
so the contracts are strict: float64 only, finite values only, and a fixed
summation order so norm/trace identities hold bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Counter-based generator; equal seeds reproduce equal streams on every
# platform, and child streams can be split off for parallel workers.
RNG_ALGORITHM = "philox-4x64"


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 2-D array with finite entries."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.size and not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


def frobenius_sq(m) -> float:
    """Sum of squared entries, accumulated in row-major order."""
    m = as_matrix(m)
    return float(np.sum(np.square(m)))


def trace_of_gram(m) -> float:
    """tr(m^T m), the trace of the Gram matrix of ``m``.

    Algebraically this is the row-major sum of squared entries, and it is
    evaluated with the exact summation order of :func:`frobenius_sq` so the
    identity ``trace_of_gram(m) == frobenius_sq(m)`` holds bit-for-bit.
    """
    m = as_matrix(m)
    return float(np.sum(np.square(m)))


@dataclass(frozen=True)
class RngState:
    """Name for a deterministic random stream.

    A state is (seed, path); the path grows when streams are split.  The
    same state always yields the same draws, no matter how often or where
    it is consumed, so functions taking an RngState are pure.  Callers that
    need distinct draws split first.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RngState":
        if index < 0:
            raise ValueError("child index must be nonnegative")
        return RngState(self.seed, self.path + (index,))

    def split(self, n: int) -> list["RngState"]:
        if n < 1:
            raise ValueError("cannot split into fewer than one stream")
        return [self.child(i) for i in range(n)]


def kaiming_uniform_init(rng: RngState, r: int, d_in: int) -> np.ndarray:
    """Draw an (r, d_in) matrix with i.i.d. entries from U(-1/sqrt(d_in), 1/sqrt(d_in)).

    Each entry has mean 0 and second moment 1/(3 d_in).
    """
    if r < 1 or d_in < 1:
        raise ValueError(f"dimensions must be >= 1, got r={r}, d_in={d_in}")
    bound = 1.0 / np.sqrt(float(d_in))
    return rng.generator().uniform(-bound, bound, size=(r, d_in))
