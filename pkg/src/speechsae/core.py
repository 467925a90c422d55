"""Dense linear algebra helpers, top-k selection and a counter-based RNG.

Matrices are plain 2-D numpy arrays. The hot path stores float32 and
accumulates dot products in float64.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_matrix(data, dtype=np.float32) -> np.ndarray:
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix contains non-finite entries")
    return m


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``m @ v`` with float64 accumulation, returned in ``m``'s dtype."""
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ContractError(f"matvec shape mismatch: {m.shape} @ {v.shape}")
    out_dtype = np.result_type(m.dtype, np.float32)
    return (m.astype(np.float64) @ v.astype(np.float64)).astype(out_dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in float64; callers choose the output precision."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask selecting exactly ``k`` entries per row of ``z``.

    Ties at the k-th largest value go to the lowest indices.
    """
    z = np.atleast_2d(z)
    n = z.shape[1]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} out of range for length {n}")
    if k == n:
        return np.ones(z.shape, dtype=bool)
    kth = np.partition(z, n - k, axis=1)[:, n - k][:, None]
    above = z > kth
    tied = z == kth
    need = k - above.sum(axis=1)
    crowded = np.flatnonzero(tied.sum(axis=1) > need)
    if len(crowded):
        rows = tied[crowded]
        tied[crowded] = rows & (np.cumsum(rows, axis=1) <= need[crowded, None])
    return above | tied


def topk_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values of ``v``, ascending by index."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ContractError("topk_indices expects a vector")
    if not 1 <= k <= v.shape[0]:
        raise ContractError(f"k={k} out of range for length {v.shape[0]}")
    return np.flatnonzero(topk_mask(v[None, :], k)[0])


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream addressed by an explicit counter.

    Output ``i`` is ``mix(seed + (i + 1) * gamma)``, so the stream depends only
    on the seed and numpy's wrapping uint64 arithmetic.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        s = np.array([self.seed], dtype=np.uint64)
        for key in keys:
            k = np.array([int(key) & _MASK64], dtype=np.uint64)
            with np.errstate(over="ignore"):
                s = _mix(s ^ _mix(k + _GAMMA))
        return Rng(int(s[0]))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u.reshape(shape)
        return float(out) if size is None else out

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return loc + scale * z.reshape(shape)

    def integers(self, high: int, size) -> np.ndarray:
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choose_distinct(self, n: int, s: int, rows: int) -> np.ndarray:
        """``rows`` independent draws of ``s`` distinct values from ``range(n)``."""
        if not 1 <= s <= n:
            raise ContractError(f"cannot draw {s} distinct values from {n}")
        keys = self.uniform((rows, n))
        return np.sort(np.argpartition(keys, s - 1, axis=1)[:, :s], axis=1)
