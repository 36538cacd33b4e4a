"""Log-domain arithmetic, deterministic RNG, and a finite-difference gradient checker.

All probabilities in this package live in the natural-log domain; exact zero
probability is represented by -inf. Everything is 64-bit float.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

LOG_ZERO = -np.inf


def log_sum_exp(values: Sequence[float] | np.ndarray) -> float:
    """ln(sum(exp(v))) via the max-shift trick; exact -inf when all inputs are -inf."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty list")
    m = np.max(v)
    if m == LOG_ZERO:
        return LOG_ZERO
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_add(a: float, b: float) -> float:
    """ln(exp(a) + exp(b)) for two scalars."""
    if a == LOG_ZERO:
        return b
    if b == LOG_ZERO:
        return a
    return float(np.logaddexp(a, b))


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error ||a-b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream (PCG64); identical seeds give identical draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_seed(seed: int, *indices: int) -> int:
    """Derive a stable sub-seed, e.g. one per utterance of a corpus.

    Indices may be negative (e.g. signed dB levels); they are mapped to
    unsigned 64-bit entropy words."""
    words = [int(i) & 0xFFFFFFFFFFFFFFFF for i in (seed, *indices)]
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)
