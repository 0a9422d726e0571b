"""Dense float64 helpers and seeded random streams shared across the package."""
from __future__ import annotations

import hashlib

import numpy as np
import scipy.linalg


class NumericsError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *tags) -> int:
    """Deterministically derive a child seed from a parent seed and string/int tags."""
    h = hashlib.sha256(str(int(seed)).encode())
    for t in tags:
        h.update(b"/" + str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} contains non-finite entries")


def solve_ridge(A, B, eta: float) -> np.ndarray:
    """Solve ``(A + eta*I) X = B`` for symmetric ``A``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NumericsError(f"A must be square, got shape {A.shape}")
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise NumericsError(f"dimension mismatch: A {A.shape}, B {B.shape}")
    if not eta > 0:
        raise NumericsError("eta must be positive")
    _check_finite("A", A)
    _check_finite("B", B)
    M = A + eta * np.eye(A.shape[0])
    X = scipy.linalg.solve(M, B, assume_a="sym")
    return X[:, 0] if vec else X


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise NumericsError("cannot normalize a zero vector")
    _check_finite("v", v)
    return v / norm
