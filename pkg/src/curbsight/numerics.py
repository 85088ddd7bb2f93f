"""Vector and matrix kernels shared by both retrieval branches and the adapter merge.

Everything is computed in float64 regardless of the input dtype.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite values")
    return v


def as_matrix(values) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    return m


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    return float(np.dot(a, b))


def norm(a) -> float:
    a = as_vector(a)
    return float(np.sqrt(np.dot(a, a)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1]."""
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    # sqrt(aa * bb) keeps cos(a, a) == 1 exactly; fall back when the product leaves the float range
    denom = np.sqrt(aa * bb)
    if not np.isfinite(denom) or denom == 0.0:
        denom = np.sqrt(aa) * np.sqrt(bb)
    return min(1.0, max(-1.0, float(np.dot(a, b)) / float(denom)))


def lora_merge(W, A, B) -> np.ndarray:
    """Return ``W + A @ B``: a frozen weight plus its low-rank update.

    No scaling factor is applied. An all-zero update returns a copy of ``W``
    unchanged bit for bit.
    """
    W, A, B = as_matrix(W), as_matrix(A), as_matrix(B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"A is {A.shape} but B is {B.shape}: inner dimensions differ")
    if W.shape != (A.shape[0], B.shape[1]):
        raise ShapeError(f"W is {W.shape} but A @ B is {(A.shape[0], B.shape[1])}")
    delta = A @ B
    if not delta.any():
        return W.copy()
    return W + delta
