"""Dense tensor utilities.

Dense tensors are plain ``numpy.ndarray`` objects of dtype float64 stored in
row-major (C) order. With that ordering the last index varies fastest, so a
reshape of the first ``i`` axes against the rest is a free view and the
Kronecker product ``np.kron`` matches unfoldings:

    unfold(A o (M1, ..., Md), i) = kron(M1..Mi).T @ unfold(A, i) @ kron(Mi+1..Md)

where ``(A o (M1, ..., Md))[x1, ..., xd] = A(M1 x1, ..., Md xd)``.
"""

from __future__ import annotations

import itertools
import math
from functools import reduce
from typing import Sequence

import numpy as np

__all__ = [
    "DenseGuardError",
    "MAX_DENSE_ELEMENTS",
    "set_dense_guard",
    "check_dense_size",
    "unfold",
    "fold",
    "matricize",
    "kron",
    "kron_all",
    "multilinear_transform",
    "probe_dense",
    "hs_inner",
    "hs_norm",
    "symmetrize_inputs",
    "precondition",
    "forward_value",
]

MAX_DENSE_ELEMENTS = 10**8


class DenseGuardError(MemoryError):
    """Raised when a dense tensor would exceed the element-count guard."""


def set_dense_guard(limit: int) -> int:
    """Set the dense element-count guard and return the previous value."""
    global MAX_DENSE_ELEMENTS
    previous = MAX_DENSE_ELEMENTS
    MAX_DENSE_ELEMENTS = int(limit)
    return previous


def check_dense_size(shape: Sequence[int]) -> int:
    size = math.prod(int(s) for s in shape)
    if size > MAX_DENSE_ELEMENTS:
        raise DenseGuardError(
            f"dense tensor of shape {tuple(shape)} has {size} elements, "
            f"limit is {MAX_DENSE_ELEMENTS}"
        )
    return size


def _as_tensor(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim == 0:
        raise ValueError("tensor must have at least one index")
    return T


def unfold(T, i: int) -> np.ndarray:
    """Group the first ``i`` indices into rows and the rest into columns."""
    T = _as_tensor(T)
    d = T.ndim
    if not 0 <= i <= d:
        raise IndexError(f"unfolding index {i} out of range 0..{d}")
    rows = math.prod(T.shape[:i])
    return T.reshape(rows, -1)


def fold(M, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for any split point."""
    return np.asarray(M, dtype=float).reshape(tuple(shape))


def matricize(T, i: int) -> np.ndarray:
    """Index ``i`` (1-based) as rows, all other indices (in order) as columns."""
    T = _as_tensor(T)
    d = T.ndim
    if not 1 <= i <= d:
        raise IndexError(f"matricization index {i} out of range 1..{d}")
    return np.moveaxis(T, i - 1, 0).reshape(T.shape[i - 1], -1)


def kron(X, Y) -> np.ndarray:
    """Kronecker product matching row-major unfoldings."""
    return np.kron(np.asarray(X, dtype=float), np.asarray(Y, dtype=float))


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    if not mats:
        return np.ones((1, 1))
    return reduce(kron, mats)


def multilinear_transform(A, mats: Sequence[np.ndarray]) -> np.ndarray:
    """Return F with F[x1..xd] = A(M1 x1, ..., Md xd), i.e. contract Mi.T into axis i."""
    F = _as_tensor(A)
    if len(mats) != F.ndim:
        raise ValueError("need one matrix per index")
    for axis, M in enumerate(mats):
        M = np.asarray(M, dtype=float)
        if M.shape[0] != F.shape[axis]:
            raise ValueError(f"matrix {axis} has {M.shape[0]} rows, index has extent {F.shape[axis]}")
        F = np.moveaxis(np.tensordot(F, M, axes=([axis], [0])), -1, axis)
    return F


def probe_dense(T, ws: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Contract ``T`` with every vector except one, for each index in turn."""
    T = _as_tensor(T)
    d = T.ndim
    if len(ws) != d:
        raise ValueError(f"expected {d} probing vectors, got {len(ws)}")
    ws = [np.asarray(w, dtype=float) for w in ws]
    for i, w in enumerate(ws):
        if w.shape != (T.shape[i],):
            raise ValueError(f"vector {i} has shape {w.shape}, expected ({T.shape[i]},)")
    zs = []
    for i in range(d):
        Z = T
        # contract from the last axis down so axis numbers stay valid
        for j in reversed(range(d)):
            if j != i:
                Z = np.tensordot(Z, ws[j], axes=([j], [0]))
        zs.append(Z)
    return zs


def forward_value(T, x: np.ndarray, k: int | None = None) -> np.ndarray:
    """Contract the first ``k`` indices of ``T`` with ``x`` (default: all but the last)."""
    T = _as_tensor(T)
    k = T.ndim - 1 if k is None else k
    Z = T
    for _ in range(k):
        Z = np.tensordot(x, Z, axes=([0], [0]))
    return Z


def hs_inner(A, B) -> float:
    A = _as_tensor(A)
    B = _as_tensor(B)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.dot(A.ravel(), B.ravel()))


def hs_norm(A) -> float:
    return float(np.linalg.norm(_as_tensor(A).ravel()))


def symmetrize_inputs(T, k: int) -> np.ndarray:
    """Average ``T`` over all permutations of its first ``k`` indices."""
    T = _as_tensor(T)
    if k > T.ndim:
        raise ValueError("k exceeds tensor order")
    if len(set(T.shape[:k])) > 1:
        raise ValueError(f"first {k} extents differ: {T.shape[:k]}")
    if k <= 1:
        return T.copy()
    rest = tuple(range(k, T.ndim))
    acc = np.zeros_like(T)
    perms = list(itertools.permutations(range(k)))
    for perm in perms:
        acc += np.transpose(T, perm + rest)
    return acc / len(perms)


def precondition(B, C, k: int) -> np.ndarray:
    """Return F with F(x1..xk, .) = B(C x1, ..., C xk, .)."""
    B = _as_tensor(B)
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("C must be square")
    if k > B.ndim or any(B.shape[a] != C.shape[0] for a in range(k)):
        raise ValueError(f"first {k} extents of B must equal {C.shape[0]}")
    eye = [np.eye(n) for n in B.shape[k:]]
    return multilinear_transform(B, [C] * k + eye)
