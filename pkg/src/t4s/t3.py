"""Tensor trains and Tucker tensor trains.

A tensor train (TT) is a tuple of cores ``G_i`` of shape ``(r_{i-1}, n_i, r_i)``
with ``r_0 = r_d = 1``. A Tucker tensor train (T3) adds bases ``U_i`` of shape
``(N_i, n_i)``; entry ``[x_1, ..., x_d]`` of the represented tensor is

    sum_{a, j} G_1[a_0, j_1, a_1] ... G_d[a_{d-1}, j_d, a_d] U_1[x_1, j_1] ... U_d[x_d, j_d].

Core unfoldings used throughout:

* left  ``G^L``: ``(r_{i-1} n_i) x r_i``
* right ``G^R``: ``r_{i-1} x (n_i r_i)``
* outer ``G^O``: ``(r_{i-1} r_i) x n_i``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .tensor_core import check_dense_size

__all__ = [
    "TensorTrain",
    "TuckerTensorTrain",
    "Truncation",
    "SpectrumReport",
    "left_unfold",
    "right_unfold",
    "outer_unfold",
    "from_outer",
    "tt_full",
    "contract_full",
    "left_orthogonalize",
    "right_orthogonalize",
    "orthogonalize_bases",
    "t3_svd_dense",
    "t3_svd_implicit",
    "sym_tt_to_t3",
    "zero_pad_ranks",
    "remove_useless_ranks",
    "random_t3",
    "t3_norm",
    "save_t3",
    "load_t3",
]

SV_FLOOR = 1e-14


# ---------------------------------------------------------------- unfoldings


def left_unfold(G: np.ndarray) -> np.ndarray:
    a, n, b = G.shape
    return G.reshape(a * n, b)


def right_unfold(G: np.ndarray) -> np.ndarray:
    a, n, b = G.shape
    return G.reshape(a, n * b)


def outer_unfold(G: np.ndarray) -> np.ndarray:
    a, n, b = G.shape
    return G.transpose(0, 2, 1).reshape(a * b, n)


def from_outer(M: np.ndarray, a: int, b: int) -> np.ndarray:
    """Inverse of :func:`outer_unfold`; the middle extent is ``M.shape[1]``."""
    return M.reshape(a, b, -1).transpose(0, 2, 1)


# ---------------------------------------------------------------- types


def _cores_tuple(cores) -> tuple[np.ndarray, ...]:
    out = tuple(np.asarray(G, dtype=float) for G in cores)
    if not out:
        raise ValueError("a train needs at least one core")
    for i, G in enumerate(out):
        if G.ndim != 3:
            raise ValueError(f"core {i} must be a 3-tensor, got shape {G.shape}")
    if out[0].shape[0] != 1 or out[-1].shape[2] != 1:
        raise ValueError("boundary ranks must be 1")
    for i in range(len(out) - 1):
        if out[i].shape[2] != out[i + 1].shape[0]:
            raise ValueError(f"rank mismatch between cores {i} and {i + 1}")
    return out


@dataclass(frozen=True)
class TensorTrain:
    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "cores", _cores_tuple(self.cores))

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(G.shape[1] for G in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(G.shape[2] for G in self.cores)


@dataclass(frozen=True)
class TuckerTensorTrain:
    bases: tuple[np.ndarray, ...]
    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        cores = _cores_tuple(self.cores)
        bases = tuple(np.asarray(U, dtype=float) for U in self.bases)
        if len(bases) != len(cores):
            raise ValueError("need one basis per core")
        for i, (U, G) in enumerate(zip(bases, cores)):
            if U.ndim != 2 or U.shape[1] != G.shape[1]:
                raise ValueError(f"basis {i} shape {U.shape} does not match core {G.shape}")
        object.__setattr__(self, "cores", cores)
        object.__setattr__(self, "bases", bases)

    @classmethod
    def from_tt(cls, tt: TensorTrain) -> "TuckerTensorTrain":
        return cls(tuple(np.eye(n) for n in tt.dims), tt.cores)

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(U.shape[0] for U in self.bases)

    @property
    def tucker_ranks(self) -> tuple[int, ...]:
        return tuple(U.shape[1] for U in self.bases)

    @property
    def tt_ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(G.shape[2] for G in self.cores)

    @property
    def tt(self) -> TensorTrain:
        return TensorTrain(self.cores)

    def copy(self) -> "TuckerTensorTrain":
        return TuckerTensorTrain(tuple(U.copy() for U in self.bases), tuple(G.copy() for G in self.cores))

    def scaled(self, c: float) -> "TuckerTensorTrain":
        cores = list(self.cores)
        cores[-1] = cores[-1] * c
        return TuckerTensorTrain(self.bases, tuple(cores))


@dataclass(frozen=True)
class Truncation:
    """Truncation rule for the T3-SVD algorithms.

    ``rtol`` drops the smallest singular values of each SVD while their
    root-sum-square stays within ``rtol`` times the norm of all of them.
    ``max_tucker`` caps ``n_i``; ``max_tt`` caps ``r_0..r_d`` (boundary entries
    are ignored) or ``r_1..r_{d-1}``. Rules combine by taking the smallest rank.
    With ``floor`` set, singular values below ``1e-14 * sigma_max`` count as
    zero; clearing it keeps exactly the capped ranks (used by retraction).
    """

    rtol: float = 0.0
    max_tucker: tuple[int, ...] | None = None
    max_tt: tuple[int, ...] | None = None
    floor: bool = True

    @classmethod
    def to_ranks(cls, n: Sequence[int], r: Sequence[int], floor: bool = True) -> "Truncation":
        return cls(0.0, tuple(int(x) for x in n), tuple(int(x) for x in r), floor)

    def tucker_cap(self, i: int) -> int | None:
        return None if self.max_tucker is None else int(self.max_tucker[i])

    def tt_cap(self, i: int, d: int) -> int | None:
        """Cap for edge ``i`` (between cores i-1 and i, 1-based, 1..d-1)."""
        if self.max_tt is None:
            return None
        caps = tuple(self.max_tt)
        if len(caps) == d + 1:
            return int(caps[i])
        if len(caps) == d - 1:
            return int(caps[i - 1])
        raise ValueError(f"max_tt must have length {d + 1} or {d - 1}")


@dataclass
class SpectrumReport:
    tucker_singular_values: list[np.ndarray] = field(default_factory=list)
    tt_singular_values: list[np.ndarray] = field(default_factory=list)


def _choose_rank(s: np.ndarray, rtol: float, cap: int | None, floor: bool = True) -> int:
    if not floor and cap is not None:
        return max(min(cap, s.size), 1)
    if s.size == 0 or s[0] <= 0.0:
        return 1
    keep = int(np.count_nonzero(s > SV_FLOOR * s[0]))
    if rtol > 0.0:
        tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]  # tail[k] = norm of s[k:]
        ok = np.nonzero(tail <= rtol * tail[0])[0]
        if ok.size:
            keep = min(keep, int(ok[0]))
    if cap is not None:
        keep = min(keep, cap)
    return max(keep, 1)


def _svd(M: np.ndarray):
    try:
        return np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg

        return scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")


# ---------------------------------------------------------------- contraction


def tt_full(tt: TensorTrain | Sequence[np.ndarray]) -> np.ndarray:
    cores = tt.cores if isinstance(tt, TensorTrain) else _cores_tuple(tt)
    dims = tuple(G.shape[1] for G in cores)
    check_dense_size(dims)
    Z = cores[0].reshape(-1, cores[0].shape[2])
    for G in cores[1:]:
        Z = (Z @ right_unfold(G)).reshape(-1, G.shape[2])
    return Z.reshape(dims)


def contract_full(T: TuckerTensorTrain) -> np.ndarray:
    """Dense tensor represented by a Tucker tensor train."""
    check_dense_size(T.shape)
    Z = np.ones((1, 1))
    for U, G in zip(T.bases, T.cores):
        H = np.einsum("ajb,xj->axb", G, U)
        Z = (Z @ right_unfold(H)).reshape(-1, H.shape[2])
    return Z.reshape(T.shape)


# ---------------------------------------------------------------- orthogonalization


def left_orthogonalize(tt: TensorTrain, upto: int | None = None) -> TensorTrain:
    """Make cores ``0..upto-1`` left orthogonal (default: all but the last)."""
    cores = [G.copy() for G in tt.cores]
    d = len(cores)
    upto = d - 1 if upto is None else upto
    for i in range(upto):
        a, n, b = cores[i].shape
        Q, R = np.linalg.qr(left_unfold(cores[i]))
        cores[i] = Q.reshape(a, n, Q.shape[1])
        cores[i + 1] = np.einsum("ab,bjc->ajc", R, cores[i + 1])
    return TensorTrain(cores)


def right_orthogonalize(tt: TensorTrain, downto: int = 1) -> TensorTrain:
    """Make cores ``downto..d-1`` right orthogonal (default: all but the first)."""
    cores = [G.copy() for G in tt.cores]
    for i in range(len(cores) - 1, downto - 1, -1):
        a, n, b = cores[i].shape
        Q, R = np.linalg.qr(right_unfold(cores[i]).T)
        cores[i] = Q.T.reshape(Q.shape[1], n, b)
        cores[i - 1] = np.einsum("ajb,cb->ajc", cores[i - 1], R)
    return TensorTrain(cores)


def orthogonalize_bases(T: TuckerTensorTrain) -> TuckerTensorTrain:
    bases, cores = [], []
    for U, G in zip(T.bases, T.cores):
        Q, R = np.linalg.qr(U)
        bases.append(Q)
        cores.append(np.einsum("xy,ayb->axb", R, G))
    return TuckerTensorTrain(bases, cores)


# ---------------------------------------------------------------- T3-SVD


def t3_svd_dense(T, truncation: Truncation | None = None) -> tuple[TuckerTensorTrain, SpectrumReport]:
    """Compress a dense tensor into a Tucker tensor train by sequential SVDs."""
    T = np.asarray(T, dtype=float)
    trunc = truncation or Truncation()
    dims = T.shape
    d = len(dims)
    check_dense_size(dims)
    report = SpectrumReport()
    bases, cores = [], []
    X = T.reshape((1,) + dims)  # (r, N_i, N_{i+1}, ...)
    for i in range(d):
        r = X.shape[0]
        rest = dims[i + 1 :]
        M = np.moveaxis(X, 1, 0).reshape(dims[i], -1)
        W, s, Vt = _svd(M)
        report.tucker_singular_values.append(s)
        n = _choose_rank(s, trunc.rtol, trunc.tucker_cap(i), trunc.floor)
        bases.append(W[:, :n])
        Y = (s[:n, None] * Vt[:n]).reshape((n, r) + rest)
        Y = np.moveaxis(Y, 0, 1)  # (r, n, rest...)
        if i < d - 1:
            W, s, Vt = _svd(Y.reshape(r * n, -1))
            report.tt_singular_values.append(s)
            rn = _choose_rank(s, trunc.rtol, trunc.tt_cap(i + 1, d), trunc.floor)
            cores.append(W[:, :rn].reshape(r, n, rn))
            X = (s[:rn, None] * Vt[:rn]).reshape((rn,) + rest)
        else:
            cores.append(Y.reshape(r, n, 1))
    return TuckerTensorTrain(bases, cores), report


def t3_svd_implicit(
    T: TuckerTensorTrain, truncation: Truncation | None = None
) -> tuple[TuckerTensorTrain, SpectrumReport]:
    """Recompress (round) a Tucker tensor train without forming it densely."""
    trunc = truncation or Truncation()
    T = orthogonalize_bases(T)
    cores = list(right_orthogonalize(T.tt).cores)
    bases = list(T.bases)
    d = len(cores)
    report = SpectrumReport()
    for i in range(d):
        a, _, b = cores[i].shape
        W, s, Vt = _svd(outer_unfold(cores[i]))
        report.tucker_singular_values.append(s)
        n = _choose_rank(s, trunc.rtol, trunc.tucker_cap(i), trunc.floor)
        cores[i] = from_outer(W[:, :n] * s[:n], a, b)
        bases[i] = bases[i] @ Vt[:n].T
        if i < d - 1:
            W, s, Vt = _svd(left_unfold(cores[i]))
            report.tt_singular_values.append(s)
            rn = _choose_rank(s, trunc.rtol, trunc.tt_cap(i + 1, d), trunc.floor)
            cores[i] = W[:, :rn].reshape(a, n, rn)
            cores[i + 1] = np.einsum("ab,bjc->ajc", s[:rn, None] * Vt[:rn], cores[i + 1])
    return TuckerTensorTrain(bases, cores), report


# ---------------------------------------------------------------- conversions and ranks


def _range_basis(M: np.ndarray) -> np.ndarray:
    W, s, _ = _svd(M)
    k = _choose_rank(s, 0.0, None)
    return W[:, :k]


def sym_tt_to_t3(S: TensorTrain, k: int, return_asymmetry: bool = False):
    """Convert a train symmetric in its first ``k`` inputs into a Tucker tensor train.

    The first ``k`` Tucker bases are an orthonormal basis for the column space
    of the first core; the last basis spans the row space of core ``k+1``.
    With ``return_asymmetry`` the largest relative part of any input core lying
    outside the shared basis is returned as a diagnostic.
    """
    if S.d != k + 1:
        raise ValueError(f"expected a train with {k + 1} cores, got {S.d}")
    if len(set(S.dims[:k])) > 1:
        raise ValueError("first k extents must agree")
    U = _range_basis(S.cores[0].reshape(S.dims[0], -1))
    V = _range_basis(S.cores[k].reshape(-1, S.dims[k]).T)
    cores = [np.einsum("ayb,yx->axb", G, U) for G in S.cores[:k]]
    cores.append(np.einsum("ayb,yx->axb", S.cores[k], V))
    out = TuckerTensorTrain((U,) * k + (V,), cores)
    if not return_asymmetry:
        return out
    worst = 0.0
    for G in S.cores[1:k]:
        leak = G - np.einsum("ayb,yx,zx->azb", G, U, U)
        worst = max(worst, float(np.linalg.norm(leak) / max(np.linalg.norm(G), 1e-300)))
    return out, worst


def zero_pad_ranks(T: TuckerTensorTrain, n_new: Sequence[int], r_new: Sequence[int]) -> TuckerTensorTrain:
    """Embed ``T`` in larger ranks by padding bases and cores with zeros."""
    d = T.d
    n_new = tuple(int(x) for x in n_new)
    r_new = tuple(int(x) for x in r_new)
    if len(n_new) != d or len(r_new) != d + 1:
        raise ValueError("rank vectors have the wrong length")
    if r_new[0] != 1 or r_new[-1] != 1:
        raise ValueError("boundary TT ranks must be 1")
    n, r = T.tucker_ranks, T.tt_ranks
    if any(a < b for a, b in zip(n_new, n)) or any(a < b for a, b in zip(r_new, r)):
        raise ValueError("padded ranks must not be smaller than the current ranks")
    bases, cores = [], []
    for i, (U, G) in enumerate(zip(T.bases, T.cores)):
        Up = np.zeros((U.shape[0], n_new[i]))
        Up[:, : U.shape[1]] = U
        Gp = np.zeros((r_new[i], n_new[i], r_new[i + 1]))
        Gp[: G.shape[0], : G.shape[1], : G.shape[2]] = G
        bases.append(Up)
        cores.append(Gp)
    return TuckerTensorTrain(bases, cores)


def remove_useless_ranks(
    n: Sequence[int], r: Sequence[int], dims: Sequence[int]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Shrink ranks to the largest configuration admitting a non-degenerate T3."""
    n = [int(x) for x in n]
    r = [int(x) for x in r]
    d = len(dims)
    if len(n) != d or len(r) != d + 1:
        raise ValueError("rank vectors have the wrong length")
    r[0] = r[d] = 1
    for i in range(d):
        n[i] = min(n[i], int(dims[i]))
    for i in range(d - 1, 0, -1):
        r[i] = min(r[i], n[i] * r[i + 1])
    for i in range(d):
        n[i] = min(n[i], r[i] * r[i + 1])
        if i < d - 1:
            r[i + 1] = min(r[i + 1], r[i] * n[i])
    return tuple(n), tuple(r)


def t3_norm(T: TuckerTensorTrain) -> float:
    """Hilbert-Schmidt norm computed without forming the dense tensor."""
    T = orthogonalize_bases(T)
    return float(np.linalg.norm(left_orthogonalize(T.tt).cores[-1]))


def random_t3(dims, n, r, rng: np.random.Generator | None = None) -> TuckerTensorTrain:
    rng = np.random.default_rng() if rng is None else rng
    bases = [rng.standard_normal((N, k)) for N, k in zip(dims, n)]
    cores = [rng.standard_normal((r[i], n[i], r[i + 1])) for i in range(len(dims))]
    return TuckerTensorTrain(bases, cores)


# ---------------------------------------------------------------- serialization


def t3_arrays(T: TuckerTensorTrain, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (U, G) in enumerate(zip(T.bases, T.cores)):
        out[f"{prefix}U{i}"] = U
        out[f"{prefix}G{i}"] = G
    return out


def t3_from_arrays(arrays: dict[str, np.ndarray], d: int, prefix: str = "") -> TuckerTensorTrain:
    return TuckerTensorTrain(
        [arrays[f"{prefix}U{i}"] for i in range(d)], [arrays[f"{prefix}G{i}"] for i in range(d)]
    )


def save_t3(T: TuckerTensorTrain, path) -> None:
    meta = {"d": T.d, "shape": list(T.shape), "tucker_ranks": list(T.tucker_ranks), "tt_ranks": list(T.tt_ranks)}
    container.save(path, "t3", t3_arrays(T), meta)


def load_t3(path) -> TuckerTensorTrain:
    arrays, meta = container.load(path, "t3")
    T = t3_from_arrays(arrays, int(meta["d"]))
    if list(T.tucker_ranks) != meta["tucker_ranks"] or list(T.tt_ranks) != meta["tt_ranks"]:
        raise container.ContainerError("rank metadata does not match stored cores")
    return T
