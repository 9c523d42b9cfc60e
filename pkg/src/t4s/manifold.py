"""Fixed-rank Tucker tensor train manifold.

A point ``p`` is stored with orthonormal bases ``U_i`` and the cores of three
sweeps over its train:

* ``Q_i``: right-orthogonal cores (``Q_1`` carries the norm),
* ``P_i``: left-orthogonal cores obtained by sweeping the ``Q`` train from the
  left (``P_d`` carries the norm), with ``G~_i`` the non-orthogonal core met at
  step ``i``, so ``P_1..P_{i-1} G~_i Q_{i+1}..Q_d`` represents ``p`` for every i,
* ``O_i``: outer-orthogonal factor with ``G~_i = O_i x_2 X_i`` and the matching
  modified basis ``U~_i = U_i X_i^T``.

A tangent vector is written through a variation ``(dU_i, dG_i)`` as

    sum_i [P_1..P_{i-1} dG_i Q_{i+1}..Q_d ; U]  +  sum_i [P_1..O_i..Q_d ; U with slot i -> dU_i]

and the variation is gauged when ``U_i^T dU_i = 0`` for all i and
``(P_i^L)^T dG_i^L = 0`` for i < d.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .t3 import (
    TuckerTensorTrain,
    Truncation,
    contract_full,
    from_outer,
    left_unfold,
    outer_unfold,
    remove_useless_ranks,
    right_orthogonalize,
    t3_norm,
    t3_svd_implicit,
)

__all__ = [
    "DegeneratePointError",
    "ManifoldPoint",
    "GaugedVariation",
    "prepare_point",
    "perturb_point",
    "project_gauge",
    "gauge_fix",
    "variation_inner",
    "variation_axpy",
    "zero_variation",
    "random_variation",
    "tangent_to_doubled",
    "tangent_to_dense",
    "attach_and_retract",
    "manifold_dimension",
]

_ids = itertools.count(1)
DEGENERACY_TOL = 0.0


class DegeneratePointError(ValueError):
    """Raised when a T3 has zero singular values at its working ranks."""

    def __init__(self, message: str, reduced_ranks=None):
        super().__init__(message)
        self.reduced_ranks = reduced_ranks


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    U: tuple[np.ndarray, ...]
    P: tuple[np.ndarray, ...]
    Q: tuple[np.ndarray, ...]
    O: tuple[np.ndarray, ...]
    Gt: tuple[np.ndarray, ...]
    Ut: tuple[np.ndarray, ...]
    token: int

    @property
    def d(self) -> int:
        return len(self.U)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(U.shape[0] for U in self.U)

    @property
    def n(self) -> tuple[int, ...]:
        return tuple(U.shape[1] for U in self.U)

    @property
    def r(self) -> tuple[int, ...]:
        return (1,) + tuple(G.shape[2] for G in self.P)

    def to_t3(self) -> TuckerTensorTrain:
        """Left-orthogonal representation ``P_1..P_d`` with bases ``U``."""
        return TuckerTensorTrain(self.U, self.P)

    def representation(self, i: int, outer: bool = False) -> TuckerTensorTrain:
        cores = list(self.P[:i]) + [self.O[i] if outer else self.Gt[i]] + list(self.Q[i + 1 :])
        bases = list(self.U)
        if outer:
            bases[i] = self.Ut[i]
        return TuckerTensorTrain(bases, cores)

    def norm(self) -> float:
        return float(np.linalg.norm(self.Gt[-1]))


def _check_qr(R: np.ndarray, what: str, i: int, scale: float, ranks) -> None:
    diag = np.abs(np.diag(R))
    if R.shape[0] < R.shape[1] or diag.size == 0 or diag.min() <= DEGENERACY_TOL * max(scale, 1e-300):
        raise DegeneratePointError(f"degenerate {what} at index {i}", ranks)


def prepare_point(T: TuckerTensorTrain) -> ManifoldPoint:
    """Build the orthogonal representations of ``T`` needed for tangent vectors."""
    d = T.d
    reduced = remove_useless_ranks(T.tucker_ranks, T.tt_ranks, T.shape)
    if reduced != (T.tucker_ranks, T.tt_ranks):
        raise DegeneratePointError(
            f"ranks n={T.tucker_ranks}, r={T.tt_ranks} are degenerate for shape {T.shape}", reduced
        )
    bases = []
    cores = []
    for i, (U, G) in enumerate(zip(T.bases, T.cores)):
        Qb, R = np.linalg.qr(U)
        _check_qr(R, "Tucker basis", i, np.linalg.norm(U), reduced)
        bases.append(Qb)
        cores.append(np.einsum("xy,ayb->axb", R, G))
    Qc = list(right_orthogonalize(TuckerTensorTrain(bases, cores).tt).cores)
    scale = float(np.linalg.norm(Qc[0]))
    if scale == 0.0:
        raise DegeneratePointError("zero tensor is not a point of a fixed-rank manifold", reduced)
    P, Gt = [], []
    cur = Qc[0]
    for i in range(d):
        Gt.append(cur)
        if i < d - 1:
            a, n, b = cur.shape
            Qm, R = np.linalg.qr(left_unfold(cur))
            _check_qr(R, "left unfolding", i, scale, reduced)
            P.append(Qm.reshape(a, n, b))
            cur = np.einsum("ab,bjc->ajc", R, Qc[i + 1])
        else:
            P.append(cur)
    O, Ut = [], []
    for i in range(d):
        a, n, b = Gt[i].shape
        Om, X = np.linalg.qr(outer_unfold(Gt[i]))
        _check_qr(X, "outer unfolding", i, scale, reduced)
        O.append(from_outer(Om, a, b))
        Ut.append(bases[i] @ X.T)
    return ManifoldPoint(tuple(bases), tuple(P), tuple(Qc), tuple(O), tuple(Gt), tuple(Ut), next(_ids))


def perturb_point(T: TuckerTensorTrain, scale: float, rng: np.random.Generator) -> TuckerTensorTrain:
    """Add Gaussian noise to every basis and core, sized relative to that factor.

    Used to lift zero-padded (degenerate) trains onto the manifold. Factors
    that are entirely zero receive noise relative to the norm of the tensor.
    """
    fallback = max(t3_norm(T), 1e-300)

    def noisy(F):
        size = np.linalg.norm(F) / np.sqrt(F.size)
        return F + scale * (size if size > 0 else fallback) * rng.standard_normal(F.shape)

    return TuckerTensorTrain([noisy(U) for U in T.bases], [noisy(G) for G in T.cores])


# ---------------------------------------------------------------- variations


class GaugedVariation:
    """A pair of lists ``(dU, dG)`` tied to a manifold point by ``token``."""

    __slots__ = ("dU", "dG", "token")

    def __init__(self, dU: Sequence[np.ndarray], dG: Sequence[np.ndarray], token: int | None = None):
        self.dU = [np.asarray(x, dtype=float) for x in dU]
        self.dG = [np.asarray(x, dtype=float) for x in dG]
        self.token = token

    def to_vector(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.dU] + [x.ravel() for x in self.dG])

    def like(self, vec: np.ndarray) -> "GaugedVariation":
        """Variation with this one's shapes filled from a flat vector."""
        out_U, out_G, pos = [], [], 0
        for x in self.dU:
            out_U.append(vec[pos : pos + x.size].reshape(x.shape))
            pos += x.size
        for x in self.dG:
            out_G.append(vec[pos : pos + x.size].reshape(x.shape))
            pos += x.size
        return GaugedVariation(out_U, out_G, self.token)

    def __add__(self, other: "GaugedVariation") -> "GaugedVariation":
        return variation_axpy(1.0, self, 1.0, other)

    def __sub__(self, other: "GaugedVariation") -> "GaugedVariation":
        return variation_axpy(1.0, self, -1.0, other)

    def __mul__(self, c: float) -> "GaugedVariation":
        return GaugedVariation([c * x for x in self.dU], [c * x for x in self.dG], self.token)

    __rmul__ = __mul__

    def __neg__(self) -> "GaugedVariation":
        return self * -1.0


def _shared_token(v: GaugedVariation, w: GaugedVariation) -> int | None:
    if v.token is not None and w.token is not None and v.token != w.token:
        raise ValueError("variations belong to different base points")
    return v.token if v.token is not None else w.token


def _check_shapes(p: ManifoldPoint, v: GaugedVariation) -> None:
    if len(v.dU) != p.d or len(v.dG) != p.d:
        raise ValueError("variation has the wrong number of components")
    for i in range(p.d):
        if v.dU[i].shape != p.U[i].shape or v.dG[i].shape != p.P[i].shape:
            raise ValueError(f"variation component {i} has the wrong shape")
    if v.token is not None and v.token != p.token:
        raise ValueError("variation belongs to a different base point")


def variation_inner(v: GaugedVariation, w: GaugedVariation) -> float:
    _shared_token(v, w)
    total = 0.0
    for a, b in zip(v.dU, w.dU):
        total += float(np.vdot(a, b))
    for a, b in zip(v.dG, w.dG):
        total += float(np.vdot(a, b))
    return total


def variation_axpy(a: float, v: GaugedVariation, b: float, w: GaugedVariation) -> GaugedVariation:
    token = _shared_token(v, w)
    return GaugedVariation(
        [a * x + b * y for x, y in zip(v.dU, w.dU)],
        [a * x + b * y for x, y in zip(v.dG, w.dG)],
        token,
    )


def zero_variation(p: ManifoldPoint) -> GaugedVariation:
    return GaugedVariation([np.zeros_like(U) for U in p.U], [np.zeros_like(G) for G in p.P], p.token)


def random_variation(p: ManifoldPoint, rng: np.random.Generator, gauged: bool = True) -> GaugedVariation:
    v = GaugedVariation(
        [rng.standard_normal(U.shape) for U in p.U], [rng.standard_normal(G.shape) for G in p.P], p.token
    )
    return project_gauge(p, v) if gauged else v


def project_gauge(p: ManifoldPoint, v: GaugedVariation) -> GaugedVariation:
    """Orthogonal projection onto gauged variations."""
    _check_shapes(p, v)
    dU = [x - U @ (U.T @ x) for U, x in zip(p.U, v.dU)]
    dG = []
    for i, x in enumerate(v.dG):
        if i < p.d - 1:
            PL = left_unfold(p.P[i])
            xL = left_unfold(x)
            x = (xL - PL @ (PL.T @ xL)).reshape(x.shape)
        dG.append(x)
    return GaugedVariation(dU, dG, p.token)


def gauge_fix(p: ManifoldPoint, v: GaugedVariation) -> GaugedVariation:
    """Gauged variation representing the same tangent vector as ``v``."""
    _check_shapes(p, v)
    dU, dG = [], [x.copy() for x in v.dG]
    for i, (U, x) in enumerate(zip(p.U, v.dU)):
        A = U.T @ x
        dU.append(x - U @ A)
        dG[i] += np.einsum("axb,yx->ayb", p.O[i], A)
    for i in range(p.d - 1):
        PL = left_unfold(p.P[i])
        B = PL.T @ left_unfold(dG[i])
        dG[i] = dG[i] - (PL @ B).reshape(dG[i].shape)
        dG[i + 1] = dG[i + 1] + np.einsum("ab,bjc->ajc", B, p.Q[i + 1])
    return GaugedVariation(dU, dG, p.token)


# ---------------------------------------------------------------- tangent tensors


def tangent_to_doubled(p: ManifoldPoint, v: GaugedVariation, attach: bool = False) -> TuckerTensorTrain:
    """Represent the tangent vector (or ``p + v`` when ``attach``) with doubled ranks."""
    _check_shapes(p, v)
    d = p.d
    bases, cores = [], []
    for i in range(d):
        first, last = i == 0, i == d - 1
        a, n, b = p.P[i].shape
        rows = a if first else 2 * a
        cols = b if last else 2 * b
        mu_row = 0 if first else a
        W = np.zeros((rows, 2 * n, cols))
        if not first:
            W[:a, :n, :b] = p.Q[i]
        lower = v.dG[i] + (p.P[i] if (last and attach) else 0.0)
        W[mu_row:, :n, :b] = lower
        W[mu_row:, n:, :b] = p.O[i]
        if not last:
            W[mu_row:, :n, b:] = p.P[i]
        cores.append(W)
        bases.append(np.hstack([p.U[i], v.dU[i]]))
    return TuckerTensorTrain(bases, cores)


def tangent_to_dense(p: ManifoldPoint, v: GaugedVariation) -> np.ndarray:
    """Dense tangent tensor from the first-order perturbation sum, term by term."""
    _check_shapes(p, v)
    total = np.zeros(p.dims)
    for i in range(p.d):
        cores = list(p.P[:i]) + [v.dG[i]] + list(p.Q[i + 1 :])
        total += contract_full(TuckerTensorTrain(p.U, cores))
        cores = list(p.P[:i]) + [p.O[i]] + list(p.Q[i + 1 :])
        bases = list(p.U)
        bases[i] = v.dU[i]
        total += contract_full(TuckerTensorTrain(bases, cores))
    return total


def attach_and_retract(
    p: ManifoldPoint, v: GaugedVariation, n: Sequence[int] | None = None, r: Sequence[int] | None = None
) -> TuckerTensorTrain:
    """Round ``p + v`` back to ranks ``(n, r)`` (default: the ranks of ``p``)."""
    n = p.n if n is None else tuple(n)
    r = p.r if r is None else tuple(r)
    doubled = tangent_to_doubled(p, v, attach=True)
    out, _ = t3_svd_implicit(doubled, Truncation.to_ranks(n, r, floor=False))
    return out


def manifold_dimension(dims: Sequence[int], n: Sequence[int], r: Sequence[int]) -> int:
    d = len(dims)
    total = sum(N * k - k * k for N, k in zip(dims, n))
    total += sum(r[i] * n[i] * r[i + 1] for i in range(d))
    total -= sum(r[i] * r[i] for i in range(1, d))
    return int(total)
