"""Sweeping probes of Tucker tensor trains and their tangent vectors.

All routines work on a batch of ``S`` probing-vector sets at once: vectors are
passed as arrays of shape ``(S, N_i)`` (a single 1-D vector per index is also
accepted and the results are then returned unbatched). Indices are 0-based:
``mu[i]`` is the product of cores ``0..i-1`` and ``nu[i]`` the product of cores
``i+1..d-1``, so ``mu[0] = nu[d-1] = 1``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .manifold import GaugedVariation, ManifoldPoint
from .t3 import TuckerTensorTrain

__all__ = [
    "EdgeCache",
    "StaleCacheError",
    "probe_t3",
    "build_cache",
    "apply_J",
    "apply_JT",
    "apply_J_corewise",
    "apply_JT_corewise",
    "t3_forward",
]


class StaleCacheError(ValueError):
    """Raised when a cache is used with a different point than it was built for."""


@dataclass
class EdgeCache:
    owner: object
    corewise: bool
    single: bool
    ws: list[np.ndarray]
    xi: list[np.ndarray]
    mu: list[np.ndarray]
    nu: list[np.ndarray]
    eta: list[np.ndarray]


# Batched contractions written as matrix products. Shapes: ``m`` (S, a),
# ``G`` (a, n, b), ``x`` (S, n), ``v`` (S, b).


def _left(m, G, x):
    """sum_{a,j} m[s,a] G[a,j,b] x[s,j] -> (S, b)."""
    a, n, b = G.shape
    T = (m @ G.reshape(a, n * b)).reshape(-1, n, b)
    return np.matmul(x[:, None, :], T)[:, 0, :]


def _right(G, x, v):
    """sum_{j,b} G[a,j,b] x[s,j] v[s,b] -> (S, a)."""
    a, n, b = G.shape
    T = (v @ G.reshape(a * n, b).T).reshape(-1, a, n)
    return np.matmul(T, x[:, :, None])[:, :, 0]


def _center(m, G, v):
    """sum_{a,b} m[s,a] G[a,j,b] v[s,b] -> (S, n)."""
    a, n, b = G.shape
    T = (m @ G.reshape(a, n * b)).reshape(-1, n, b)
    return np.matmul(T, v[:, :, None])[:, :, 0]


def _outer(m, x, v):
    """sum_s m[s,a] x[s,j] v[s,b] -> (a, n, b)."""
    S, n = x.shape
    b = v.shape[1]
    return (m.T @ (x[:, :, None] * v[:, None, :]).reshape(S, n * b)).reshape(m.shape[1], n, b)


def _batch(ws: Sequence[np.ndarray], dims: Sequence[int]) -> tuple[list[np.ndarray], bool]:
    if len(ws) != len(dims):
        raise ValueError(f"expected {len(dims)} probing vectors, got {len(ws)}")
    arrs = [np.asarray(w, dtype=float) for w in ws]
    single = all(w.ndim == 1 for w in arrs)
    if single:
        arrs = [w[None, :] for w in arrs]
    S = arrs[0].shape[0]
    for i, (w, N) in enumerate(zip(arrs, dims)):
        if w.ndim != 2 or w.shape != (S, N):
            raise ValueError(f"probing vector {i} has shape {w.shape}, expected ({S}, {N})")
    return arrs, single


def _parts(owner) -> tuple[list, list, list, list, list, bool]:
    """(bases, left cores, right cores, middle cores, output bases, corewise)."""
    if isinstance(owner, ManifoldPoint):
        return list(owner.U), list(owner.P), list(owner.Q), list(owner.O), list(owner.Ut), False
    if isinstance(owner, TuckerTensorTrain):
        c = list(owner.cores)
        return list(owner.bases), c, c, c, list(owner.bases), True
    raise TypeError(f"cannot probe {type(owner).__name__}")


def build_cache(owner, ws: Sequence[np.ndarray], counter: Counter | None = None) -> EdgeCache:
    bases, left, right, mid, _, corewise = _parts(owner)
    d = len(bases)
    W, single = _batch(ws, [U.shape[0] for U in bases])
    S = W[0].shape[0]
    count = counter if counter is not None else Counter()
    xi = []
    for U, w in zip(bases, W):
        xi.append(w @ U)
        count["basis"] += 1
    mu = [np.ones((S, 1))]
    for i in range(d - 1):
        mu.append(_left(mu[i], left[i], xi[i]))
        count["partial"] += 1
    nu = [None] * d
    nu[d - 1] = np.ones((S, 1))
    for i in range(d - 1, 0, -1):
        nu[i - 1] = _right(right[i], xi[i], nu[i])
        count["partial"] += 1
    eta = []
    for i in range(d):
        eta.append(_center(mu[i], mid[i], nu[i]))
        count["central"] += 1
    return EdgeCache(owner, corewise, single, W, xi, mu, nu, eta)


def _unbatch(zs: list[np.ndarray], single: bool) -> list[np.ndarray]:
    return [z[0] for z in zs] if single else zs


def probe_t3(owner, ws: Sequence[np.ndarray], counter: Counter | None = None) -> tuple[list[np.ndarray], EdgeCache]:
    """All ``d`` probes of a T3 or manifold point, plus the reusable cache."""
    count = counter if counter is not None else Counter()
    cache = build_cache(owner, ws, count)
    _, _, _, _, out_bases, _ = _parts(owner)
    zs = []
    for U, e in zip(out_bases, cache.eta):
        zs.append(e @ U.T)
        count["expand"] += 1
    return _unbatch(zs, cache.single), cache


def t3_forward(T, X: np.ndarray) -> np.ndarray:
    """Forward probe ``T(x, ..., x, .)`` for each row of ``X`` (or a single vector)."""
    if isinstance(T, ManifoldPoint):
        T = T.to_t3()
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = X[None, :] if single else X
    m = np.ones((X.shape[0], 1))
    for U, G in zip(T.bases[:-1], T.cores[:-1]):
        m = _left(m, G, X @ U)
    out = np.einsum("sa,aj->sj", m, T.cores[-1][:, :, 0]) @ T.bases[-1].T
    return out[0] if single else out


def _check(owner, cache: EdgeCache, corewise: bool) -> None:
    if cache.owner is not owner:
        raise StaleCacheError("cache was built for a different point")
    if cache.corewise != corewise:
        raise StaleCacheError("cache kind does not match the requested Jacobian")


def _jacobian(bases, left, right, mid, cache: EdgeCache, dU, dG) -> list[np.ndarray]:
    d = len(bases)
    xi, mu, nu, eta, W = cache.xi, cache.mu, cache.nu, cache.eta, cache.ws
    S = W[0].shape[0]
    dxi = [w @ x for w, x in zip(W, dU)]
    sigma = [np.zeros((S, 1))]
    for i in range(d - 1):
        s = _left(sigma[i], right[i], xi[i])
        s += _left(mu[i], dG[i], xi[i])
        s += _left(mu[i], mid[i], dxi[i])
        sigma.append(s)
    tau = [None] * d
    tau[d - 1] = np.zeros((S, 1))
    for i in range(d - 1, 0, -1):
        t = _right(dG[i], xi[i], nu[i])
        t += _right(mid[i], dxi[i], nu[i])
        t += _right(left[i], xi[i], tau[i])
        tau[i - 1] = t
    zs = []
    for i in range(d):
        de = _center(sigma[i], right[i], nu[i])
        de += _center(mu[i], left[i], tau[i])
        de += _center(mu[i], dG[i], nu[i])
        zs.append(de @ bases[i].T + eta[i] @ dU[i].T)
    return _unbatch(zs, cache.single)


def _jacobian_t(bases, left, right, mid, cache: EdgeCache, zt: Sequence[np.ndarray]):
    d = len(bases)
    xi, mu, nu, eta, W = cache.xi, cache.mu, cache.nu, cache.eta, cache.ws
    Z, _ = _batch(zt, [U.shape[0] for U in bases])
    if Z[0].shape[0] != W[0].shape[0]:
        raise ValueError("batch size of adjoint inputs does not match the cache")
    S = W[0].shape[0]
    deta = [z @ U for z, U in zip(Z, bases)]
    dG = [_outer(mu[i], deta[i], nu[i]) for i in range(d)]
    dxi = [np.zeros((S, U.shape[1])) for U in bases]
    sigma_bar = [_right(right[i], deta[i], nu[i]) for i in range(d)]
    tau_bar = [_left(mu[i], left[i], deta[i]) for i in range(d)]
    # sigma[i+1] = sigma[i] Q_i(xi_i) + mu[i] dG_i(xi_i) + mu[i] O_i(dxi_i)
    for i in range(d - 2, -1, -1):
        sb = sigma_bar[i + 1]
        sigma_bar[i] = sigma_bar[i] + _right(right[i], xi[i], sb)
        dG[i] += _outer(mu[i], xi[i], sb)
        dxi[i] += _center(mu[i], mid[i], sb)
    # tau[i-1] = dG_i(xi_i) nu[i] + O_i(dxi_i) nu[i] + P_i(xi_i) tau[i]
    for i in range(1, d):
        tb = tau_bar[i - 1]
        dG[i] += _outer(tb, xi[i], nu[i])
        dxi[i] += _center(tb, mid[i], nu[i])
        tau_bar[i] = tau_bar[i] + _left(tb, left[i], xi[i])
    dU = [z.T @ e + w.T @ x for z, e, w, x in zip(Z, eta, W, dxi)]
    return dU, dG


def apply_J(p: ManifoldPoint, cache: EdgeCache, v: GaugedVariation) -> list[np.ndarray]:
    """Probes of the tangent vector represented by ``v`` at ``p``."""
    _check(p, cache, corewise=False)
    if v.token is not None and v.token != p.token:
        raise StaleCacheError("variation belongs to a different point")
    return _jacobian(p.U, p.P, p.Q, p.O, cache, v.dU, v.dG)


def apply_JT(p: ManifoldPoint, cache: EdgeCache, zt: Sequence[np.ndarray]) -> GaugedVariation:
    """Transpose of :func:`apply_J`; the result is not gauged."""
    _check(p, cache, corewise=False)
    dU, dG = _jacobian_t(p.U, p.P, p.Q, p.O, cache, zt)
    return GaugedVariation(dU, dG, p.token)


def apply_J_corewise(T: TuckerTensorTrain, cache: EdgeCache, dU, dG) -> list[np.ndarray]:
    """Directional derivative of the probes with respect to bases and cores."""
    _check(T, cache, corewise=True)
    c = T.cores
    return _jacobian(T.bases, c, c, c, cache, dU, dG)


def apply_JT_corewise(T: TuckerTensorTrain, cache: EdgeCache, zt) -> tuple[list[np.ndarray], list[np.ndarray]]:
    _check(T, cache, corewise=True)
    c = T.cores
    return _jacobian_t(T.bases, c, c, c, cache, zt)
