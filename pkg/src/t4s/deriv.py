"""Higher-order derivative probes of implicitly defined maps.

The map is ``q(theta) = Q(theta, u(theta))`` where ``u`` solves
``R(theta, u) = 0``. Derivatives along directions ``theta_hat_l`` are built
from symbolic terms ``(tag, mu, Gamma, vnode)``:

* ``tag`` is ``"Q"`` or ``"R"``,
* ``mu`` is the sorted tuple of direction labels hitting the theta slots,
* ``Gamma`` is the sorted tuple of lattice nodes (sorted label tuples) whose
  incremental states ``u_beta`` fill the u slots,
* ``vnode`` is ``None`` for terms without an adjoint factor, otherwise the
  lattice node of the incremental adjoint ``v_beta`` pairing an ``R`` term.

Differentiating in direction ``i`` adds ``i`` to ``mu``, appends a new node
``(i,)`` to ``Gamma``, grows each existing node by ``i``, and grows ``vnode``.
"""

from __future__ import annotations

import itertools
import json
import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Term",
    "ImplicitMap",
    "BuiltinTestMap",
    "builtin_test_map",
    "symbolic_differentiate",
    "expand",
    "term_count",
    "lattice",
    "lattice_size",
    "ProbeSession",
    "ProbeEngine",
    "forward_probe",
    "reverse_probe",
    "ProbeSample",
    "generate_training_data",
    "save_samples",
    "load_samples",
    "samples_to_arrays",
]

Multiset = tuple
Term = tuple  # (tag, mu, Gamma, vnode)


def _insert(ms: Multiset, i: int) -> Multiset:
    out = list(ms)
    out.append(i)
    out.sort()
    return tuple(out)


def symbolic_differentiate(terms: dict[Term, int], i: int, keep=None) -> dict[Term, int]:
    """Total derivative of a sum of terms in direction ``i`` (product rule).

    ``keep(tag, a, b)`` may drop terms whose partial of order ``a`` in theta and
    ``b`` in u vanishes identically. Orders only grow under differentiation, so
    dropped terms never contribute later.
    """
    out: dict[Term, int] = {}
    node = (i,)

    def add(t, c):
        if keep is None or keep(t[0], len(t[1]), len(t[2])):
            out[t] = out.get(t, 0) + c

    for (tag, mu, gamma, vnode), c in terms.items():
        add((tag, _insert(mu, i), gamma, vnode), c)
        add((tag, mu, _insert(gamma, node), vnode), c)
        for k, g in enumerate(gamma):
            if k and gamma[k - 1] == g:
                # identical nodes give identical terms; fold their multiplicity
                continue
            rest = gamma[:k] + gamma[k + 1 :]
            add((tag, mu, _insert(rest, _insert(g, i)), vnode), c * gamma.count(g))
        if vnode is not None:
            add((tag, mu, gamma, _insert(vnode, i)), c)
    return out


def _keeper(support, adjoint: bool):
    if support is None:
        return None
    table = dict(support)
    if adjoint:
        # one more slot stays open for the covector pairing
        return lambda tag, a, b: (a + 1, b) in table[tag] or (a, b + 1) in table[tag]
    return lambda tag, a, b: (a, b) in table[tag]


def _start(tag: str, adjoint: bool) -> dict[Term, int]:
    if adjoint:
        return {("Q", (), (), None): 1, ("R", (), (), ()): 1}
    return {(tag, (), (), None): 1}


@lru_cache(maxsize=8192)
def _expand_cached(tag: str, beta: Multiset, adjoint: bool, support) -> tuple[tuple[Term, int], ...]:
    if not beta:
        return tuple(_start(tag, adjoint).items())
    prev = dict(_expand_cached(tag, beta[:-1], adjoint, support))
    return tuple(symbolic_differentiate(prev, beta[-1], _keeper(support, adjoint)).items())


def expand(tag: str, beta: Sequence[int], adjoint: bool = False, support=None) -> dict[Term, int]:
    """Symbolic ``D^{|beta|}`` of ``Q`` or ``R`` (or of the adjoint Lagrangian) along ``beta``.

    ``support`` is a map's :meth:`ImplicitMap.support`; ``None`` keeps every term.
    """
    return dict(_expand_cached(tag, tuple(sorted(beta)), adjoint, support))


def term_count(order: int, symmetric: bool, reverse: bool = False) -> int:
    """Number of symbolic terms in an order-``order`` probe formula.

    Forward: terms of ``D^j Q``. Reverse: terms of ``D^{j-1}`` of the adjoint
    gradient ``omega(dQ/dtheta) + v(dR/dtheta)``. Terms are generated
    incrementally without caching so the count reflects live generation.
    """
    labels = [0] * order if symmetric else list(range(order))
    if reverse:
        labels = labels[:-1]
    terms = _start("Q", reverse)
    for i in labels:
        terms = symbolic_differentiate(terms, i)
    return len(terms)


def lattice(alpha: Sequence[int]) -> list[Multiset]:
    """All sub-multisets of ``alpha`` ordered by size, then lexicographically."""
    counts = Counter(alpha)
    labels = sorted(counts)
    nodes = []
    for combo in itertools.product(*[range(counts[l] + 1) for l in labels]):
        node = tuple(l for l, c in zip(labels, combo) for _ in range(c))
        nodes.append(node)
    nodes.sort(key=lambda b: (len(b), b))
    return nodes


def lattice_size(alpha: Sequence[int]) -> int:
    return math.prod(c + 1 for c in Counter(alpha).values())


# ---------------------------------------------------------------- maps


class ImplicitMap(ABC):
    """Interface for ``q(theta) = Q(theta, u(theta))`` with ``R(theta, u) = 0``.

    ``partial`` returns ``d^a_theta d^b_u F(theta_dirs, u_dirs)``. ``partial_adjoint``
    pairs the same derivative with a covector ``cov`` in the output slot and
    leaves one further theta or u slot open, returning a vector over it.
    """

    dim_theta: int
    dim_u: int
    dim_out: int

    @abstractmethod
    def solve_state(self, theta: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def partial(self, tag: str, theta, u, theta_dirs, u_dirs) -> np.ndarray: ...

    @abstractmethod
    def partial_adjoint(self, tag: str, theta, u, cov, theta_dirs, u_dirs, open: str) -> np.ndarray: ...

    @abstractmethod
    def factorize(self, theta, u): ...

    def support(self):
        """Orders ``(a, b)`` of the partials of ``Q`` and ``R`` that may be nonzero.

        Returned as ``(("Q", frozenset), ("R", frozenset))`` with downward-closed
        sets, or ``None`` when every partial may be nonzero.
        """
        return None

    def q(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.partial("Q", theta, self.solve_state(theta), [], [])


class _LU:
    def __init__(self, A: np.ndarray):
        self.lu = scipy.linalg.lu_factor(A)

    def solve(self, b):
        return scipy.linalg.lu_solve(self.lu, b)

    def solve_adjoint(self, c):
        return scipy.linalg.lu_solve(self.lu, c, trans=1)


class BuiltinTestMap(ImplicitMap):
    """``R = (M + diag(theta)) u + gamma u^3 - s`` and ``Q = E u + D theta``."""

    def __init__(self, M, s, E, D, gamma: float):
        self.M = np.asarray(M, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.E = np.asarray(E, dtype=float)
        self.D = np.asarray(D, dtype=float)
        self.gamma = float(gamma)
        self.dim_theta = self.dim_u = self.M.shape[0]
        self.dim_out = self.E.shape[0]

    def residual(self, theta, u):
        return self.M @ u + theta * u + self.gamma * u**3 - self.s

    def jacobian(self, theta, u):
        return self.M + np.diag(theta + 3.0 * self.gamma * u**2)

    def solve_state(self, theta, tol: float = 1e-15, maxiter: int = 100):
        theta = np.asarray(theta, dtype=float)
        u = np.linalg.solve(self.M + np.diag(theta), self.s)
        scale = max(np.linalg.norm(self.s), 1e-300)
        for _ in range(maxiter):
            res = self.residual(theta, u)
            step = np.linalg.solve(self.jacobian(theta, u), res)
            u = u - step
            if np.linalg.norm(step) <= tol * max(np.linalg.norm(u), 1e-300) or np.linalg.norm(res) <= tol * scale:
                break
        else:
            raise RuntimeError("Newton iteration for the state did not converge")
        return u

    def factorize(self, theta, u):
        return _LU(self.jacobian(theta, u))

    def support(self):
        return (
            ("Q", frozenset({(0, 0), (1, 0), (0, 1)})),
            ("R", frozenset({(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)})),
        )

    def partial(self, tag, theta, u, theta_dirs, u_dirs):
        a, b = len(theta_dirs), len(u_dirs)
        g = self.gamma
        if tag == "Q":
            if a == 0 and b == 0:
                return self.E @ u + self.D @ theta
            if a == 1 and b == 0:
                return self.D @ theta_dirs[0]
            if a == 0 and b == 1:
                return self.E @ u_dirs[0]
            return np.zeros(self.dim_out)
        if a == 0:
            if b == 0:
                return self.residual(theta, u)
            if b == 1:
                w = u_dirs[0]
                return self.M @ w + theta * w + 3.0 * g * u**2 * w
            if b == 2:
                return 6.0 * g * u * u_dirs[0] * u_dirs[1]
            if b == 3:
                return 6.0 * g * u_dirs[0] * u_dirs[1] * u_dirs[2]
            return np.zeros(self.dim_u)
        if a == 1 and b == 0:
            return theta_dirs[0] * u
        if a == 1 and b == 1:
            return theta_dirs[0] * u_dirs[0]
        return np.zeros(self.dim_u)

    def partial_adjoint(self, tag, theta, u, cov, theta_dirs, u_dirs, open):
        a, b = len(theta_dirs), len(u_dirs)
        g = self.gamma
        size = self.dim_theta if open == "theta" else self.dim_u
        if tag == "Q":
            if a == 0 and b == 0:
                return self.D.T @ cov if open == "theta" else self.E.T @ cov
            return np.zeros(size)
        if open == "theta":
            if a == 0 and b == 0:
                return cov * u
            if a == 0 and b == 1:
                return cov * u_dirs[0]
            return np.zeros(size)
        if a == 0:
            if b == 0:
                return self.M.T @ cov + theta * cov + 3.0 * g * u**2 * cov
            if b == 1:
                return 6.0 * g * u * u_dirs[0] * cov
            if b == 2:
                return 6.0 * g * u_dirs[0] * u_dirs[1] * cov
            return np.zeros(size)
        if a == 1 and b == 0:
            return theta_dirs[0] * cov
        return np.zeros(size)


def builtin_test_map(dim_in: int, dim_out: int, seed: int = 0, gamma: float = 0.1) -> BuiltinTestMap:
    """Small cubic reaction map with fixed random SPD operator, source, and outputs."""
    if dim_in > 50 or dim_out > 50:
        raise ValueError("the built-in map is meant for dimensions up to 50")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((dim_in, dim_in))
    M = 2.0 * np.eye(dim_in) + B @ B.T / dim_in
    s = rng.standard_normal(dim_in)
    E = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
    D = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
    return BuiltinTestMap(M, s, E, D, gamma)


# ---------------------------------------------------------------- numeric probing


class ProbeEngine:
    """Base point data shared by all probes: state, factorization, counters."""

    def __init__(self, fmap: ImplicitMap, theta0: np.ndarray):
        self.map = fmap
        self.theta0 = np.asarray(theta0, dtype=float)
        self.counts = Counter()
        self.u0 = fmap.solve_state(self.theta0)
        self.counts["base_state"] += 1
        self.factor = fmap.factorize(self.theta0, self.u0)
        self.support = fmap.support()

    def session(self, dirs: Sequence[np.ndarray], omega: np.ndarray | None = None) -> "ProbeSession":
        return ProbeSession(self, dirs, omega)


class ProbeSession:
    """Lattice of incremental states and adjoints for one set of directions.

    Incremental variables are cached by node so probes of increasing order
    along the same directions reuse all lower-order solves.
    """

    def __init__(self, engine: ProbeEngine, dirs: Sequence[np.ndarray], omega=None):
        self.engine = engine
        self.dirs = [np.asarray(t, dtype=float) for t in dirs]
        self.omega = None if omega is None else np.asarray(omega, dtype=float)
        self.states: dict[Multiset, np.ndarray] = {(): engine.u0}
        self.adjoints: dict[Multiset, np.ndarray] = {}
        self.counts = Counter()

    # -- evaluation helpers
    def _args(self, mu, gamma):
        return [self.dirs[l] for l in mu], [self.states[g] for g in gamma]

    def _eval(self, tag, mu, gamma):
        e = self.engine
        td, ud = self._args(mu, gamma)
        return e.map.partial(tag, e.theta0, e.u0, td, ud)

    def _eval_adj(self, tag, mu, gamma, vnode, open):
        e = self.engine
        td, ud = self._args(mu, gamma)
        cov = self.omega if tag == "Q" else self.adjoints[vnode]
        return e.map.partial_adjoint(tag, e.theta0, e.u0, cov, td, ud, open)

    # -- lattice traversal
    def ensure_states(self, alpha: Sequence[int]) -> None:
        for beta in lattice(alpha):
            if beta in self.states:
                continue
            lhs = ("R", (), (beta,), None)
            rhs = 0.0
            for (tag, mu, gamma, _), c in expand("R", beta, support=self.engine.support).items():
                if (tag, mu, gamma, None) == lhs:
                    continue
                rhs = rhs - c * self._eval(tag, mu, gamma)
            self.states[beta] = self.engine.factor.solve(rhs)
            self.counts["state"] += 1
            self.engine.counts["state"] += 1

    def ensure_adjoints(self, alpha: Sequence[int]) -> None:
        if self.omega is None:
            raise ValueError("reverse probes need an output covector omega")
        self.ensure_states(alpha)
        for beta in lattice(alpha):
            if beta in self.adjoints:
                continue
            rhs = 0.0
            for (tag, mu, gamma, vnode), c in expand("Q", beta, adjoint=True, support=self.engine.support).items():
                if tag == "R" and vnode == beta and not mu and not gamma:
                    continue
                rhs = rhs - c * self._eval_adj(tag, mu, gamma, vnode, "u")
            self.adjoints[beta] = self.engine.factor.solve_adjoint(rhs)
            self.counts["adjoint"] += 1
            self.engine.counts["adjoint"] += 1

    # -- probes
    def forward(self, alpha: Sequence[int]) -> np.ndarray:
        """``D^{|alpha|} q`` applied to the directions listed in ``alpha``."""
        alpha = tuple(sorted(alpha))
        if not alpha:
            raise ValueError("forward probes need at least one direction")
        self.ensure_states(alpha)
        y = 0.0
        for (tag, mu, gamma, _), c in expand("Q", alpha, support=self.engine.support).items():
            y = y + c * self._eval(tag, mu, gamma)
        return np.asarray(y, dtype=float)

    def reverse(self, alpha: Sequence[int]) -> np.ndarray:
        """Covector ``nu -> omega(D^{|alpha|+1} q Theta^alpha nu)`` over theta space."""
        alpha = tuple(sorted(alpha))
        self.ensure_adjoints(alpha)
        psi = 0.0
        for (tag, mu, gamma, vnode), c in expand("Q", alpha, adjoint=True, support=self.engine.support).items():
            psi = psi + c * self._eval_adj(tag, mu, gamma, vnode, "theta")
        return np.asarray(psi, dtype=float)


def forward_probe(fmap: ImplicitMap, theta0, dirs: Sequence[np.ndarray], alpha: Sequence[int], engine=None):
    """One forward probe from a fresh lattice; returns ``(y, solve_counts)``."""
    engine = engine or ProbeEngine(fmap, theta0)
    s = engine.session(dirs)
    y = s.forward(alpha)
    return y, dict(s.counts)


def reverse_probe(fmap: ImplicitMap, theta0, dirs, alpha, omega, engine=None):
    """One reverse probe from a fresh lattice; returns ``(psi, solve_counts)``."""
    engine = engine or ProbeEngine(fmap, theta0)
    s = engine.session(dirs, omega)
    psi = s.reverse(alpha)
    return psi, dict(s.counts)


# ---------------------------------------------------------------- training data


@dataclass
class ProbeSample:
    x: np.ndarray
    omega: np.ndarray
    psi: list[np.ndarray] = field(default_factory=list)  # psi[j-1] for order j
    y: list[np.ndarray] = field(default_factory=list)
    seed: int | None = None
    index: int = 0

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "order": len(self.y),
            "x": self.x.tolist(),
            "omega": self.omega.tolist(),
            "psi": [p.tolist() for p in self.psi],
            "y": [v.tolist() for v in self.y],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ProbeSample":
        return cls(
            np.asarray(rec["x"], dtype=float),
            np.asarray(rec["omega"], dtype=float),
            [np.asarray(p, dtype=float) for p in rec["psi"]],
            [np.asarray(v, dtype=float) for v in rec["y"]],
            rec.get("seed"),
            rec.get("index", 0),
        )


def generate_training_data(
    fmap: ImplicitMap,
    C: np.ndarray,
    theta0: np.ndarray,
    k: int,
    n_s: int,
    seed: int,
    Ct: np.ndarray | None = None,
    U: np.ndarray | None = None,
    V: np.ndarray | None = None,
    engine: ProbeEngine | None = None,
) -> list[ProbeSample]:
    """Symmetric forward and reverse probes of ``f(x) = q(theta0 + C x)``.

    With bases ``U`` and ``V`` the probes are of the reduced map
    ``V^T f(U x)``. ``Ct`` is the adjoint of ``C`` (defaults to ``C.T``).
    Inputs ``x`` and output covectors ``omega`` are unit-norm Gaussian draws.
    """
    C = np.asarray(C, dtype=float)
    Ct = C.T if Ct is None else np.asarray(Ct, dtype=float)
    engine = engine or ProbeEngine(fmap, theta0)
    N = C.shape[1] if U is None else U.shape[1]
    M = fmap.dim_out if V is None else V.shape[1]
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_s):
        x = rng.standard_normal(N)
        x /= np.linalg.norm(x)
        om = rng.standard_normal(M)
        om /= np.linalg.norm(om)
        x_full = x if U is None else U @ x
        om_full = om if V is None else V @ om
        sess = engine.session([C @ x_full], om_full)
        ys, psis = [], []
        for j in range(1, k + 1):
            y = sess.forward((0,) * j)
            psi = Ct @ sess.reverse((0,) * (j - 1))
            ys.append(y if V is None else V.T @ y)
            psis.append(psi if U is None else U.T @ psi)
        samples.append(ProbeSample(x, om, psis, ys, seed, i))
    return samples


def save_samples(samples: Sequence[ProbeSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def load_samples(path) -> list[ProbeSample]:
    with open(path) as fh:
        return [ProbeSample.from_record(json.loads(line)) for line in fh if line.strip()]


def samples_to_arrays(samples: Sequence[ProbeSample], j: int):
    """Stack order-``j`` data as ``(X, Omega, Psi, Y)`` arrays with one row per sample."""
    X = np.stack([s.x for s in samples])
    Om = np.stack([s.omega for s in samples])
    Psi = np.stack([s.psi[j - 1] for s in samples])
    Y = np.stack([s.y[j - 1] for s in samples])
    return X, Om, Psi, Y
