"""Randomized output and input bases from derivative probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deriv import ImplicitMap, ProbeEngine, generate_training_data

__all__ = ["SketchConfig", "SketchResult", "build_output_basis", "build_input_basis", "ReducedMap", "reduce_map"]


@dataclass(frozen=True)
class SketchConfig:
    eps: float = 0.01
    patience: int = 5
    k: int = 1
    reorth_every: int = 25
    max_iter: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.patience < 1 or self.k < 1:
            raise ValueError("patience and k must be positive")


@dataclass
class SketchResult:
    basis: np.ndarray
    iterations: int
    saturated: bool
    sizes: list[int] = field(default_factory=list)


class _Growing:
    def __init__(self, dim: int, reorth_every: int):
        self.cols: list[np.ndarray] = []
        self.dim = dim
        self.reorth_every = reorth_every
        self.inserted = 0

    @property
    def B(self) -> np.ndarray:
        return np.stack(self.cols, axis=1) if self.cols else np.zeros((self.dim, 0))

    def residual(self, y: np.ndarray) -> np.ndarray:
        B = self.B
        rho = y - B @ (B.T @ y)
        return rho - B @ (B.T @ rho)

    def offer(self, y: np.ndarray, eps: float) -> bool:
        ny = np.linalg.norm(y)
        if ny == 0.0 or len(self.cols) >= self.dim:
            return False
        rho = self.residual(y)
        nr = np.linalg.norm(rho)
        if nr < eps * ny:
            return False
        self.cols.append(rho / nr)
        self.inserted += 1
        if self.inserted % self.reorth_every == 0:
            Q, _ = np.linalg.qr(self.B)
            self.cols = list(Q.T)
        return True


def _run(sample, dim: int, cfg: SketchConfig, rng) -> SketchResult:
    grow = _Growing(dim, cfg.reorth_every)
    quiet, it, sizes = 0, 0, []
    while quiet < cfg.patience and it < cfg.max_iter:
        it += 1
        updated = False
        for vec in sample(rng):
            updated |= grow.offer(vec, cfg.eps)
        quiet = 0 if updated else quiet + 1
        sizes.append(len(grow.cols))
        if len(grow.cols) >= dim:
            break
    return SketchResult(grow.B, it, len(grow.cols) >= dim, sizes)


def build_output_basis(fmap: ImplicitMap, C, theta0, cfg: SketchConfig, seed: int, engine=None) -> SketchResult:
    """Shared basis for forward probes of orders ``1..k`` along ``C z`` draws."""
    C = np.asarray(C, dtype=float)
    engine = engine or ProbeEngine(fmap, theta0)

    def sample(rng):
        sess = engine.session([C @ rng.standard_normal(C.shape[1])])
        return [sess.forward((0,) * j) for j in range(1, cfg.k + 1)]

    return _run(sample, fmap.dim_out, cfg, np.random.default_rng(seed))


def build_input_basis(fmap: ImplicitMap, C, theta0, V, cfg: SketchConfig, seed: int, Ct=None, engine=None) -> SketchResult:
    """Shared basis for preconditioned reverse probes with covectors in the span of ``V``."""
    C = np.asarray(C, dtype=float)
    Ct = C.T if Ct is None else np.asarray(Ct, dtype=float)
    V = np.asarray(V, dtype=float)
    engine = engine or ProbeEngine(fmap, theta0)

    def sample(rng):
        theta_hat = C @ rng.standard_normal(C.shape[1])
        omega = V @ rng.standard_normal(V.shape[1])
        sess = engine.session([theta_hat], omega)
        return [Ct @ sess.reverse((0,) * (j - 1)) for j in range(1, cfg.k + 1)]

    return _run(sample, C.shape[1], cfg, np.random.default_rng(seed))


class ReducedMap:
    """Probes of ``f~(x) = V^T f(U x)`` with ``f(x) = q(theta0 + C x)``."""

    def __init__(self, fmap: ImplicitMap, U, V, C, theta0, Ct=None, engine=None):
        self.map = fmap
        self.C = np.asarray(C, dtype=float)
        self.Ct = self.C.T if Ct is None else np.asarray(Ct, dtype=float)
        self.U = np.asarray(U, dtype=float)
        self.V = np.asarray(V, dtype=float)
        self.theta0 = np.asarray(theta0, dtype=float)
        self.engine = engine or ProbeEngine(fmap, theta0)

    @property
    def dim_in(self) -> int:
        return self.U.shape[1]

    @property
    def dim_out(self) -> int:
        return self.V.shape[1]

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.C @ (self.U @ x)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.V.T @ self.map.q(self.theta0 + self.lift(x))

    def forward(self, xs, alpha) -> np.ndarray:
        sess = self.engine.session([self.lift(x) for x in xs])
        return self.V.T @ sess.forward(alpha)

    def reverse(self, xs, alpha, omega) -> np.ndarray:
        sess = self.engine.session([self.lift(x) for x in xs], self.V @ omega)
        return self.U.T @ (self.Ct @ sess.reverse(alpha))

    def training_data(self, k: int, n_s: int, seed: int):
        return generate_training_data(
            self.map, self.C, self.theta0, k, n_s, seed, Ct=self.Ct, U=self.U, V=self.V, engine=self.engine
        )


def reduce_map(fmap: ImplicitMap, U, V, C, theta0, Ct=None, engine=None) -> ReducedMap:
    for name, B in (("U", U), ("V", V)):
        B = np.asarray(B, dtype=float)
        if np.linalg.norm(B.T @ B - np.eye(B.shape[1])) > 1e-8:
            raise ValueError(f"{name} must have orthonormal columns")
    return ReducedMap(fmap, U, V, C, theta0, Ct, engine)
