"""Fitting fixed-rank Tucker tensor trains to symmetric probe data.

For order ``j`` the target has ``j`` input indices of size ``N`` and one
output index of size ``M``. Each sample supplies ``(x, omega)`` and the data
``(psi, y)``; the model is probed with ``(x, ..., x, omega)`` so its first ``j``
probes are compared against ``psi`` and the last against ``y``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .deriv import ProbeSample, samples_to_arrays
from .manifold import (
    DegeneratePointError,
    GaugedVariation,
    ManifoldPoint,
    attach_and_retract,
    manifold_dimension,
    perturb_point,
    prepare_point,
    project_gauge,
)
from .sweep import apply_J, apply_JT, probe_t3, t3_forward
from .t3 import (
    TuckerTensorTrain,
    Truncation,
    random_t3,
    remove_useless_ranks,
    t3_norm,
    t3_svd_implicit,
    zero_pad_ranks,
)

__all__ = [
    "FitProblem",
    "FitOptions",
    "StageRecord",
    "ContinuationResult",
    "residuals",
    "loss",
    "loss_dense",
    "cg_steihaug",
    "tr_rmgn",
    "mc_sgd",
    "edge_condition_numbers",
    "propose_ranks",
    "fit_with_continuation",
    "relative_forward_error",
    "initial_guess",
]


@dataclass
class FitProblem:
    j: int
    X: np.ndarray
    Omega: np.ndarray
    Psi: np.ndarray
    Y: np.ndarray
    X_val: np.ndarray | None = None
    Y_val: np.ndarray | None = None

    @property
    def n_s(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> int:
        return self.Y.shape[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.N,) * self.j + (self.M,)

    @property
    def data_dimension(self) -> int:
        return self.n_s * (self.j * self.N + self.M)

    def probing_vectors(self, idx=None) -> list[np.ndarray]:
        X = self.X if idx is None else self.X[idx]
        Om = self.Omega if idx is None else self.Omega[idx]
        return [X] * self.j + [Om]

    def targets(self, idx=None) -> list[np.ndarray]:
        Psi = self.Psi if idx is None else self.Psi[idx]
        Y = self.Y if idx is None else self.Y[idx]
        return [Psi] * self.j + [Y]

    @classmethod
    def from_samples(
        cls, samples: Sequence[ProbeSample], j: int, val_fraction: float = 0.2, seed: int = 0
    ) -> "FitProblem":
        if not 0.0 <= val_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")
        X, Om, Psi, Y = samples_to_arrays(samples, j)
        order = np.random.default_rng(seed).permutation(len(samples))
        n_val = int(round(val_fraction * len(samples)))
        val, tr = order[:n_val], order[n_val:]
        return cls(j, X[tr], Om[tr], Psi[tr], Y[tr], X[val] if n_val else None, Y[val] if n_val else None)


@dataclass
class FitOptions:
    optimizer: str = "tr-rmgn"
    max_iter: int = 100
    gtol: float = 1e-13
    ftol: float = 0.0
    delta0: float = 1.0
    delta_max: float = 1e3
    eta_accept: float = 0.1
    cg_maxiter: int | None = None
    batch_size: int | None = None
    c_tau: float = 1.0
    c_t: float = 3.0
    tau_cond: float = 10.0
    n_chunk: int = 1
    max_dim_ratio: float = 0.5
    max_stages: int = 40
    target_error: float = 0.0
    noise: float = 1e-10
    seed: int = 0


# ---------------------------------------------------------------- loss


def residuals(p, problem: FitProblem, idx=None):
    """Residuals ``data - probes`` and the edge cache for the sample subset ``idx``."""
    zs, cache = probe_t3(p, problem.probing_vectors(idx))
    bs = [t - z for t, z in zip(problem.targets(idx), zs)]
    return bs, cache


def _sq(bs) -> float:
    return float(sum(np.vdot(b, b) for b in bs))


def loss(p, problem: FitProblem) -> float:
    bs, _ = residuals(p, problem)
    return 0.5 * _sq(bs) / problem.n_s


def loss_dense(A: np.ndarray, problem: FitProblem) -> float:
    """Brute-force loss of a dense tensor, one sample at a time."""
    from .tensor_core import probe_dense

    total = 0.0
    for i in range(problem.n_s):
        ws = [problem.X[i]] * problem.j + [problem.Omega[i]]
        zs = probe_dense(A, ws)
        targets = [problem.Psi[i]] * problem.j + [problem.Y[i]]
        total += sum(float(np.sum((t - z) ** 2)) for t, z in zip(targets, zs))
    return 0.5 * total / problem.n_s


def relative_forward_error(T, X: np.ndarray, Y: np.ndarray) -> float:
    """``sqrt(sum ||Y - T(x..x)||^2 / sum ||Y||^2)`` over rows of ``X``, ``Y``."""
    pred = t3_forward(T, X)
    den = float(np.sum(Y**2))
    num = float(np.sum((Y - pred) ** 2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)


# ---------------------------------------------------------------- CG-Steihaug


def _to_boundary(z: np.ndarray, d: np.ndarray, delta: float) -> np.ndarray:
    a = float(d @ d)
    b = 2.0 * float(z @ d)
    c = float(z @ z) - delta**2
    tau = (-b + math.sqrt(max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a)
    return z + tau * d


def cg_steihaug(H: Callable, g, delta: float, tol: float | None = None, maxiter: int | None = None):
    """Approximately minimize ``-<g, v> + <v, H v>/2`` subject to ``||v|| <= delta``.

    ``g`` may be a flat array or a :class:`GaugedVariation` (then ``H`` maps
    variations to variations). Returns ``(v, info)`` where ``info`` has keys
    ``iterations``, ``exit`` and ``boundary``.
    """
    wrap = isinstance(g, GaugedVariation)
    g_vec = g.to_vector() if wrap else np.asarray(g, dtype=float)
    Hv = (lambda x: H(g.like(x)).to_vector()) if wrap else H
    gnorm = float(np.linalg.norm(g_vec))
    if tol is None:
        tol = min(0.5, math.sqrt(gnorm)) * gnorm
    maxiter = maxiter or max(g_vec.size, 1)
    z = np.zeros_like(g_vec)
    r = g_vec.copy()
    d = r.copy()
    rr = float(r @ r)
    info = {"iterations": 0, "exit": "tolerance", "boundary": False}
    if math.sqrt(rr) <= tol:
        return (g.like(z) if wrap else z), info
    for it in range(maxiter):
        info["iterations"] = it + 1
        Hd = Hv(d)
        dHd = float(d @ Hd)
        if dHd <= 0.0:
            z = _to_boundary(z, d, delta)
            info.update(exit="negative curvature", boundary=True)
            break
        alpha = rr / dHd
        z_new = z + alpha * d
        if np.linalg.norm(z_new) >= delta:
            z = _to_boundary(z, d, delta)
            info.update(exit="radius", boundary=True)
            break
        z = z_new
        r = r - alpha * Hd
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= tol:
            info["exit"] = "tolerance"
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    else:
        info["exit"] = "maxiter"
    return (g.like(z) if wrap else z), info


# ---------------------------------------------------------------- optimizers


def _prepare(T: TuckerTensorTrain, noise: float, rng: np.random.Generator) -> ManifoldPoint:
    try:
        return prepare_point(T)
    except DegeneratePointError:
        return prepare_point(perturb_point(T, noise, rng))


def _gradient(p: ManifoldPoint, cache, bs) -> GaugedVariation:
    return project_gauge(p, apply_JT(p, cache, bs))


def tr_rmgn(problem: FitProblem, init: TuckerTensorTrain, opts: FitOptions | None = None):
    """Riemannian Gauss-Newton trust-region fit at the ranks of ``init``."""
    opts = opts or FitOptions()
    rng = np.random.default_rng(opts.seed)
    p = _prepare(init, opts.noise, rng)
    n, r = p.n, p.r
    bs, cache = residuals(p, problem)
    f = 0.5 * _sq(bs) / problem.n_s
    delta = opts.delta0
    trace = [{"iter": 0, "loss": f, "delta": delta, "rho": None, "accepted": True, "cg": 0}]
    g0 = None
    for it in range(1, opts.max_iter + 1):
        g = _gradient(p, cache, bs)
        gnorm = math.sqrt(max(float(g.to_vector() @ g.to_vector()), 0.0))
        g0 = gnorm if g0 is None else g0
        if f <= opts.ftol or gnorm <= opts.gtol * max(g0, 1e-300) or gnorm == 0.0:
            break

        def H(v, p=p, cache=cache):
            return project_gauge(p, apply_JT(p, cache, apply_J(p, cache, v)))

        v, info = cg_steihaug(H, g, delta, maxiter=opts.cg_maxiter)
        Jv = apply_J(p, cache, v)
        model = 0.5 * _sq([b - z for b, z in zip(bs, Jv)]) / problem.n_s
        pred = f - model
        T_new = attach_and_retract(p, v, n, r)
        try:
            p_new = prepare_point(T_new)
        except DegeneratePointError:
            p_new = None
        if p_new is not None:
            bs_new, cache_new = residuals(p_new, problem)
            f_new = 0.5 * _sq(bs_new) / problem.n_s
        else:
            f_new = math.inf
        rho = (f - f_new) / pred if pred > 0 else -math.inf
        if rho < 0.25:
            delta *= 0.25
        elif rho > 0.75 and info["boundary"]:
            delta = min(2.0 * delta, opts.delta_max)
        accepted = rho > opts.eta_accept and p_new is not None
        if accepted:
            p, bs, cache, f = p_new, bs_new, cache_new, f_new
        trace.append(
            {"iter": it, "loss": f, "delta": delta, "rho": rho, "accepted": accepted, "cg": info["iterations"]}
        )
        if delta < 1e-14 * max(opts.delta0, 1.0):
            break
    return p.to_t3(), trace


def mc_sgd(problem: FitProblem, init: TuckerTensorTrain, opts: FitOptions | None = None):
    """Minibatch Riemannian gradient descent with Cauchy steps and smoothed-loss stopping."""
    opts = opts or FitOptions(optimizer="mc-sgd", max_iter=5000)
    rng = np.random.default_rng(opts.seed)
    ns = problem.n_s
    B = opts.batch_size or max(1, ns // 10)
    B = min(B, ns)
    tau = opts.c_tau * ns / B
    alpha = 1.0 - math.exp(-1.0 / tau)
    lag = max(1, int(math.ceil(opts.c_t * ns / B)))
    p = _prepare(init, opts.noise, rng)
    n, r = p.n, p.r
    smoothed: list[float] = []
    trace = []
    for k in range(opts.max_iter):
        idx = np.sort(rng.choice(ns, size=B, replace=False))
        bs, cache = residuals(p, problem, idx)
        f_batch = 0.5 * _sq(bs) / B
        s = f_batch if not smoothed else alpha * f_batch + (1.0 - alpha) * smoothed[-1]
        smoothed.append(s)
        if k >= lag and s - smoothed[k - lag] > 0.0:
            trace.append({"iter": k, "batch_loss": f_batch, "smoothed": s, "step": 0.0, "stop": True})
            break
        g = _gradient(p, cache, bs)
        gg = float(g.to_vector() @ g.to_vector())
        if gg == 0.0:
            trace.append({"iter": k, "batch_loss": f_batch, "smoothed": s, "step": 0.0, "stop": True})
            break
        Jg = apply_J(p, cache, g)
        JgJg = _sq(Jg)
        step = 1e-3 / math.sqrt(gg) if JgJg < 1e-30 * gg else gg / JgJg
        T_new = attach_and_retract(p, step * g, n, r)
        p = _prepare(T_new, opts.noise, rng)
        trace.append({"iter": k, "batch_loss": f_batch, "smoothed": s, "step": step, "stop": False})
    return p.to_t3(), trace


# ---------------------------------------------------------------- rank continuation


def edge_condition_numbers(T: TuckerTensorTrain) -> tuple[np.ndarray, np.ndarray]:
    """Condition numbers of each matricization and each interior unfolding at the current ranks.

    The TT vector has length ``d + 1`` with boundary entries fixed at 1.
    """
    _, rep = t3_svd_implicit(T)
    d = T.d

    def kappa(s, k):
        s = s[:k]
        if s.size == 0 or s[-1] <= 0.0:
            return math.inf
        return float(s[0] / s[-1])

    tucker = np.array([kappa(s, k) for s, k in zip(rep.tucker_singular_values, T.tucker_ranks)])
    tt = np.ones(d + 1)
    for i, s in enumerate(rep.tt_singular_values, start=1):
        tt[i] = kappa(s, T.tt_ranks[i])
    return tucker, tt


def propose_ranks(T: TuckerTensorTrain, tau: float = 10.0, n_chunk: int = 1, kappas=None):
    """Grow the ranks of well-conditioned edges, falling back to uniform growth."""
    dims = T.shape
    d = T.d
    n, r = list(T.tucker_ranks), list(T.tt_ranks)
    k_tucker, k_tt = kappas if kappas is not None else edge_condition_numbers(T)
    kmax = max(float(np.max(k_tucker)), float(np.max(k_tt[1:d])) if d > 1 else 1.0)
    n_new = [n[i] + n_chunk if k_tucker[i] * tau < kmax else n[i] for i in range(d)]
    r_new = [r[i] + n_chunk if 0 < i < d and k_tt[i] * tau < kmax else r[i] for i in range(d + 1)]
    n_new, r_new = remove_useless_ranks(n_new, r_new, dims)
    if (n_new, r_new) == (tuple(n), tuple(r)):
        n_new = [x + n_chunk for x in n]
        r_new = [1] + [x + n_chunk for x in r[1:d]] + [1]
        n_new, r_new = remove_useless_ranks(n_new, r_new, dims)
    return n_new, r_new


def initial_guess(problem: FitProblem, rng: np.random.Generator) -> TuckerTensorTrain:
    """Rank-one Gaussian T3 whose norm equals the RMS norm of the forward data."""
    d = problem.j + 1
    T = random_t3(problem.dims, (1,) * d, (1,) * (d + 1), rng)
    target = math.sqrt(float(np.mean(np.sum(problem.Y**2, axis=1))))
    norm = t3_norm(T)
    return T.scaled(target / norm if norm > 0 else 0.0)


@dataclass
class StageRecord:
    stage: int
    n: tuple[int, ...]
    r: tuple[int, ...]
    manifold_dim: int
    train_loss: float
    val_error: float
    wall_time: float
    model: TuckerTensorTrain = field(repr=False)


@dataclass
class ContinuationResult:
    best: TuckerTensorTrain
    best_stage: int
    stages: list[StageRecord]
    traces: list[list[dict]]

    def csv_rows(self) -> list[dict]:
        return [
            {
                "stage": s.stage,
                "n": " ".join(map(str, s.n)),
                "r": " ".join(map(str, s.r)),
                "manifold_dim": s.manifold_dim,
                "train_loss": s.train_loss,
                "val_error": s.val_error,
                "wall_time": s.wall_time,
            }
            for s in self.stages
        ]


def fit_with_continuation(
    problem: FitProblem,
    opts: FitOptions | None = None,
    init: TuckerTensorTrain | None = None,
    callback: Callable[[StageRecord], None] | None = None,
) -> ContinuationResult:
    """Alternate fixed-rank fits and rank increases; keep the best validated stage."""
    opts = opts or FitOptions()
    rng = np.random.default_rng(opts.seed)
    optimizer = {"tr-rmgn": tr_rmgn, "mc-sgd": mc_sgd}[opts.optimizer]
    T = init if init is not None else initial_guess(problem, rng)
    X_val = problem.X_val if problem.X_val is not None else problem.X
    Y_val = problem.Y_val if problem.Y_val is not None else problem.Y
    stages: list[StageRecord] = []
    traces = []
    if not (np.any(problem.Y) or np.any(problem.Psi)):
        # zero data: the zero tensor at all-ones ranks fits exactly, and has no manifold to optimize on
        Z = initial_guess(problem, rng).scaled(0.0)
        dim = manifold_dimension(Z.shape, Z.tucker_ranks, Z.tt_ranks)
        rec = StageRecord(0, Z.tucker_ranks, Z.tt_ranks, dim, 0.0, relative_forward_error(Z, X_val, Y_val), 0.0, Z)
        if callback is not None:
            callback(rec)
        return ContinuationResult(Z, 0, [rec], [[]])
    for stage in range(opts.max_stages):
        t0 = time.perf_counter()
        stage_opts = replace(opts, seed=int(rng.integers(2**31)))
        T, trace = optimizer(problem, T, stage_opts)
        rec = StageRecord(
            stage,
            T.tucker_ranks,
            T.tt_ranks,
            manifold_dimension(T.shape, T.tucker_ranks, T.tt_ranks),
            loss(T, problem),
            relative_forward_error(T, X_val, Y_val),
            time.perf_counter() - t0,
            T,
        )
        stages.append(rec)
        traces.append(trace)
        if callback is not None:
            callback(rec)
        if rec.manifold_dim > opts.max_dim_ratio * problem.data_dimension:
            break
        if rec.val_error <= opts.target_error:
            break
        n_new, r_new = propose_ranks(T, opts.tau_cond, opts.n_chunk)
        if (n_new, r_new) == (T.tucker_ranks, T.tt_ranks):
            break
        T = perturb_point(zero_pad_ranks(T, n_new, r_new), opts.noise, rng)
    best = min(range(len(stages)), key=lambda i: stages[i].val_error)
    return ContinuationResult(stages[best].model, best, stages, traces)
