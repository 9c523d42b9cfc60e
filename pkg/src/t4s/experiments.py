"""Scenario runners behind the command line: random-tensor benchmark,
end-to-end surrogate on the built-in implicit map, and solve-count tables."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import surrogate
from .deriv import ProbeEngine, builtin_test_map, term_count
from .fit import FitOptions, FitProblem, fit_with_continuation, relative_forward_error
from .sketch import SketchConfig, build_input_basis, build_output_basis, reduce_map
from .surrogate import T4SModel, evaluate, lift_to_original
from .t3 import Truncation, t3_svd_dense
from .tensor_core import precondition, probe_dense, symmetrize_inputs

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "config_hash",
    "run_random_tensor",
    "run_implicit_map",
    "run_deriv_verify",
    "solve_count_table",
    "SOLVE_TABLE",
    "TERM_TABLE",
]

SCENARIOS = ("random-tensor", "implicit-map", "deriv-verify")

# Incremental solves for one probe of order j = 1..10, and symbolic term counts.
SOLVE_TABLE = {
    ("forward", "sym"): [j for j in range(1, 11)],
    ("forward", "asym"): [2**j - 1 for j in range(1, 11)],
    ("reverse", "sym"): [2 * j - 1 for j in range(1, 11)],
    ("reverse", "asym"): [2**j - 1 for j in range(1, 11)],
}
TERM_TABLE = {
    "sym": [2, 4, 7, 12, 19, 30, 45, 67, 97, 139],
    "asym": [2, 5, 15, 52, 203, 877, 4140, 21147, 115975, 678570],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "random-tensor"
    k: int = 3
    N: int = 12
    M: int = 10
    power: float = 2.0
    n_s: int = 400
    n_val: int = 100
    n_t: int = 500
    optimizer: str = "mc-sgd"
    max_iter: int = 3000
    n_chunk: int = 1
    ratio_cap: float = 0.5
    max_stages: int = 40
    seeds: list[int] = field(default_factory=lambda: [0])
    # implicit-map scenario
    dim_theta: int = 20
    gamma: float = 0.1
    map_seed: int = 0
    sketch_eps: float = 0.05
    sketch_patience: int = 5
    test_scale: float = 0.1
    # deriv-verify scenario
    max_order: int = 10

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        for name in ("N", "M", "n_s", "n_t", "max_iter", "n_chunk", "max_stages", "dim_theta", "sketch_patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.k < 0 or (self.scenario == "random-tensor" and self.k < 1):
            raise ConfigError("k must be positive for the random-tensor scenario")
        if self.n_val < 0:
            raise ConfigError("n_val must be nonnegative")
        if self.optimizer not in ("tr-rmgn", "mc-sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.ratio_cap < 0:
            raise ConfigError("ratio_cap must be nonnegative")
        if not 0 < self.sketch_eps < 1:
            raise ConfigError("sketch_eps must lie in (0, 1)")
        if not 1 <= self.max_order <= 10:
            raise ConfigError("max_order must lie in 1..10")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "seeds" in data:
            seeds = data["seeds"]
            data["seeds"] = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
        try:
            cfg = cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        for f in fields(cls):
            v = getattr(cfg, f.name)
            want = type(getattr(cls(), f.name))
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
            elif not isinstance(v, want) or isinstance(v, bool) != (want is bool):
                raise ConfigError(f"{f.name} should be {want.__name__}, got {type(v).__name__}")
        return cfg.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- random tensor


def _unit_rows(A: np.ndarray) -> np.ndarray:
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def random_tensor_target(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    A = rng.standard_normal((cfg.N,) * cfg.k + (cfg.M,))
    C = np.diag(np.arange(1, cfg.N + 1, dtype=float) ** -cfg.power)
    return precondition(symmetrize_inputs(A, cfg.k), C, cfg.k)


def dense_probe_data(T: np.ndarray, k: int, X: np.ndarray, Om: np.ndarray):
    """Input-side and output-side probes of a dense input-symmetric target."""
    Psi, Y = [], []
    for x, om in zip(X, Om):
        z = probe_dense(T, [x] * k + [om])
        Psi.append(z[0])
        Y.append(z[-1])
    return np.array(Psi), np.array(Y)


def _forward_dense(T: np.ndarray, X: np.ndarray) -> np.ndarray:
    out = np.tensordot(X, T, axes=([1], [0]))
    for _ in range(T.ndim - 2):
        out = np.einsum("si,si...->s...", X, out)
    return out


def random_tensor_problem(cfg: ExperimentConfig, seed: int):
    """Target, fitting problem, and unnormalized test set for one seed."""
    rng = np.random.default_rng(seed)
    T = random_tensor_target(cfg, rng)
    X = _unit_rows(rng.standard_normal((cfg.n_s + cfg.n_val, cfg.N)))
    Om = _unit_rows(rng.standard_normal((cfg.n_s + cfg.n_val, cfg.M)))
    Psi, Y = dense_probe_data(T, cfg.k, X, Om)
    tr = slice(0, cfg.n_s)
    va = slice(cfg.n_s, None)
    prob = FitProblem(
        cfg.k, X[tr], Om[tr], Psi[tr], Y[tr], X[va] if cfg.n_val else None, Y[va] if cfg.n_val else None
    )
    Xt = rng.standard_normal((cfg.n_t, cfg.N))
    Yt = _forward_dense(T, Xt)
    return T, prob, Xt, Yt


def fit_options(cfg: ExperimentConfig, seed: int) -> FitOptions:
    return FitOptions(
        optimizer=cfg.optimizer,
        max_iter=cfg.max_iter,
        n_chunk=cfg.n_chunk,
        max_dim_ratio=cfg.ratio_cap,
        max_stages=cfg.max_stages,
        seed=seed,
    )


def run_random_tensor_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Fit one random target with rank continuation; baseline at every stage's ranks."""
    T, prob, Xt, Yt = random_tensor_problem(cfg, seed)
    curve = []

    def record(s):
        base, _ = t3_svd_dense(T, Truncation.to_ranks(s.n, s.r))
        curve.append(
            {
                "stage": s.stage,
                "manifold_dim": s.manifold_dim,
                "n": list(s.n),
                "r": list(s.r),
                "fit": relative_forward_error(s.model, Xt, Yt),
                "t3-svd": relative_forward_error(base, Xt, Yt),
                "val": s.val_error,
                "wall_time": s.wall_time,
            }
        )

    res = fit_with_continuation(prob, fit_options(cfg, seed), callback=record)
    return {"seed": seed, "curve": curve, "best_stage": res.best_stage, "data_dimension": prob.data_dimension}


def run_random_tensor(cfg: ExperimentConfig, out: Path) -> dict:
    h = config_hash(cfg)
    rows, summary, timing = [], {"config_hash": h, "config": cfg.to_dict(), "seeds": {}}, {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        r = run_random_tensor_seed(cfg, seed)
        timing[str(seed)] = {"total": time.perf_counter() - t0, "stages": [c["wall_time"] for c in r["curve"]]}
        for c in r["curve"]:
            for method in ("fit", "t3-svd"):
                rows.append([h, seed, c["stage"], c["manifold_dim"], method, c[method]])
        best = r["curve"][r["best_stage"]]
        summary["seeds"][str(seed)] = {
            "best_stage": r["best_stage"],
            "best_manifold_dim": best["manifold_dim"],
            "best_fit_error": best["fit"],
            "baseline_error_at_best": best["t3-svd"],
            "stages": len(r["curve"]),
            "data_dimension": r["data_dimension"],
        }
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "curves.csv", ["config_hash", "seed", "stage", "manifold_dim", "method", "relative_forward_error"], rows)
    _write_json(out / "summary.json", summary)
    _write_json(out / "metadata.json", {"config_hash": h, "finished": time.time(), "wall_time": timing})
    return summary


# ---------------------------------------------------------------- implicit map


def build_surrogate(cfg: ExperimentConfig, seed: int):
    """Sketch, probe, and fit every order of the built-in map; returns the full-space model."""
    fmap = builtin_test_map(cfg.dim_theta, cfg.M, seed=cfg.map_seed, gamma=cfg.gamma)
    theta0 = np.zeros(cfg.dim_theta)
    C = np.diag(np.arange(1, cfg.dim_theta + 1, dtype=float) ** -(cfg.power / 2))
    engine = ProbeEngine(fmap, theta0)
    order = max(cfg.k, 1)
    sk = SketchConfig(eps=cfg.sketch_eps, patience=cfg.sketch_patience, k=order)
    V = build_output_basis(fmap, C, theta0, sk, seed, engine=engine).basis
    U = build_input_basis(fmap, C, theta0, V, sk, seed + 1, engine=engine).basis
    red = reduce_map(fmap, U, V, C, theta0, engine=engine)
    f0 = red(np.zeros(red.dim_in))
    terms, stages = [], []
    if cfg.k >= 1:
        samples = red.training_data(cfg.k, cfg.n_s + cfg.n_val, seed + 2)
        for j in range(1, cfg.k + 1):
            frac = cfg.n_val / (cfg.n_s + cfg.n_val)
            prob = FitProblem.from_samples(samples, j, val_fraction=frac, seed=seed + 3)
            res = fit_with_continuation(prob, fit_options(cfg, seed + 10 * j))
            terms.append(res.best)
            stages.append(res.csv_rows())
    reduced = T4SModel(f0, terms, U, V, {"seed": seed, "config_hash": config_hash(cfg)})
    model = lift_to_original(reduced, U, V, f0_full=fmap.q(theta0))
    return fmap, theta0, C, reduced, model, stages


def run_implicit_map(cfg: ExperimentConfig, out: Path) -> dict:
    h = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    lines, summary, timing = [], {"config_hash": h, "config": cfg.to_dict(), "seeds": {}}, {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        fmap, theta0, C, reduced, model, stages = build_surrogate(cfg, seed)
        surrogate.save(reduced, out / f"model_seed{seed}.t4s")
        rng = np.random.default_rng(seed + 99)
        errs = np.zeros((cfg.n_t, cfg.k + 1))
        for i in range(cfg.n_t):
            x = cfg.test_scale * rng.standard_normal(cfg.dim_theta)
            q = fmap.q(theta0 + C @ x)
            for j in range(cfg.k + 1):
                errs[i, j] = np.linalg.norm(q - evaluate(model, x, j)) / np.linalg.norm(q)
            lines.append(json.dumps({"config_hash": h, "seed": seed, "sample": i, "errors": errs[i].tolist()}))
        timing[str(seed)] = time.perf_counter() - t0
        summary["seeds"][str(seed)] = {
            "median_error_by_order": np.median(errs, axis=0).tolist(),
            "input_dim": int(reduced.U.shape[1]),
            "output_dim": int(reduced.V.shape[1]),
            "ranks": [{"n": list(T.tucker_ranks), "r": list(T.tt_ranks)} for T in reduced.terms],
        }
    (out / "errors.jsonl").write_text("\n".join(lines) + "\n")
    _write_json(out / "summary.json", summary)
    _write_json(out / "metadata.json", {"config_hash": h, "finished": time.time(), "wall_time": timing})
    return summary


# ---------------------------------------------------------------- derivative tables


def solve_count_table(max_order: int = 10, dim: int = 6, seed: int = 0) -> dict[tuple[str, str], list[int]]:
    """Incremental solves per probe, read from live counters on the built-in map."""
    fmap = builtin_test_map(dim, 3, seed=seed)
    engine = ProbeEngine(fmap, np.zeros(dim))
    rng = np.random.default_rng(seed)
    out: dict[tuple[str, str], list[int]] = {key: [] for key in SOLVE_TABLE}
    for j in range(1, max_order + 1):
        dirs = [rng.standard_normal(dim) for _ in range(j)]
        omega = rng.standard_normal(fmap.dim_out)
        for sym in ("sym", "asym"):
            alpha = (0,) * j if sym == "sym" else tuple(range(j))
            s = engine.session(dirs)
            s.forward(alpha)
            out[("forward", sym)].append(s.counts["state"])
            s = engine.session(dirs, omega)
            s.reverse(alpha[:-1])
            out[("reverse", sym)].append(s.counts["state"] + s.counts["adjoint"])
    return out


def run_deriv_verify(cfg: ExperimentConfig | None = None, out: Path | None = None, echo=print) -> bool:
    """Print live solve and term counts next to the reference integers; True when all match."""
    max_order = cfg.max_order if cfg is not None else 10
    ok = True
    solves = solve_count_table(max_order)
    echo("incremental solves per probe, order 1.." + str(max_order))
    for key, ref in SOLVE_TABLE.items():
        live = solves[key]
        match = live == ref[:max_order]
        ok &= match
        echo(f"  {key[0]:7s} {key[1]:4s} {'ok' if match else 'MISMATCH'}  live={live}")
        if not match:
            echo(f"  {'':12s} expected={ref[:max_order]}")
    terms = {}
    echo("symbolic terms of the forward probe")
    for sym, ref in TERM_TABLE.items():
        live = [term_count(j, symmetric=(sym == "sym")) for j in range(1, max_order + 1)]
        terms[sym] = live
        match = live == ref[:max_order]
        ok &= match
        echo(f"  {sym:4s} {'ok' if match else 'MISMATCH'}  live={live}")
        if not match:
            echo(f"  {'':4s} expected={ref[:max_order]}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rows = [[d, s, j + 1, v] for (d, s), vals in solves.items() for j, v in enumerate(vals)]
        _write_csv(out / "solve_counts.csv", ["direction", "symmetry", "order", "solves"], rows)
        _write_json(
            out / "summary.json",
            {
                "config_hash": config_hash(cfg) if cfg is not None else None,
                "match": bool(ok),
                "term_counts": terms,
            },
        )
    return bool(ok)


def run(cfg: ExperimentConfig, out: Path) -> bool:
    """Dispatch on the scenario; False signals a verification mismatch."""
    if cfg.scenario == "random-tensor":
        run_random_tensor(cfg, out)
    elif cfg.scenario == "implicit-map":
        run_implicit_map(cfg, out)
    else:
        return run_deriv_verify(cfg, out)
    return True


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw).validate()
