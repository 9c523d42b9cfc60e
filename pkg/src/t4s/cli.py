"""Command line entry point: ``t4s run``, ``t4s verify-tables``, ``t4s probe``."""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path

import numpy as np

from .experiments import ConfigError, ExperimentConfig, run, run_deriv_verify, with_overrides

EXIT_OK = 0
EXIT_MISMATCH = 2
EXIT_CONFIG = 3

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    # allow either a flat file or an [experiment] table
    if set(data) == {"experiment"} and isinstance(data["experiment"], dict):
        data = data["experiment"]
    return ExperimentConfig.from_dict(data)


def _threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _probe_check(order: int, mode: str, seed: int = 0, dim: int = 8) -> float:
    """Relative gap between a symmetric probe and a central finite difference."""
    from .deriv import ProbeEngine, builtin_test_map

    fmap = builtin_test_map(dim, 4, seed=seed)
    rng = np.random.default_rng(seed)
    theta0 = 0.1 * rng.standard_normal(dim)
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    omega = rng.standard_normal(fmap.dim_out)
    eng = ProbeEngine(fmap, theta0)
    s = eng.session([x], omega)
    if mode == "fwd":
        val = s.forward((0,) * order)

        def g(t):
            return fmap.q(theta0 + t * x)
    else:
        val = x @ s.reverse((0,) * (order - 1))

        def g(t):
            return omega @ fmap.q(theta0 + t * x)
    # 9-point stencil of the order-th derivative of t -> g(t) at zero
    h = {1: 1e-2, 2: 2e-2, 3: 4e-2}.get(order, 0.1)
    weights = {
        1: [1 / 280, -4 / 105, 1 / 5, -4 / 5, 0, 4 / 5, -1 / 5, 4 / 105, -1 / 280],
        2: [-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560],
        3: [-7 / 240, 3 / 10, -169 / 120, 61 / 30, 0, -61 / 30, 169 / 120, -3 / 10, 7 / 240],
    }
    if order not in weights:
        raise ValueError("finite-difference check supports orders 1..3")
    fd = sum(w * g((i - 4) * h) for i, w in enumerate(weights[order])) / h**order
    print(f"order {order} {mode}: probe norm {np.linalg.norm(val):.6e}")
    return float(np.linalg.norm(val - fd) / max(np.linalg.norm(fd), 1e-300))


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors; argparse would exit 2, which means mismatch here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="t4s", description="Tucker tensor train Taylor surrogates.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario from a TOML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the config seeds")
    r.add_argument("--threads", type=int)
    r.add_argument("--out", default="results")
    r.add_argument("--optimizer", choices=["tr-rmgn", "mc-sgd"])
    r.add_argument("--n-chunk", type=int)
    r.add_argument("--ratio-cap", type=float)

    v = sub.add_parser("verify-tables", help="check live solve and term counts against the reference tables")
    v.add_argument("--max-order", type=int, default=10)
    v.add_argument("--out")

    pr = sub.add_parser("probe", help="compare one derivative probe with finite differences")
    pr.add_argument("--order", type=int, required=True)
    pr.add_argument("--mode", choices=["fwd", "rev"], required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--tol", type=float, default=1e-5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = with_overrides(
                load_config(args.config),
                seeds=args.seed,
                optimizer=args.optimizer,
                n_chunk=args.n_chunk,
                ratio_cap=args.ratio_cap,
            )
            if args.threads is not None and args.threads < 1:
                raise ConfigError("--threads must be positive")
            with _threads(args.threads):
                ok = run(cfg, Path(args.out))
            return EXIT_OK if ok else EXIT_MISMATCH
        if args.command == "verify-tables":
            cfg = ExperimentConfig(scenario="deriv-verify", max_order=args.max_order).validate()
            ok = run_deriv_verify(cfg, Path(args.out) if args.out else None)
            return EXIT_OK if ok else EXIT_MISMATCH
        if not 1 <= args.order <= 3:
            raise ConfigError("--order must lie in 1..3")
        err = _probe_check(args.order, args.mode, args.seed)
        print(f"relative difference to finite differences: {err:.3e}")
        return EXIT_OK if err <= args.tol else EXIT_MISMATCH
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
