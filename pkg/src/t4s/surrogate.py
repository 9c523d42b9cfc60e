"""Taylor surrogates whose derivative terms are Tucker tensor trains."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import container
from .sweep import t3_forward
from .t3 import TuckerTensorTrain, t3_arrays, t3_from_arrays

__all__ = ["T4SModel", "evaluate", "lift_to_original", "save", "load"]


@dataclass
class T4SModel:
    """``f_k(x) = f0 + sum_j T_j(x, ..., x) / j!`` for ``j = 1..k``.

    ``terms[j-1]`` holds the order-``j`` term, a T3 with ``j`` input indices and
    one output index. Optional bases ``U``, ``V`` record the reduced spaces the
    terms live in.
    """

    f0: np.ndarray
    terms: list[TuckerTensorTrain] = field(default_factory=list)
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=float)
        M = self.f0.shape[0]
        for j, T in enumerate(self.terms, start=1):
            if T.d != j + 1:
                raise ValueError(f"term {j} must have {j + 1} indices, has {T.d}")
            if T.shape[-1] != M:
                raise ValueError(f"term {j} output dimension {T.shape[-1]} differs from f0 ({M})")
            if j > 1 and T.shape[0] != self.terms[0].shape[0]:
                raise ValueError("all terms must share the input dimension")

    @property
    def order(self) -> int:
        return len(self.terms)

    @property
    def dim_in(self) -> int | None:
        return self.terms[0].shape[0] if self.terms else None

    @property
    def dim_out(self) -> int:
        return self.f0.shape[0]


def evaluate(model: T4SModel, x: np.ndarray, up_to: int | None = None) -> np.ndarray:
    """Partial Taylor sum through order ``up_to`` (default: all terms).

    ``x`` may be a single vector or a batch with one input per row.
    """
    k = model.order if up_to is None else int(up_to)
    if not 0 <= k <= model.order:
        raise ValueError(f"order {k} outside 0..{model.order}")
    x = np.asarray(x, dtype=float)
    out = np.broadcast_to(model.f0, x.shape[:-1] + model.f0.shape).copy()
    for j in range(1, k + 1):
        out += t3_forward(model.terms[j - 1], x) / math.factorial(j)
    return out


def lift_to_original(model: T4SModel, U: np.ndarray, V: np.ndarray, f0_full: np.ndarray | None = None) -> T4SModel:
    """Express a reduced model on the original spaces by composing term bases with ``U``, ``V``.

    The lifted model satisfies ``lifted(x) = V @ model(U.T @ x)``; pass
    ``f0_full`` to replace ``V @ f0`` by the exact full-space constant term.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    terms = []
    for T in model.terms:
        bases = [U @ B for B in T.bases[:-1]] + [V @ T.bases[-1]]
        terms.append(TuckerTensorTrain(bases, T.cores))
    f0 = V @ model.f0 if f0_full is None else np.asarray(f0_full, dtype=float)
    return T4SModel(f0, terms, None, None, dict(model.meta))


def save(model: T4SModel, path) -> None:
    arrays: dict[str, np.ndarray] = {"f0": model.f0}
    for j, T in enumerate(model.terms, start=1):
        arrays.update(t3_arrays(T, prefix=f"T{j}_"))
    if model.U is not None:
        arrays["basis_U"] = model.U
    if model.V is not None:
        arrays["basis_V"] = model.V
    meta = {
        "order": model.order,
        "ranks": [{"n": list(T.tucker_ranks), "r": list(T.tt_ranks)} for T in model.terms],
        "meta": model.meta,
    }
    container.save(path, "t4s-model", arrays, meta)


def load(path) -> T4SModel:
    arrays, meta = container.load(path, "t4s-model")
    terms = [t3_from_arrays(arrays, j + 1, prefix=f"T{j}_") for j in range(1, int(meta["order"]) + 1)]
    for T, rk in zip(terms, meta["ranks"]):
        if list(T.tucker_ranks) != rk["n"] or list(T.tt_ranks) != rk["r"]:
            raise container.ContainerError("rank metadata does not match stored cores")
    return T4SModel(arrays["f0"], terms, arrays.get("basis_U"), arrays.get("basis_V"), meta.get("meta", {}))
