import numpy as np
import pytest

from t4s.deriv import ProbeSample
from t4s.experiments import dense_probe_data
from t4s.fit import (
    FitOptions,
    FitProblem,
    cg_steihaug,
    edge_condition_numbers,
    fit_with_continuation,
    initial_guess,
    loss,
    loss_dense,
    mc_sgd,
    propose_ranks,
    relative_forward_error,
    residuals,
    tr_rmgn,
)
from t4s.manifold import attach_and_retract, manifold_dimension, perturb_point, prepare_point, project_gauge, random_variation
from t4s.sweep import apply_J, apply_JT
from t4s.t3 import TuckerTensorTrain, Truncation, contract_full, random_t3, t3_svd_dense


def symmetric_plant(N=5, M=4, R=2, seed=0):
    """``T[a, b, m] = sum_r u_r[a] u_r[b] w_r[m]``: input-symmetric with T3 ranks (R, R, R), (1, R, R, 1)."""
    rng = np.random.default_rng(seed)
    Uf = rng.standard_normal((N, R))
    W = rng.standard_normal((M, R))
    return np.einsum("ar,br,mr->abm", Uf, Uf, W)


def problem_from_dense(T, n_s, seed, n_val=0):
    rng = np.random.default_rng(seed)
    k = T.ndim - 1
    X = rng.standard_normal((n_s + n_val, T.shape[0]))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    Om = rng.standard_normal((n_s + n_val, T.shape[-1]))
    Om /= np.linalg.norm(Om, axis=1, keepdims=True)
    Psi, Y = dense_probe_data(T, k, X, Om)
    if n_val:
        return FitProblem(k, X[:n_s], Om[:n_s], Psi[:n_s], Y[:n_s], X[n_s:], Y[n_s:])
    return FitProblem(k, X, Om, Psi, Y)


def test_loss_matches_dense():
    T = symmetric_plant()
    prob = problem_from_dense(T, 20, 1)
    G = random_t3(T.shape, (2, 3, 2), (1, 2, 2, 1), np.random.default_rng(2))
    assert loss(G, prob) == pytest.approx(loss_dense(contract_full(G), prob), rel=1e-12)
    assert loss_dense(T, prob) < 1e-28
    assert prob.data_dimension == 20 * (2 * 5 + 4)


def test_relative_forward_error():
    T = symmetric_plant()
    G, _ = t3_svd_dense(T)
    X = np.random.default_rng(3).standard_normal((10, 5))
    Y = np.einsum("sa,sb,abm->sm", X, X, T)
    assert relative_forward_error(G, X, Y) < 1e-13
    assert relative_forward_error(G.scaled(0.0), X, Y) == pytest.approx(1.0)


def test_loss_gradient_matches_directional_derivative():
    T = symmetric_plant(seed=4)
    prob = problem_from_dense(T, 30, 5)
    p = prepare_point(random_t3(T.shape, (2, 2, 2), (1, 2, 2, 1), np.random.default_rng(6)))
    bs, cache = residuals(p, prob)
    g = project_gauge(p, apply_JT(p, cache, bs))
    v = random_variation(p, np.random.default_rng(7))
    h = 1e-6
    fp = loss(attach_and_retract(p, h * v), prob)
    fm = loss(attach_and_retract(p, -h * v), prob)
    slope = (fp - fm) / (2 * h)
    assert slope == pytest.approx(-(g.to_vector() @ v.to_vector()) / prob.n_s, rel=1e-6)


def test_cg_steihaug_interior_boundary_and_negative_curvature():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((6, 6))
    H = A @ A.T + 6 * np.eye(6)
    g = rng.standard_normal(6)
    v, info = cg_steihaug(lambda x: H @ x, g, 1e3, tol=1e-14)
    np.testing.assert_allclose(v, np.linalg.solve(H, g), rtol=1e-10)
    assert not info["boundary"]
    v, info = cg_steihaug(lambda x: H @ x, g, 1e-3)
    assert info["exit"] == "radius" and np.linalg.norm(v) == pytest.approx(1e-3)
    v, info = cg_steihaug(lambda x: -x, g, 2.0)
    assert info["exit"] == "negative curvature" and np.linalg.norm(v) == pytest.approx(2.0)
    v, _ = cg_steihaug(lambda x: H @ x, np.zeros(6), 1.0)
    assert np.all(v == 0)


def test_tr_rmgn_recovers_plant():
    T = symmetric_plant(seed=9)
    prob = problem_from_dense(T, 40, 10)
    truth, _ = t3_svd_dense(T, Truncation.to_ranks((2, 2, 2), (1, 2, 2, 1)))
    init = perturb_point(truth, 1e-2, np.random.default_rng(11))
    G, trace = tr_rmgn(prob, init, FitOptions(max_iter=30))
    assert trace[-1]["loss"] < 1e-20 * trace[0]["loss"]
    losses = [t["loss"] for t in trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert np.linalg.norm(contract_full(G) - T) < 1e-8 * np.linalg.norm(T)


def test_mc_sgd_reduces_loss():
    T = symmetric_plant(seed=12)
    prob = problem_from_dense(T, 60, 13)
    init = random_t3(T.shape, (2, 2, 2), (1, 2, 2, 1), np.random.default_rng(14))
    f0 = loss(init, prob)
    G, trace = mc_sgd(prob, init, FitOptions(optimizer="mc-sgd", max_iter=300, seed=1))
    assert loss(G, prob) < 0.1 * f0
    assert all(t["step"] >= 0 for t in trace)


def test_mc_sgd_is_deterministic():
    T = symmetric_plant(seed=15)
    prob = problem_from_dense(T, 30, 16)
    init = random_t3(T.shape, (2, 2, 2), (1, 2, 2, 1), np.random.default_rng(17))
    opts = FitOptions(optimizer="mc-sgd", max_iter=50, seed=3)
    a, _ = mc_sgd(prob, init, opts)
    b, _ = mc_sgd(prob, init, opts)
    for x, y in zip(a.cores + a.bases, b.cores + b.bases):
        np.testing.assert_array_equal(x, y)


def test_propose_ranks():
    T = random_t3((6, 6, 6), (2, 2, 2), (1, 2, 2, 1), np.random.default_rng(18))
    kt, ktt = edge_condition_numbers(T)
    assert kt.shape == (3,) and ktt.shape == (4,)
    assert ktt[0] == ktt[-1] == 1.0
    # one badly conditioned edge stops that edge only
    n, r = propose_ranks(T, tau=10.0, kappas=(np.array([1.0, 1.0, 100.0]), np.array([1.0, 1.0, 1.0, 1.0])))
    assert n == (3, 3, 2) and r[1] >= 2
    # uniform conditioning falls back to growing everything
    n, r = propose_ranks(T, kappas=(np.ones(3), np.ones(4)))
    assert n == (3, 3, 3) and r == (1, 3, 3, 1)
    n, r = propose_ranks(T, n_chunk=2, kappas=(np.ones(3), np.ones(4)))
    assert n == (4, 4, 4) and r == (1, 4, 4, 1)


def test_initial_guess_scale():
    T = symmetric_plant()
    prob = problem_from_dense(T, 20, 19)
    G = initial_guess(prob, np.random.default_rng(0))
    assert G.tucker_ranks == (1, 1, 1)
    from t4s.t3 import t3_norm

    assert t3_norm(G) == pytest.approx(np.sqrt(np.mean(np.sum(prob.Y**2, axis=1))))


def test_continuation_stops_at_ratio_cap_and_keeps_best():
    T = symmetric_plant(N=4, M=3, seed=20)
    prob = problem_from_dense(T, 12, 21, n_val=10)
    opts = FitOptions(max_iter=15, max_dim_ratio=0.5, max_stages=20, seed=0)
    res = fit_with_continuation(prob, opts)
    dims = [s.manifold_dim for s in res.stages]
    assert all(d <= 0.5 * prob.data_dimension for d in dims[:-1])
    assert res.best_stage == int(np.argmin([s.val_error for s in res.stages]))
    assert dims == sorted(dims)
    for s in res.stages:
        assert s.manifold_dim == manifold_dimension(s.model.shape, s.n, s.r)
    rows = res.csv_rows()
    assert len(rows) == len(res.stages) and set(rows[0]) >= {"stage", "n", "r", "manifold_dim", "val_error"}


def test_continuation_stops_at_target():
    T = symmetric_plant(N=4, M=3, seed=22)
    prob = problem_from_dense(T, 30, 23, n_val=10)
    truth, _ = t3_svd_dense(T, Truncation.to_ranks((2, 2, 2), (1, 2, 2, 1)))
    init = perturb_point(truth, 1e-3, np.random.default_rng(0))
    res = fit_with_continuation(prob, FitOptions(max_iter=30, target_error=1e-8), init=init)
    assert len(res.stages) == 1 and res.stages[0].val_error < 1e-8


def test_from_samples_split():
    rng = np.random.default_rng(24)
    samples = [ProbeSample(rng.standard_normal(3), rng.standard_normal(2), [rng.standard_normal(3)], [rng.standard_normal(2)]) for _ in range(10)]
    prob = FitProblem.from_samples(samples, 1, val_fraction=0.3, seed=0)
    assert prob.n_s == 7 and prob.X_val.shape == (3, 3)
    held = {tuple(x) for x in prob.X_val}
    assert not held & {tuple(x) for x in prob.X}
    assert FitProblem.from_samples(samples, 1, val_fraction=0.0).X_val is None
    with pytest.raises(ValueError):
        FitProblem.from_samples(samples, 1, val_fraction=1.0)


def test_unknown_optimizer():
    T = symmetric_plant()
    prob = problem_from_dense(T, 5, 0)
    with pytest.raises(KeyError):
        fit_with_continuation(prob, FitOptions(optimizer="adam"))


def test_matrix_case_fits_low_rank():
    rng = np.random.default_rng(25)
    A = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    prob = problem_from_dense(A, 30, 26)
    init = TuckerTensorTrain([np.eye(6)[:, :2], np.eye(5)[:, :2]], [np.eye(2)[None], np.eye(2)[:, :, None]])
    init = perturb_point(init, 0.1, rng)
    G, trace = tr_rmgn(prob, init, FitOptions(max_iter=60))
    assert np.linalg.norm(contract_full(G) - A) < 1e-8 * np.linalg.norm(A)


def test_ratio_cap_zero_keeps_rank_one():
    T = symmetric_plant(seed=27)
    prob = problem_from_dense(T, 20, 28, n_val=5)
    res = fit_with_continuation(prob, FitOptions(max_iter=5, max_dim_ratio=0.0))
    assert len(res.stages) == 1 and res.best.tucker_ranks == (1, 1, 1)


def test_cauchy_step_minimizes_along_gradient():
    # with the full batch, t = |g|^2 / |J g|^2 zeroes the slope of 0.5 |b - t J g|^2
    T = symmetric_plant(seed=29)
    prob = problem_from_dense(T, 25, 30)
    p = prepare_point(random_t3(T.shape, (2, 2, 2), (1, 2, 2, 1), np.random.default_rng(31)))
    bs, cache = residuals(p, prob)
    g = project_gauge(p, apply_JT(p, cache, bs))
    Jg = apply_J(p, cache, g)
    gg = float(g.to_vector() @ g.to_vector())
    t = gg / sum(float(np.vdot(z, z)) for z in Jg)
    slope = -sum(float(np.vdot(b, z)) for b, z in zip(bs, Jg)) + t * sum(float(np.vdot(z, z)) for z in Jg)
    assert abs(slope) <= 1e-10 * gg
    _, trace = mc_sgd(prob, p.to_t3(), FitOptions(optimizer="mc-sgd", max_iter=1, batch_size=prob.n_s))
    assert trace[0]["step"] == pytest.approx(t, rel=1e-10)
