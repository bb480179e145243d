import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aarmr.errors import DegenerateBasisError, ParameterError
from aarmr.grid_fe import FEModel
from aarmr.multigrid import MGCGInfo
from aarmr.presets import cantilever2d
from aarmr.reanalysis import (Parm, ProjectedInverse, ReanalysisConfig, ReanalysisState, build_carm,
                              carm_series, orthonormalize, projected_inverse_apply, reduced_solve,
                              reanalysis_solve)


@pytest.fixture
def setup():
    g, dm, load, _ = cantilever2d(8, 4)
    m = FEModel(g, dm)
    rng = np.random.default_rng(0)
    E0 = rng.uniform(0.01, 1, g.n_elem)
    E1 = E0 * rng.uniform(0.7, 1.3, g.n_elem)
    return m, m.assemble(E0), m.assemble(E1), m.build_load(load), rng


def dense_mgcg(K, f, u0):
    u = np.linalg.solve(K.toarray(), f)
    return u, MGCGInfo(3, 0.0, True)


def test_parm_fifo_and_normalization():
    p = Parm(2)
    a, b, c = np.array([3.0, 4.0]), np.array([0.0, 2.0]), np.array([1.0, 0.0])
    p.insert(a)
    assert not p.full and np.allclose(p.basis[:, 0], [0.6, 0.8])
    p.insert(b).insert(c)
    assert p.full and len(p) == 2
    assert np.allclose(p.basis, [[0, 1], [1, 0]])
    with pytest.raises(ParameterError):
        p.insert(np.zeros(2))
    with pytest.raises(ParameterError):
        Parm(0)
    with pytest.raises(ParameterError):
        Parm(1).basis


def test_projected_inverse_matches_dense(setup):
    m, K0, K1, f, rng = setup
    phi = rng.standard_normal((m.n_free, 3))
    inv = ProjectedInverse(phi, K0.apply)
    Kd = K0.toarray()
    kphi = phi.T @ Kd @ phi
    assert np.allclose(inv.k_phi, kphi, rtol=1e-12)
    v = rng.standard_normal(m.n_free)
    ref = phi @ np.linalg.solve(kphi, phi.T @ v)
    assert np.linalg.norm(inv.apply(v) - ref) <= 1e-10 * np.linalg.norm(ref)
    assert np.allclose(projected_inverse_apply(phi, K0.apply, v), ref, rtol=1e-10)


def test_projected_inverse_is_exact_on_span(setup):
    m, K0, _, _, rng = setup
    phi = rng.standard_normal((m.n_free, 2))
    inv = ProjectedInverse(phi, K0.apply)
    c = rng.standard_normal(2)
    x = phi @ c
    assert np.allclose(inv.apply(K0 @ x), x, rtol=1e-10)


def test_projected_inverse_rejects_dependent_columns(setup):
    m, K0, _, _, rng = setup
    v = rng.standard_normal(m.n_free)
    with pytest.raises(DegenerateBasisError):
        ProjectedInverse(np.column_stack([v, 2 * v]), K0.apply)


def test_carm_recurrence_matches_dense(setup):
    m, K0, K1, f, rng = setup
    phi = rng.standard_normal((m.n_free, 2))
    inv = ProjectedInverse(phi, K0.apply)
    seed = rng.standard_normal(m.n_free)
    R = carm_series(seed, 4, inv, lambda x: m.apply_delta_K(x, K1.moduli, K0.moduli))
    dK = K1.toarray() - K0.toarray()
    C = -phi @ np.linalg.solve(phi.T @ K0.toarray() @ phi, phi.T @ dK)
    cols = [seed]
    for _ in range(3):
        cols.append(C @ cols[-1])
    ref = np.column_stack(cols)
    assert np.linalg.norm(R - ref) <= 1e-10 * np.linalg.norm(ref)


def test_orthonormalize_drops_dependent_columns():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((20, 2))
    R = np.column_stack([a, a @ [1.0, -2.0]])
    Q, s = orthonormalize(R)
    assert Q.shape == (20, 2)
    assert np.allclose(Q.T @ Q, np.eye(2))
    assert np.allclose(Q @ (Q.T @ R), R)
    with pytest.raises(DegenerateBasisError):
        orthonormalize(np.zeros((5, 2)))


def test_reduced_solve_matches_dense(setup):
    m, K0, K1, f, rng = setup
    Q, _ = np.linalg.qr(rng.standard_normal((m.n_free, 3)))
    y, u, eps = reduced_solve(K1.apply, Q, f)
    Kd = K1.toarray()
    y_ref = np.linalg.solve(Q.T @ Kd @ Q, Q.T @ f)
    assert np.allclose(y, y_ref, rtol=1e-10)
    assert np.allclose(u, Q @ y_ref, rtol=1e-10)
    assert eps == pytest.approx(np.linalg.norm(Kd @ Q @ y_ref - f) / np.linalg.norm(f), rel=1e-10)
    # Galerkin orthogonality
    assert np.abs(Q.T @ (Kd @ u - f)).max() <= 1e-10 * np.linalg.norm(f)


def test_reduced_solve_exact_when_solution_in_span(setup):
    m, _, K1, f, rng = setup
    u_true = np.linalg.solve(K1.toarray(), f)
    Q = np.column_stack([u_true / np.linalg.norm(u_true)])
    _, u, eps = reduced_solve(K1.apply, Q, f)
    assert eps < 1e-10
    assert np.allclose(u, u_true)
    with pytest.raises(ParameterError):
        reduced_solve(K1.apply, Q, np.zeros_like(f))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_carm_span_within_seed_and_parm(seed, n_s, n_m):
    g, dm, load, _ = cantilever2d(8, 4)
    m = FEModel(g, dm)
    rng = np.random.default_rng(seed)
    E0 = rng.uniform(0.01, 1, g.n_elem)
    K0 = m.assemble(E0)
    K1 = m.assemble(E0 * rng.uniform(0.5, 1.5, g.n_elem))
    state = ReanalysisState(m, ReanalysisConfig(n_s=n_s, n_m=n_m, n_on=n_s + 1))
    for _ in range(n_s):
        state.parm.insert(rng.standard_normal(m.n_free))
    state.u_last = rng.standard_normal(m.n_free)
    state.ref_moduli, state.ref_operator = K0.moduli, K0
    carm = build_carm(state, K1.moduli)
    assert carm.rank <= min(n_m, n_s + 1)
    assert np.allclose(carm.basis.T @ carm.basis, np.eye(carm.rank), atol=1e-10)
    span = np.column_stack([state.u_last, state.parm.basis])
    Qs, _ = np.linalg.qr(span)
    resid = carm.basis - Qs @ (Qs.T @ carm.basis)
    assert np.abs(resid).max() < 1e-8


def test_config_validation():
    with pytest.raises(ParameterError):
        ReanalysisConfig(n_s=0)
    with pytest.raises(ParameterError):
        ReanalysisConfig(eps_tol=0)
    with pytest.raises(ParameterError):
        ReanalysisConfig(n_s=4, n_on=4)


def test_trace_with_zero_tolerance_always_falls_back(setup):
    m, K0, K1, f, rng = setup
    cfg = ReanalysisConfig(n_s=2, n_m=2, eps_tol=1e-300, n_on=3)
    state = ReanalysisState(m, cfg)
    ops = [m.assemble(K0.moduli * rng.uniform(0.5, 1.5, K0.moduli.size)) for _ in range(6)]
    paths, parm_heads = [], []
    for loop, K in enumerate(ops, start=1):
        u, out = reanalysis_solve(state, K, f, loop, dense_mgcg)
        paths.append(out.path)
        assert np.array_equal(state.u_last, u)
        assert state.ref_operator is K
        if len(state.parm):
            parm_heads.append(state.parm.basis[:, -1].copy())
        if loop > cfg.n_on:
            assert np.allclose(parm_heads[-1], u / np.linalg.norm(u))
    assert paths == ["warmup"] * 3 + ["carm-rejected"] * 3
    # warmup captures loops 2 and 3 only
    assert len(parm_heads) == 5
    assert state.counters["mgcg_calls"] == 6 and state.counters["rejected"] == 3
    assert state.counters["cg_iterations"] == 18
    assert state.counters["carm_solves"] == 3 and state.counters["degenerate"] == 0


def test_unchanged_moduli_reproduce_previous_solution(setup):
    m, K0, _, f, rng = setup
    cfg = ReanalysisConfig(n_s=2, n_m=2, eps_tol=1e-6, n_on=3)
    state = ReanalysisState(m, cfg)
    ops = [m.assemble(K0.moduli * rng.uniform(0.5, 1.5, K0.moduli.size)) for _ in range(2)] + [K0]
    for loop, K in enumerate(ops, start=1):
        reanalysis_solve(state, K, f, loop, dense_mgcg)
    u, out = reanalysis_solve(state, K0, f, 4, dense_mgcg)
    assert out.path == "carm-accepted"
    assert out.epsilon < 1e-10
    assert not out.mgcg_called
    assert math.isnan(out.mgcg_residual)


def test_small_change_is_accepted_and_accurate(setup):
    m, K0, _, f, rng = setup
    cfg = ReanalysisConfig(n_s=2, n_m=3, eps_tol=0.05, n_on=3)
    state = ReanalysisState(m, cfg)
    E = K0.moduli.copy()
    for loop in range(1, 5):
        E = E * rng.uniform(0.98, 1.02, E.size)
        K = m.assemble(E)
        u, out = reanalysis_solve(state, K, f, loop, dense_mgcg)
    u_ref = np.linalg.solve(K.toarray(), f)
    if out.path == "carm-accepted":
        assert np.linalg.norm(K @ u - f) / np.linalg.norm(f) == pytest.approx(out.epsilon)
        assert out.epsilon < cfg.eps_tol
    assert abs(f @ u - f @ u_ref) / (f @ u_ref) < 0.05


def test_degenerate_basis_routes_to_mgcg(setup):
    m, K0, K1, f, rng = setup
    state = ReanalysisState(m, ReanalysisConfig(n_s=2, n_m=2, n_on=3))
    v = rng.standard_normal(m.n_free)
    state.parm.insert(v).insert(v)
    state.u_last, state.ref_moduli, state.ref_operator = v, K0.moduli, K0
    u, out = reanalysis_solve(state, K1, f, 10, dense_mgcg)
    assert out.path == "carm-rejected" and math.isnan(out.epsilon)
    assert state.counters["degenerate"] == 1
    assert np.allclose(u, np.linalg.solve(K1.toarray(), f))


def test_fallback_starts_from_rejected_reduced_solution(setup):
    m, K0, K1, f, rng = setup
    state = ReanalysisState(m, ReanalysisConfig(n_s=2, n_m=2, eps_tol=1e-300, n_on=3))
    starts = []

    def spy(K, f, u0):
        starts.append(u0)
        return dense_mgcg(K, f, u0)

    E = K0.moduli
    for loop in range(1, 4):
        E = E * rng.uniform(0.8, 1.2, E.size)
        reanalysis_solve(state, m.assemble(E), f, loop, spy)
    assert starts[0] is None and starts[1] is not None  # warm-up chains from u_last
    u_last = state.u_last.copy()
    _, u_red, _ = reduced_solve(K1.apply, build_carm(state, K1.moduli).basis, f)
    _, out = reanalysis_solve(state, K1, f, 4, spy)
    assert out.path == "carm-rejected"
    assert np.allclose(starts[-1], u_red, rtol=1e-12, atol=0)
    # Galerkin optimality over a span containing u_last
    Kd = K1.toarray()
    u_star = np.linalg.solve(Kd, f)
    energy = lambda e: e @ Kd @ e
    assert energy(u_red - u_star) <= energy(u_last - u_star) * (1 + 1e-10)
