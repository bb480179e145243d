"""Acceptance criteria 1-10.

Default sizes are desk-scale variants; set ``AARMR_FULL_SCALE=1`` to run the
cantilever (300x180) and 3D beam (72x24x48) criteria at full resolution and
to add the 640x320 half-wheel to the timing report.
"""
import math
import os

import numpy as np
import pytest

from aarmr.bench import format_spec, make_spec, relative_diff, run
from aarmr.grid_fe import FEModel
from aarmr.multigrid import MultigridConfig, build_hierarchy, build_prolongations, direct_solve, mgcg
from aarmr.optimizer import OptProblem, objective_and_sensitivity
from aarmr.material_filter import filter_chain_sensitivity, filter_densities, simp_modulus
from aarmr.presets import build_preset, cantilever2d, ssbeam3d
from aarmr.reanalysis import ProjectedInverse, carm_series, reduced_solve

pytestmark = pytest.mark.acceptance

FULL = os.environ.get("AARMR_FULL_SCALE") == "1"
CANTILEVER = (300, 180) if FULL else (160, 96)
BEAM3D = (72, 24, 48) if FULL else (48, 16, 32)
LEVELS_MESH = (160, 96)  # 4 levels need multiples of 8; 300x180 only allows 3

# pinned tolerances
SOLVE_RTOL = 1e-8
CARM_RTOL = 1e-10
GRAD_RTOL = 1e-4
DIFF_2D = 0.1          # percent
SPREAD_2D = 0.1        # percent
DIFF_HALFWHEEL = 0.35  # percent
CG_BAND = (4.0, 25.0)
DIFF_3D = 0.25         # percent
DIFF_INVERTER = {1e-4: 0.02, 1e-3: 0.06}  # eps_tol -> percent
RECOVERY_WINDOW = 10
RECOVERY_DEADLINE = 15

_cache = {}


def cached_run(spec):
    key = format_spec(spec)
    if key not in _cache:
        _cache[key] = run(spec)
    return _cache[key]


def diff_vs_mgcg(spec):
    ref = cached_run(spec.replace(solver="mgcg"))
    goal = cached_run(spec.replace(solver="aarmr"))
    return relative_diff(goal.objective, ref.objective), ref, goal


# -- 1 -----------------------------------------------------------------------

def test_criterion_01_oracle_equivalence(criterion):
    worst_solve, worst_carm = 0.0, 0.0
    rng = np.random.default_rng(0)
    for builder, dims, levels in [(cantilever2d, (8, 4), 3), (ssbeam3d, (4, 4, 4), 2)]:
        g, dm, load, _ = builder(*dims)
        m = FEModel(g, dm)
        K = m.assemble(rng.uniform(1e-3, 1, g.n_elem))
        f = m.build_load(load)
        Kd = K.toarray()
        u_ref = np.linalg.solve(Kd, f)
        h = build_hierarchy(K, build_prolongations(g, dm, levels), MultigridConfig(levels=levels))
        u_mg, _ = mgcg(h, f, cgtol=1e-10)
        for u in (u_mg, direct_solve(K, f)):
            worst_solve = max(worst_solve, np.linalg.norm(u - u_ref) / np.linalg.norm(u_ref))

        K1 = m.assemble(K.moduli * rng.uniform(0.7, 1.3, g.n_elem))
        dKd = K1.toarray() - Kd
        phi = rng.standard_normal((m.n_free, 2))
        inv = ProjectedInverse(phi, K.apply)
        kphi = phi.T @ Kd @ phi
        v = rng.standard_normal(m.n_free)
        ref_inv = phi @ np.linalg.solve(kphi, phi.T @ v)
        worst_carm = max(worst_carm, np.linalg.norm(inv.apply(v) - ref_inv) / np.linalg.norm(ref_inv))
        R = carm_series(u_ref, 3, inv, lambda x: m.apply_delta_K(x, K1.moduli, K.moduli))
        C = -phi @ np.linalg.solve(kphi, phi.T @ dKd)
        R_ref = np.column_stack([u_ref, C @ u_ref, C @ C @ u_ref])
        worst_carm = max(worst_carm, np.linalg.norm(R - R_ref) / np.linalg.norm(R_ref))
        Q, _ = np.linalg.qr(R_ref)
        y, _, _ = reduced_solve(K1.apply, Q, f)
        y_ref = np.linalg.solve(Q.T @ K1.toarray() @ Q, Q.T @ f)
        worst_carm = max(worst_carm, np.linalg.norm(y - y_ref) / np.linalg.norm(y_ref))
    ok = worst_solve <= SOLVE_RTOL and worst_carm <= CARM_RTOL
    criterion(1, ok, f"solver vs dense {worst_solve:.2e} (<= {SOLVE_RTOL:g}), "
                     f"CARM internals vs dense {worst_carm:.2e} (<= {CARM_RTOL:g})")
    assert ok


# -- 2 -----------------------------------------------------------------------

def _design_objective(p, x):
    phys = filter_densities(x, p.kernel)
    K = p.model.assemble(simp_modulus(phys, p.law))
    u = direct_solve(K, p.f)
    lam = direct_solve(K, p.l) if p.objective == "displacement" else None
    c, dc = objective_and_sensitivity(p, phys, u, lam)
    return c, filter_chain_sensitivity(dc, p.kernel)


def test_criterion_02_gradient_check(criterion):
    worst = {}
    for name in ("cantilever2d", "inverter2d"):
        g, dm, load, extra = build_preset(name, (8, 4))
        p = OptProblem(g, dm, load, 0.3, **extra)
        x = np.random.default_rng(1).uniform(0.2, 0.9, g.n_elem)
        _, dc = _design_objective(p, x)
        h = 1e-6
        err = 0.0
        for e in range(g.n_elem):
            xp, xm = x.copy(), x.copy()
            xp[e] += h
            xm[e] -= h
            fd = (_design_objective(p, xp)[0] - _design_objective(p, xm)[0]) / (2 * h)
            err = max(err, abs(dc[e] - fd) / abs(fd))
        worst[name] = err
    ok = max(worst.values()) <= GRAD_RTOL
    criterion(2, ok, "max per-element relative error " +
              ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f" (<= {GRAD_RTOL:g})")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_criterion_03_cantilever_accuracy(criterion):
    spec = make_spec("cantilever2d", dims=CANTILEVER)
    d, ref, goal = diff_vs_mgcg(spec)
    ok = abs(d) <= DIFF_2D
    criterion(3, ok, f"cantilever2d {CANTILEVER[0]}x{CANTILEVER[1]} eps_tol={spec.eps_tol:g}: "
                     f"diff {d:+.4f}% (|diff| <= {DIFF_2D}%), C_mgcg {ref.objective:.6g}, "
                     f"C_aarmr {goal.objective:.6g}, MGCG evals {goal.mgcg_evaluations}/{ref.mgcg_evaluations}")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_criterion_04_basis_size_insensitivity(criterion):
    base = make_spec("cantilever2d", dims=CANTILEVER, solver="aarmr")
    results, failures = {}, []
    for n_s in (1, 2, 4):
        for n_m in (1, 2, 4):
            try:
                rep = cached_run(base.replace(n_s=n_s, n_m=n_m))
            except Exception as exc:  # a failed cell fails the criterion, not the sweep
                failures.append(f"{n_s}-{n_m}: {exc}")
                continue
            if abs(rep.records[-1].volume - base.volfrac) > 1e-6:
                failures.append(f"{n_s}-{n_m}: infeasible volume {rep.records[-1].volume:.6f}")
            results[(n_s, n_m)] = rep.objective
    vals = np.array(list(results.values()))
    spread = (vals.max() - vals.min()) / vals.min() * 100 if len(vals) else math.inf
    ok = not failures and spread <= SPREAD_2D
    cells = ", ".join(f"{a}-{b}:{c:.6g}" for (a, b), c in sorted(results.items()))
    criterion(4, ok, f"9 cells, {len(failures)} failed, spread {spread:.4f}% (<= {SPREAD_2D}%) [{cells}]"
              + (f" failures: {failures}" if failures else ""))
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_05_residual_criterion_monotonicity(criterion):
    base = make_spec("halfwheel2d", dims=(320, 160))
    evals, diffs = [], []
    for eps in (0.005, 0.01, 0.05):
        d, _, goal = diff_vs_mgcg(base.replace(eps_tol=eps))
        evals.append(goal.mgcg_evaluations)
        diffs.append(d)
    decreasing = all(b < a for a, b in zip(evals, evals[1:]))
    within = all(abs(d) <= DIFF_HALFWHEEL for d in diffs)
    ok = decreasing and within
    criterion(5, ok, f"halfwheel2d 320x160 eps_tol 0.5%/1%/5%: MGCG evals {evals} "
                     f"(strictly decreasing: {decreasing}), diffs "
                     + "/".join(f"{d:+.4f}%" for d in diffs) + f" (|diff| <= {DIFF_HALFWHEEL}%)")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_criterion_06_grid_level_trend(criterion):
    base = make_spec("cantilever2d", dims=LEVELS_MESH)
    avg = {mode: [cached_run(base.replace(solver=mode, levels=L)).avg_cg for L in (2, 3, 4)]
           for mode in ("mgcg", "aarmr")}
    increasing = {m: all(b > a for a, b in zip(v, v[1:])) for m, v in avg.items()}
    in_band = {m: CG_BAND[0] <= v[1] <= CG_BAND[1] for m, v in avg.items()}
    ok = all(increasing.values()) and all(in_band.values())
    criterion(6, ok, f"cantilever2d {LEVELS_MESH[0]}x{LEVELS_MESH[1]} avg CG at levels 2/3/4: " +
              "; ".join(f"{m} " + "/".join(f"{a:.3f}" for a in v) for m, v in avg.items())
              + f" (increasing: {increasing}; level 3 in [{CG_BAND[0]:g}, {CG_BAND[1]:g}]: {in_band})")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_criterion_07_3d_accuracy(criterion):
    spec = make_spec("ssbeam3d", dims=BEAM3D)
    d, ref, goal = diff_vs_mgcg(spec)
    ok = abs(d) <= DIFF_3D
    criterion(7, ok, f"ssbeam3d {'x'.join(map(str, BEAM3D))} V={spec.volfrac} eps_tol={spec.eps_tol:g}: "
                     f"diff {d:+.4f}% (|diff| <= {DIFF_3D}%), MGCG evals {goal.mgcg_evaluations}/{ref.mgcg_evaluations}")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_criterion_08_inverter(criterion):
    base = make_spec("inverter2d", dims=(320, 160), max_iter=200)
    parts, ok = [], True
    for eps, bound in DIFF_INVERTER.items():
        d, ref, goal = diff_vs_mgcg(base.replace(eps_tol=eps))
        cg_ok = goal.avg_cg <= ref.avg_cg
        ok &= abs(d) <= bound and cg_ok
        parts.append(f"eps_tol {eps * 100:g}%: diff {d:+.4f}% (<= {bound}%), avg CG "
                     f"{goal.avg_cg:.3f} vs mgcg {ref.avg_cg:.3f}")
    criterion(8, ok, "inverter2d 320x160: " + "; ".join(parts))
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_criterion_09_soft_timing(criterion):
    lines = []
    cases = [("halfwheel2d M1", make_spec("halfwheel2d", dims=(320, 160))),
             (f"ssbeam3d {'x'.join(map(str, BEAM3D))}", make_spec("ssbeam3d", dims=BEAM3D))]
    if FULL:
        cases.insert(1, ("halfwheel2d M2", make_spec("halfwheel2d", dims=(640, 320))))
    speed = {}
    for label, spec in cases:
        ref = cached_run(spec.replace(solver="mgcg"))
        goal = cached_run(spec.replace(solver="aarmr"))
        speed[label] = ref.solve_seconds / goal.solve_seconds
        lines.append(f"{label} speedup {speed[label]:.3f} (T {ref.solve_seconds:.1f}s / {goal.solve_seconds:.1f}s)")
    s2d = max(v for k, v in speed.items() if k.startswith("halfwheel"))
    s3d = [v for k, v in speed.items() if k.startswith("ssbeam")][0]
    lines.append(f"3D > 2D: {s3d > s2d}")
    criterion(9, all(v > 1 for v in speed.values()) and s3d > s2d, "; ".join(lines), informational=True)


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_perturbation_recovery(criterion):
    spec = make_spec("volschedule2d", dims=(320, 160))
    rep = cached_run(spec.replace(solver="aarmr"))
    accepted = np.array([r.path == "carm-accepted" for r in rep.records], dtype=float)
    ramp_end = 56
    pre = accepted[40:50].mean()  # loops 41-50
    ends = range(ramp_end + RECOVERY_WINDOW, ramp_end + RECOVERY_DEADLINE + 1)  # windows ending 66..71
    post = [accepted[e - RECOVERY_WINDOW:e].mean() for e in ends if e <= len(accepted)]
    recovered = bool(post) and max(post) >= pre
    ok = rep.iterations == spec.max_iter and recovered
    criterion(10, ok, f"volschedule2d 320x160: {rep.iterations} iterations, accepted fraction loops 41-50 "
                      f"{pre:.2f}, best window ending 66-71 {max(post) if post else float('nan'):.2f}, "
                      f"change peak {max(r.change_pct for r in rep.records[45:70]):.3f}%")
    assert ok
