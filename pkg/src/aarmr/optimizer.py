"""Density-based optimization loop with selectable equilibrium solver."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, OptimizationError, ParameterError, SolverError
from .grid_fe import DofMap, FEModel, LoadCase, StructuredGrid
from .material_filter import (DensityField, SimpLaw, build_filter, compliance_sensitivity,
                              filter_chain_sensitivity, filter_densities, simp_derivative,
                              simp_modulus)
from .multigrid import (DIRECT_MAX_DOFS, MultigridConfig, build_hierarchy, build_prolongations,
                        direct_solve, mgcg)
from .reanalysis import Outcome, ReanalysisConfig, ReanalysisState, reanalysis_solve

log = logging.getLogger(__name__)

SOLVER_MODES = ("direct", "mgcg", "aarmr")
DIRECT_MAX_DOFS_3D = 40_000
OBJECTIVES = ("compliance", "displacement")


@dataclass
class OptProblem:
    """Design domain, supports, load, and objective.

    For ``objective="displacement"`` the quantity maximised is
    ``output_sign * u[output_dof]``; the minimised objective is its negative.
    """

    grid: StructuredGrid
    dofmap: DofMap
    loadcase: LoadCase
    volfrac: float
    objective: str = "compliance"
    output_dof: int | None = None
    output_sign: float = 1.0
    law: SimpLaw = field(default_factory=SimpLaw)
    filter_radius: float = 2.5
    nu: float = 0.3

    def __post_init__(self):
        if not 0 < self.volfrac < 1:
            raise ConfigurationError("volume fraction must lie in (0, 1)")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if (self.objective == "displacement") != (self.output_dof is not None):
            raise ConfigurationError("output_dof is required exactly for the displacement objective")
        self.model = FEModel(self.grid, self.dofmap, self.nu, self.law.e_min)
        self.kernel = build_filter(self.grid, self.filter_radius)
        self.f = self.model.build_load(self.loadcase)
        if self.objective == "displacement":
            idx = self.dofmap.free_index[self.output_dof]
            if idx < 0:
                raise ConfigurationError("output DOF is fixed")
            self.l = np.zeros(self.dofmap.n_free)
            self.l[idx] = self.output_sign


@dataclass
class OptConfig:
    max_iter: int = 200
    tol: float = 0.01
    move: float = 0.2
    oc_exponent: float = 0.5
    solver: str = "mgcg"
    reanalysis: ReanalysisConfig = field(default_factory=ReanalysisConfig)
    multigrid: MultigridConfig = field(default_factory=MultigridConfig)
    volume_schedule: Callable[[int], float] | None = None
    direct_max_dofs: int = DIRECT_MAX_DOFS

    def __post_init__(self):
        if not 0 < self.move <= 1:
            raise ParameterError("move limit must lie in (0, 1]")
        if self.max_iter < 0:
            raise ParameterError("max_iter must be >= 0")
        if self.solver not in SOLVER_MODES:
            raise ConfigurationError(f"solver must be one of {SOLVER_MODES}")


@dataclass
class IterationRecord:
    loop: int
    objective: float
    volume: float
    change_pct: float
    max_change: float
    path: str
    epsilon: float
    cg_iters: int
    mgcg_calls: int
    solve_seconds: float
    mgcg_residual: float = math.nan
    adjoint_path: str = ""


# -- design update -----------------------------------------------------------

LAMBDA_BRACKET = (1e-9, 1e9)


def oc_update(x, dc, dv, volfrac, kernel, move=0.2, exponent=0.5, signed=False,
              vol_rtol=1e-9) -> np.ndarray:
    """Optimality-criteria step with the volume of the filtered field matched by bisection.

    ``signed=False`` expects non-positive ``dc`` (positive entries are clamped to
    zero) and raises when the volume target cannot be bracketed.
    ``signed=True`` guards the update ratio from below by ``1e-10``; if the
    target is unreachable within the move limits the closest attainable
    volume is used for that step.
    """
    x = np.asarray(x, dtype=float)
    dc = np.asarray(dc, dtype=float)
    dv = np.asarray(dv, dtype=float)
    if not signed:
        n_pos = int(np.count_nonzero(dc > 0))
        if n_pos:
            log.warning("clamping %d positive sensitivities to zero", n_pos)
            dc = np.minimum(dc, 0.0)
    lower = np.maximum(0.0, x - move)
    upper = np.minimum(1.0, x + move)
    target = volfrac * x.size
    ratio = -dc / dv

    def step(lam):
        b = np.maximum(1e-10, ratio / lam) if signed else ratio / lam
        return np.clip(x * b**exponent, lower, upper)

    def volume(xn):
        return filter_densities(xn, kernel).sum()

    lo, hi = math.log(LAMBDA_BRACKET[0]), math.log(LAMBDA_BRACKET[1])
    v_lo, v_hi = volume(step(math.exp(lo))), volume(step(math.exp(hi)))
    if signed and v_lo < target * (1 - vol_rtol):
        # the guard pins adverse elements to their lower move limit whatever lambda is,
        # so the target can be out of reach for one step; take the closest volume
        log.info("volume target %g out of reach this step; using %g", volfrac, v_lo / x.size)
        return step(math.exp(lo))
    if signed and v_hi > target * (1 + vol_rtol):
        log.info("volume target %g out of reach this step; using %g", volfrac, v_hi / x.size)
        return step(math.exp(hi))
    if not (v_hi <= target * (1 + vol_rtol) and v_lo >= target * (1 - vol_rtol)):
        raise OptimizationError(
            f"volume target {volfrac:g} not bracketed: volume fraction ranges over "
            f"[{v_hi / x.size:.6g}, {v_lo / x.size:.6g}] for lambda in {LAMBDA_BRACKET}")
    best = step(math.exp(lo))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        xn = step(math.exp(mid))
        v = volume(xn)
        if abs(v - target) <= vol_rtol * target:
            return xn
        if v > target:
            lo = mid
        else:
            hi = mid
        best = xn
        if hi - lo < 1e-15:
            break
    return best


def change_metric(rho_new, rho_old) -> float:
    """Mean absolute density change in percent."""
    rho_new, rho_old = np.asarray(rho_new), np.asarray(rho_old)
    if rho_new.shape != rho_old.shape:
        raise ParameterError("density arrays differ in length")
    return float(np.mean(np.abs(rho_new - rho_old)) * 100.0)


# -- objectives --------------------------------------------------------------

def objective_and_sensitivity(problem: OptProblem, rho_phys, u, lam=None):
    """Objective and its derivative w.r.t. physical densities.

    ``u`` may be a displacement vector or a ``(basis, y)`` pair.  For the
    displacement objective ``lam`` solves ``K lam = l`` and the derivative is
    ``lam^T (dK/drho_i) u``.
    """
    if isinstance(u, tuple):
        u = u[0] @ u[1]
    if problem.objective == "compliance":
        return float(problem.f @ u), compliance_sensitivity(problem.model, rho_phys, u, problem.law)
    if lam is None:
        raise ParameterError("displacement objective needs the adjoint solution")
    if isinstance(lam, tuple):
        lam = lam[0] @ lam[1]
    c = -float(problem.l @ u)
    dc = simp_derivative(rho_phys, problem.law) * problem.model.element_energy(lam, u)
    return c, dc


# -- equilibrium solvers -----------------------------------------------------

class _Multigrid:
    """Prolongations built once; a hierarchy built lazily for each new K."""

    def __init__(self, problem: OptProblem, config: MultigridConfig):
        self.config = config
        self.prolongations = build_prolongations(problem.grid, problem.dofmap, config.levels)
        self._K = None
        self._h = None

    def hierarchy(self, K):
        if K is not self._K:
            self._h = build_hierarchy(K, self.prolongations, self.config)
            self._K = K
        return self._h

    def __call__(self, K, f, u0):
        return mgcg(self.hierarchy(K), f, u0)


class DirectSolver:
    def __init__(self, max_dofs=DIRECT_MAX_DOFS):
        self.max_dofs = max_dofs

    def solve(self, K, f, loop):
        return direct_solve(K, f, self.max_dofs), Outcome("direct")


class MGCGSolver:
    def __init__(self, backend: _Multigrid):
        self.backend = backend
        self.u_last = None

    def solve(self, K, f, loop):
        u, info = self.backend(K, f, self.u_last)
        self.u_last = u
        return u, Outcome("mgcg", cg_iterations=info.iterations, mgcg_residual=info.residual,
                          mgcg_converged=info.converged)


class AARMRSolver:
    def __init__(self, problem: OptProblem, backend: _Multigrid, config: ReanalysisConfig):
        self.backend = backend
        self.state = ReanalysisState(problem.model, config)

    def solve(self, K, f, loop):
        return reanalysis_solve(self.state, K, f, loop, self.backend)


def make_solver(problem: OptProblem, config: OptConfig, backend: _Multigrid | None = None):
    if config.solver == "direct":
        return DirectSolver(config.direct_max_dofs)
    backend = backend or _Multigrid(problem, config.multigrid)
    if config.solver == "mgcg":
        return MGCGSolver(backend)
    return AARMRSolver(problem, backend, config.reanalysis)


def exact_objective(problem: OptProblem, rho_phys, max_dofs=DIRECT_MAX_DOFS,
                    multigrid: MultigridConfig | None = None) -> float:
    """Objective of a physical density field from an accurate solve.

    Uses the direct solver when the system is small enough (3D fill-in makes
    sparse LU costly well below ``max_dofs``), otherwise MGCG with a tight
    tolerance.
    """
    K = problem.model.assemble(simp_modulus(rho_phys, problem.law))
    limit = max_dofs if problem.grid.dim == 2 else min(max_dofs, DIRECT_MAX_DOFS_3D)

    def solve(rhs):
        if problem.model.n_free <= limit:
            return direct_solve(K, rhs, limit)
        cfg = multigrid or MultigridConfig()
        h = build_hierarchy(K, build_prolongations(problem.grid, problem.dofmap, cfg.levels), cfg)
        u, info = mgcg(h, rhs, cgtol=1e-9, max_cg=5000)
        if not info.converged:
            raise SolverError(f"accurate MGCG evaluation stalled at relative residual {info.residual:.3g}")
        return u

    u = solve(problem.f)
    if problem.objective == "compliance":
        return float(problem.f @ u)
    return -float(problem.l @ u)


# -- main loop ---------------------------------------------------------------

def optimize(problem: OptProblem, config: OptConfig, callback=None):
    """Run the optimization; returns ``(DensityField, records)``.

    Each iteration: filter, interpolate moduli, assemble, solve (timed),
    objective and sensitivities, chain rule through the filter, OC update.
    Stops when the largest design change drops below ``config.tol`` or after
    ``config.max_iter`` iterations.
    """
    x = np.full(problem.grid.n_elem, problem.volfrac)
    records: list[IterationRecord] = []
    backend = None if config.solver == "direct" else _Multigrid(problem, config.multigrid)
    primary = make_solver(problem, config, backend)
    adjoint = make_solver(problem, config, backend) if problem.objective == "displacement" else None
    signed = problem.objective == "displacement"
    dv = filter_chain_sensitivity(np.ones(problem.grid.n_elem), problem.kernel)
    try:
        for loop in range(1, config.max_iter + 1):
            volfrac = config.volume_schedule(loop) if config.volume_schedule else problem.volfrac
            x_phys = filter_densities(x, problem.kernel)
            K = problem.model.assemble(simp_modulus(x_phys, problem.law))
            t0 = time.perf_counter()
            u, out = primary.solve(K, problem.f, loop)
            lam, adj = None, None
            if adjoint is not None:
                lam, adj = adjoint.solve(K, problem.l, loop)
            seconds = time.perf_counter() - t0
            c, dc_phys = objective_and_sensitivity(problem, x_phys, u, lam)
            dc = filter_chain_sensitivity(dc_phys, problem.kernel)
            x_new = oc_update(x, dc, dv, volfrac, problem.kernel, config.move,
                              config.oc_exponent, signed=signed)
            outs = [out] if adj is None else [out, adj]
            rec = IterationRecord(
                loop=loop, objective=c,
                volume=float(filter_densities(x_new, problem.kernel).mean()),
                change_pct=change_metric(x_new, x),
                max_change=float(np.max(np.abs(x_new - x))),
                path=out.path, epsilon=out.epsilon,
                cg_iters=sum(o.cg_iterations for o in outs),
                mgcg_calls=sum(o.mgcg_called for o in outs),
                solve_seconds=seconds, mgcg_residual=out.mgcg_residual,
                adjoint_path="" if adj is None else adj.path)
            records.append(rec)
            x = x_new
            if callback is not None:
                callback(rec)
            if rec.max_change < config.tol:
                break
    except (SolverError, OptimizationError, ParameterError) as exc:
        raise OptimizationError(f"optimization aborted at iteration {len(records) + 1}: {exc}",
                                records) from exc
    return DensityField(x, filter_densities(x, problem.kernel)), records
