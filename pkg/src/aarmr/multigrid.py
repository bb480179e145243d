"""Geometric multigrid on nested structured grids, MGCG, and a direct solver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, ParameterError, SolverError
from .grid_fe import DofMap, StructuredGrid


@dataclass
class MultigridConfig:
    """Settings for the V-cycle preconditioned CG solver.

    ``levels`` counts every grid including the finest one.  The Jacobi
    damping actually used on a level is ``min(omega, omega_cap/lambda_max)``
    where ``lambda_max`` estimates the largest eigenvalue of ``D^-1 K`` on that
    level; this keeps the symmetric V-cycle positive definite.
    """

    levels: int = 3
    pre_smooth: int = 1
    post_smooth: int = 1
    omega: float = 0.6
    omega_cap: float = 1.8
    cgtol: float = 1e-6
    max_cg: int = 200

    def __post_init__(self):
        if self.levels < 2:
            raise ParameterError("multigrid needs at least 2 levels")
        if self.pre_smooth < 1 or self.post_smooth < 1:
            raise ParameterError("smoothing counts must be >= 1")
        if not 0 < self.omega < 1:
            raise ParameterError("Jacobi damping must lie in (0, 1)")
        if not self.cgtol > 0 or self.max_cg < 1:
            raise ParameterError("cgtol must be positive and max_cg >= 1")


@dataclass
class MGCGInfo:
    iterations: int
    residual: float
    converged: bool


def _prolong_1d(n_coarse: int) -> sp.csr_matrix:
    """Linear interpolation from ``n_coarse+1`` to ``2*n_coarse+1`` nodes."""
    rows, cols, vals = [], [], []
    for c in range(n_coarse + 1):
        rows.append(2 * c); cols.append(c); vals.append(1.0)
        if c < n_coarse:
            rows += [2 * c + 1, 2 * c + 1]; cols += [c, c + 1]; vals += [0.5, 0.5]
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * n_coarse + 1, n_coarse + 1))


def coarsen(grid: StructuredGrid, dofmap: DofMap) -> tuple[StructuredGrid, DofMap, sp.csr_matrix]:
    """Halve the grid and build the free-DOF prolongation coarse -> fine.

    A coarse DOF is fixed when the fine DOF at the coincident node is fixed.
    Springs are not transferred; the Galerkin product carries them.
    """
    for name, n in zip("xyz", grid.elem_counts):
        if n % 2:
            raise ConfigurationError(f"cannot coarsen: {name}-axis element count {n} is odd")
    coarse = StructuredGrid(*[n // 2 for n in grid.elem_counts])
    p_nodes = sp.csr_matrix(np.ones((1, 1)))
    for n in coarse.elem_counts:  # x fastest -> x is the innermost kron factor
        p_nodes = sp.kron(_prolong_1d(n), p_nodes, format="csr")
    P = sp.kron(p_nodes, sp.identity(grid.dim), format="csr")
    coords = coarse.node_coords() * 2
    fine_node = grid.node_index(*coords.T)
    fine_dof = (grid.dim * fine_node[:, None] + np.arange(grid.dim)).ravel()
    fixed = np.flatnonzero(dofmap.free_index[fine_dof] < 0)
    cmap = DofMap(coarse, fixed)
    P = P[dofmap.free][:, cmap.free].tocsr()
    return coarse, cmap, P


def build_prolongations(grid: StructuredGrid, dofmap: DofMap, levels: int) -> list[sp.csr_matrix]:
    """Prolongations ``P_l`` (level l+1 -> l) for ``levels`` total grids."""
    factor = 2 ** (levels - 1)
    for name, n in zip("xyz", grid.elem_counts):
        if n % factor:
            raise ConfigurationError(
                f"{name}-axis element count {n} is not divisible by {factor} "
                f"(required for {levels} multigrid levels)")
    prolongations = []
    g, dm = grid, dofmap
    for _ in range(levels - 1):
        g, dm, P = coarsen(g, dm)
        prolongations.append(P)
    return prolongations


def _estimate_lambda_max(A: sp.csr_matrix, dinv: np.ndarray, iters: int = 12) -> float:
    rng = np.random.default_rng(0)
    x = rng.standard_normal(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = dinv * (A @ x)
        lam = np.linalg.norm(y) / np.linalg.norm(x)
        x = y
    return lam


class MultigridHierarchy:
    """Galerkin operators, smoother data and coarse factorization for one K.

    ``operators[0]`` is the fine matrix; ``operators[l+1] = P_l^T operators[l] P_l``.
    """

    def __init__(self, K, prolongations: list[sp.csr_matrix], config: MultigridConfig):
        if len(prolongations) != config.levels - 1:
            raise ConfigurationError("number of prolongations does not match config.levels")
        A = K.matrix if hasattr(K, "matrix") else sp.csr_matrix(K)
        self.config = config
        self.prolongations = prolongations
        self.operators = [A]
        for P in prolongations:
            A = (P.T @ (A @ P)).tocsr()
            self.operators.append(A)
        self.dinv = []
        self.omegas = []
        for A in self.operators[:-1]:
            d = A.diagonal()
            if np.any(d <= 0):
                raise SolverError("operator has a non-positive diagonal entry")
            dinv = 1.0 / d
            lam = _estimate_lambda_max(A, dinv)
            self.dinv.append(dinv)
            self.omegas.append(min(config.omega, config.omega_cap / lam))
        try:
            self.coarse_lu = spla.splu(self.operators[-1].tocsc())
        except RuntimeError as exc:
            raise SolverError(f"coarsest-level factorization failed: {exc}") from exc

    @property
    def levels(self) -> int:
        return len(self.operators)

    def _cycle(self, level: int, r: np.ndarray) -> np.ndarray:
        # approximate solve of A_level e = r from a zero initial guess
        if level == self.levels - 1:
            return self.coarse_lu.solve(r)
        A, dinv, w = self.operators[level], self.dinv[level], self.omegas[level]
        u = w * dinv * r
        for _ in range(self.config.pre_smooth - 1):
            u += w * dinv * (r - A @ u)
        P = self.prolongations[level]
        u += P @ self._cycle(level + 1, P.T @ (r - A @ u))
        for _ in range(self.config.post_smooth):
            u += w * dinv * (r - A @ u)
        return u

    def precondition(self, r: np.ndarray) -> np.ndarray:
        """One V-cycle applied to ``r`` with zero initial guess (a fixed SPD map)."""
        return self._cycle(0, r)


def build_hierarchy(K, prolongations, config: MultigridConfig) -> MultigridHierarchy:
    return MultigridHierarchy(K, prolongations, config)


def vcycle(hierarchy: MultigridHierarchy, f: np.ndarray, u0: np.ndarray | None = None) -> np.ndarray:
    """One V-cycle for ``K u = f`` starting from ``u0``."""
    if u0 is None:
        return hierarchy.precondition(f)
    A = hierarchy.operators[0]
    return u0 + hierarchy.precondition(f - A @ u0)


def mgcg(hierarchy: MultigridHierarchy, f: np.ndarray, u0: np.ndarray | None = None,
         cgtol: float | None = None, max_cg: int | None = None) -> tuple[np.ndarray, MGCGInfo]:
    """Conjugate gradients preconditioned by one V-cycle per iteration.

    Stops when ``||f - K u|| / ||f|| <= cgtol`` or after ``max_cg`` iterations;
    in the latter case the last iterate is returned with ``converged=False``.
    """
    cfg = hierarchy.config
    tol = cfg.cgtol if cgtol is None else cgtol
    maxit = cfg.max_cg if max_cg is None else max_cg
    A = hierarchy.operators[0]
    f = np.asarray(f, dtype=float)
    fnorm = np.linalg.norm(f)
    if fnorm == 0.0:
        return np.zeros_like(f), MGCGInfo(0, 0.0, True)
    u = np.zeros_like(f) if u0 is None else np.array(u0, dtype=float)
    r = f - A @ u
    res = np.linalg.norm(r) / fnorm
    if res <= tol:
        return u, MGCGInfo(0, res, True)
    z = hierarchy.precondition(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        q = A @ p
        pq = p @ q
        if pq <= 0:
            raise SolverError("operator or preconditioner is not positive definite")
        alpha = rz / pq
        u += alpha * p
        r -= alpha * q
        res = np.linalg.norm(r) / fnorm
        if res <= tol:
            return u, MGCGInfo(it, res, True)
        z = hierarchy.precondition(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return u, MGCGInfo(maxit, res, False)


DIRECT_MAX_DOFS = 400_000


def direct_solve(K, f: np.ndarray, max_dofs: int = DIRECT_MAX_DOFS) -> np.ndarray:
    """Sparse LU solve; refuses systems larger than ``max_dofs`` free DOFs."""
    A = K.matrix if hasattr(K, "matrix") else K
    n = A.shape[0]
    if n > max_dofs:
        raise SolverError(f"{n} free DOFs exceeds the direct-solver cap of {max_dofs}; use MGCG instead")
    if sp.issparse(A):
        try:
            lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        return lu.solve(np.asarray(f, dtype=float))
    return np.linalg.solve(np.asarray(A, dtype=float), f)
