"""Adaptive reduced-model reanalysis.

The equilibrium ``K u = f`` of the current design is approximated in a small
basis grown from the previous displacement by the series
``r_i = C r_{i-1}``, ``C = -K0~^{-1} dK``, where ``dK = K - K0`` is the
stiffness change since the previous design and ``K0~^{-1} = Phi (Phi^T K0 Phi)^{-1} Phi^T``
is an approximate inverse built from a handful of normalised past solutions
``Phi``.  A Galerkin solve in that basis is accepted when its relative force
residual is below a threshold; otherwise the full MGCG solver is called and
its solution refreshes ``Phi``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateBasisError, ParameterError

SINGULAR_RTOL = 1e-14


@dataclass
class ReanalysisConfig:
    n_s: int = 2
    n_m: int = 2
    eps_tol: float = 0.01
    n_on: int = 20
    svd_rtol: float = 1e-12

    def __post_init__(self):
        if self.n_s < 1 or self.n_m < 1:
            raise ParameterError("basis sizes must be >= 1")
        if not self.eps_tol > 0:
            raise ParameterError("residual threshold must be positive")
        if self.n_on <= self.n_s:
            raise ParameterError("activation iteration must exceed the PARM size")


class Parm:
    """First-in-first-out block of unit-norm past displacements."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("capacity must be >= 1")
        self.capacity = capacity
        self._columns: list[np.ndarray] = []

    def __len__(self):
        return len(self._columns)

    @property
    def full(self) -> bool:
        return len(self._columns) == self.capacity

    @property
    def basis(self) -> np.ndarray:
        """(n, s) array, oldest column first."""
        if not self._columns:
            raise ParameterError("PARM is empty")
        return np.column_stack(self._columns)

    def insert(self, u: np.ndarray) -> "Parm":
        norm = np.linalg.norm(u)
        if not norm > 0 or not np.isfinite(norm):
            raise ParameterError("cannot insert a zero or non-finite displacement")
        self._columns.append(np.asarray(u, dtype=float) / norm)
        if len(self._columns) > self.capacity:
            self._columns.pop(0)
        return self


def parm_insert(parm: Parm, u_new: np.ndarray) -> Parm:
    return parm.insert(u_new)


class ProjectedInverse:
    """``v -> Phi (Phi^T K0 Phi)^{-1} Phi^T v`` with the small matrix factorized once."""

    def __init__(self, phi: np.ndarray, k0_apply: Callable[[np.ndarray], np.ndarray]):
        phi = np.asarray(phi, dtype=float)
        if phi.ndim == 1:
            phi = phi[:, None]
        self.phi = phi
        k0_phi = np.column_stack([k0_apply(phi[:, i]) for i in range(phi.shape[1])])
        kp = phi.T @ k0_phi
        self.k_phi = 0.5 * (kp + kp.T)
        self._factor = _factor_spd(self.k_phi, "projected reference stiffness")

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.phi @ sla.cho_solve(self._factor, self.phi.T @ v)


def _factor_spd(A: np.ndarray, what: str):
    lam = np.linalg.eigvalsh(A)
    if not np.all(np.isfinite(lam)) or lam[0] <= SINGULAR_RTOL * max(lam[-1], 0.0):
        raise DegenerateBasisError(f"{what} is singular to machine precision")
    return sla.cho_factor(A)


def projected_inverse_apply(parm, k0_apply, v) -> np.ndarray:
    phi = parm.basis if isinstance(parm, Parm) else parm
    return ProjectedInverse(phi, k0_apply).apply(v)


@dataclass
class Carm:
    raw: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def orthonormalize(R: np.ndarray, rtol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors of ``R`` whose singular value exceeds ``rtol * s_max``."""
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise DegenerateBasisError("reduced basis is identically zero")
    keep = s >= rtol * s[0]
    return U[:, keep], s


def carm_series(seed: np.ndarray, n_m: int, inverse: ProjectedInverse,
                delta_k_apply: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Columns ``[r1, C r1, ..., C^{n_m-1} r1]`` with ``C = -K0~^{-1} dK``."""
    cols = [np.asarray(seed, dtype=float)]
    for _ in range(n_m - 1):
        cols.append(-inverse.apply(delta_k_apply(cols[-1])))
    return np.column_stack(cols)


def reduced_solve(k_apply, basis: np.ndarray, f: np.ndarray):
    """Galerkin solve in ``span(basis)``; returns ``(y, u, eps)``.

    ``eps = ||K basis y - f|| / ||f||``.  ``basis`` must have orthonormal columns.
    """
    fnorm = np.linalg.norm(f)
    if not fnorm > 0:
        raise ParameterError("load vector must be nonzero")
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    kb = np.column_stack([k_apply(basis[:, i]) for i in range(basis.shape[1])])
    kr = basis.T @ kb
    kr = 0.5 * (kr + kr.T)
    y = sla.cho_solve(_factor_spd(kr, "reduced stiffness"), basis.T @ f)
    u = basis @ y
    eps = np.linalg.norm(kb @ y - f) / fnorm
    return y, u, float(eps)


@dataclass
class Outcome:
    """What happened in one equilibrium solve."""

    path: str
    epsilon: float = math.nan
    cg_iterations: int = 0
    mgcg_residual: float = math.nan
    mgcg_converged: bool = True
    rank: int = 0

    @property
    def mgcg_called(self) -> bool:
        return self.path in ("warmup", "carm-rejected", "mgcg")


@dataclass
class ReanalysisState:
    """Mutable reanalysis memory carried between optimization iterations.

    ``ref_operator`` is the stiffness of the previous iteration (``K0``);
    ``ref_moduli`` the element moduli it was assembled from.
    """

    model: object
    config: ReanalysisConfig
    parm: Parm = None
    u_last: np.ndarray | None = None
    ref_moduli: np.ndarray | None = None
    ref_operator: object = None
    counters: dict = field(default_factory=lambda: dict(
        mgcg_calls=0, cg_iterations=0, carm_solves=0, accepted=0, rejected=0, degenerate=0))

    def __post_init__(self):
        if self.parm is None:
            self.parm = Parm(self.config.n_s)


def build_carm(state: ReanalysisState, moduli_now: np.ndarray) -> Carm:
    """Reduced basis for the current moduli seeded with the last displacement."""
    if state.u_last is None or state.ref_operator is None:
        raise ParameterError("reanalysis state has no previous solution")
    inverse = ProjectedInverse(state.parm.basis, state.ref_operator.apply)
    ref = state.ref_moduli

    def delta_k(x):
        return state.model.apply_delta_K(x, moduli_now, ref)

    R = carm_series(state.u_last, state.config.n_m, inverse, delta_k)
    basis, s = orthonormalize(R, state.config.svd_rtol)
    return Carm(R, basis, s)


MGCGCallable = Callable[[object, np.ndarray, "np.ndarray | None"], tuple]


def reanalysis_solve(state: ReanalysisState, K_now, f: np.ndarray, loop: int,
                     mgcg: MGCGCallable) -> tuple[np.ndarray, Outcome]:
    """One equilibrium solve following the warm-up / CARM / fallback logic.

    ``loop`` is the 1-based optimization iteration.  ``mgcg(K, f, u0)`` must
    return ``(u, info)`` with ``info.iterations``, ``info.residual`` and
    ``info.converged``.  MGCG starts from ``u_last`` during warm-up and from
    the rejected reduced solution on fallback (``u_last`` if the basis was
    degenerate).
    """
    cfg = state.config
    c = state.counters

    def run_mgcg(path, eps=math.nan, rank=0, u0=None):
        u, info = mgcg(K_now, f, state.u_last if u0 is None else u0)
        c["mgcg_calls"] += 1
        c["cg_iterations"] += info.iterations
        return u, Outcome(path, eps, info.iterations, info.residual, info.converged, rank)

    if loop <= cfg.n_on:
        u, out = run_mgcg("warmup")
        if loop > cfg.n_on - cfg.n_s:
            state.parm.insert(u)
    else:
        u_red = None
        try:
            carm = build_carm(state, K_now.moduli)
            _, u_red, eps = reduced_solve(K_now.apply, carm.basis, f)
            c["carm_solves"] += 1
        except DegenerateBasisError:
            c["degenerate"] += 1
            carm, eps = None, math.nan
        if carm is not None and eps < cfg.eps_tol:
            c["accepted"] += 1
            u, out = u_red, Outcome("carm-accepted", eps, rank=carm.rank)
        else:
            c["rejected"] += 1
            # the rejected Galerkin solution is at least as close as u_last in energy norm
            u, out = run_mgcg("carm-rejected", eps, 0 if carm is None else carm.rank, u_red)
            state.parm.insert(u)
    state.u_last = u
    state.ref_moduli = K_now.moduli
    state.ref_operator = K_now
    return u, out
