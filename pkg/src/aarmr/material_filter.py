"""SIMP interpolation, cone density filter and sensitivity chain rule."""
from __future__ import annotations

from dataclasses import dataclass
import itertools

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError
from .grid_fe import StructuredGrid


@dataclass(frozen=True)
class SimpLaw:
    """Modified SIMP law ``E = E_min + (E0 - E_min) * rho**p``."""

    e0: float = 1.0
    e_min: float = 1e-9
    penal: float = 3.0

    def __post_init__(self):
        if not (self.e0 > self.e_min > 0):
            raise ParameterError("require E0 > E_min > 0")
        if self.penal < 1:
            raise ParameterError("penalty exponent must be >= 1")


def _check_unit_interval(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or np.any(rho > 1) or np.any(np.isnan(rho)):
        raise ParameterError("densities must lie in [0, 1]")
    return rho


def simp_modulus(rho_phys, law: SimpLaw = SimpLaw()) -> np.ndarray:
    rho = _check_unit_interval(rho_phys)
    return law.e_min + (law.e0 - law.e_min) * rho**law.penal


def simp_derivative(rho_phys, law: SimpLaw = SimpLaw()) -> np.ndarray:
    """dE/drho for each element."""
    rho = np.asarray(rho_phys, dtype=float)
    return law.penal * (law.e0 - law.e_min) * rho ** (law.penal - 1)


@dataclass
class DensityField:
    design: np.ndarray
    physical: np.ndarray


class FilterKernel:
    """Cone-weighted neighbourhood average over element centres.

    ``H[i, j] = max(0, r - |x_i - x_j|)`` is stored as a sparse matrix and
    ``row_sums[i] = sum_j H[i, j]``; the filter map is ``diag(1/row_sums) H``.
    """

    def __init__(self, H: sp.csr_matrix, radius: float):
        self.H = H
        self.radius = radius
        self.row_sums = np.asarray(H.sum(axis=1)).ravel()

    def neighbors(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.H.getrow(e)
        return row.indices, row.data

    def matrix(self) -> sp.csr_matrix:
        """The normalised filter map as an explicit sparse matrix."""
        return sp.diags(1.0 / self.row_sums) @ self.H


def build_filter(grid: StructuredGrid, radius: float = 2.5) -> FilterKernel:
    if not radius > 0:
        raise ParameterError("filter radius must be positive")
    counts = np.array(grid.elem_shape)  # ([z,] y, x)
    idx = np.indices(grid.elem_shape).reshape(grid.dim, -1).T
    strides = np.cumprod((1,) + tuple(counts[::-1][:-1]))[::-1]
    reach = int(np.ceil(radius)) - 1
    rows, cols, vals = [], [], []
    for off in itertools.product(range(-reach, reach + 1), repeat=grid.dim):
        w = radius - np.sqrt(np.sum(np.square(off)))
        if w <= 0:
            continue
        nb = idx + np.array(off)
        ok = np.all((nb >= 0) & (nb < counts), axis=1)
        src = np.flatnonzero(ok)
        rows.append(src)
        cols.append((nb[ok] * strides).sum(axis=1))
        vals.append(np.full(src.size, w))
    n = grid.n_elem
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    H.sort_indices()
    return FilterKernel(H, float(radius))


def filter_densities(rho, kernel: FilterKernel) -> np.ndarray:
    # convex combination; clip only removes round-off past the bounds
    return np.clip((kernel.H @ np.asarray(rho, dtype=float)) / kernel.row_sums, 0.0, 1.0)


def filter_chain_sensitivity(d_physical, kernel: FilterKernel) -> np.ndarray:
    """Pull a derivative w.r.t. physical densities back to design densities (transpose map)."""
    d = np.asarray(d_physical, dtype=float)
    if d.shape != kernel.row_sums.shape:
        raise ParameterError("sensitivity length does not match the element count")
    return kernel.H.T @ (d / kernel.row_sums)


def compliance_sensitivity(model, rho_phys, u, law: SimpLaw = SimpLaw()) -> np.ndarray:
    """``dC/drho_i = -dE_i/drho_i * u_e^T K_e^0 u_e``, element-local.

    ``u`` is either a free-DOF displacement vector or a pair ``(R, y)`` of a
    reduced basis and its coefficients, in which case ``u = R @ y``.
    """
    if isinstance(u, tuple):
        basis, y = u
        u = basis @ y
    return -simp_derivative(rho_phys, law) * model.element_energy(u)
