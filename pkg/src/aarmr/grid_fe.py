"""Structured-grid linear elasticity: element matrices, assembly, loads.

Nodes and elements are numbered lexicographically with x varying fastest,
then y, then z.  Node ``(i, j, k)`` has index ``i + (nelx+1)*(j + (nely+1)*k)``
and degree of freedom ``dim*node + axis``.  Elements are unit squares/cubes.
Fixed DOFs are removed from every operator (row/column deletion), so all
vectors handed to or returned from :class:`FEModel` live on the free DOFs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ParameterError

E_MIN_DEFAULT = 1e-9


@dataclass(frozen=True)
class StructuredGrid:
    """Regular grid of unit elements; ``nelz is None`` means 2D."""

    nelx: int
    nely: int
    nelz: int | None = None

    def __post_init__(self):
        counts = (self.nelx, self.nely) + (() if self.nelz is None else (self.nelz,))
        if any(int(c) != c or c < 1 for c in counts):
            raise ParameterError(f"element counts must be positive integers, got {counts}")

    @property
    def dim(self) -> int:
        return 2 if self.nelz is None else 3

    @property
    def elem_counts(self) -> tuple[int, ...]:
        """Element counts ordered (x, y[, z])."""
        return (self.nelx, self.nely) if self.nelz is None else (self.nelx, self.nely, self.nelz)

    @property
    def elem_shape(self) -> tuple[int, ...]:
        """C-order array shape of per-element data, ordered ([z,] y, x)."""
        return self.elem_counts[::-1]

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.elem_shape)

    @property
    def n_elem(self) -> int:
        return int(np.prod(self.elem_counts))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def ndof(self) -> int:
        return self.dim * self.n_nodes

    def node_index(self, i, j, k=0):
        nx, ny = self.nelx + 1, self.nely + 1
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def node_coords(self) -> np.ndarray:
        """(n_nodes, dim) integer coordinates of every node."""
        axes = [np.arange(n + 1) for n in self.elem_counts]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")
        return np.stack([m.ravel() for m in mesh[::-1]], axis=1)

    def element_centers(self) -> np.ndarray:
        axes = [np.arange(n) + 0.5 for n in self.elem_counts]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")
        return np.stack([m.ravel() for m in mesh[::-1]], axis=1)

    def nodes_where(self, x=None, y=None, z=None) -> np.ndarray:
        """Indices of nodes whose integer coordinates match every given value."""
        coords = self.node_coords()
        keep = np.ones(len(coords), dtype=bool)
        for axis, value in enumerate((x, y, z)):
            if value is None:
                continue
            if axis >= self.dim:
                raise ParameterError("z coordinate given for a 2D grid")
            keep &= np.isin(coords[:, axis], np.atleast_1d(value))
        return np.flatnonzero(keep)

    def local_node_offsets(self) -> np.ndarray:
        """Offsets of an element's nodes from its lowest corner, counter-clockwise per z-layer."""
        quad = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
        if self.dim == 2:
            return quad
        return np.vstack([np.hstack([quad, np.zeros((4, 1), int)]),
                          np.hstack([quad, np.ones((4, 1), int)])])

    def element_nodes(self) -> np.ndarray:
        """(n_elem, 4|8) node connectivity."""
        corner = self.element_centers().astype(int)
        offsets = self.local_node_offsets()
        pts = corner[:, None, :] + offsets[None, :, :]
        if self.dim == 2:
            return self.node_index(pts[..., 0], pts[..., 1])
        return self.node_index(pts[..., 0], pts[..., 1], pts[..., 2])

    def element_dofs(self) -> np.ndarray:
        nodes = self.element_nodes()
        d = self.dim
        return (d * nodes[:, :, None] + np.arange(d)).reshape(len(nodes), -1)


@dataclass
class DofMap:
    """Fixed/free DOF partition plus grounded springs on free DOFs."""

    grid: StructuredGrid
    fixed: np.ndarray
    springs: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        ndof = self.grid.ndof
        fixed = np.unique(np.asarray(self.fixed, dtype=np.int64))
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= ndof):
            raise ConfigurationError("fixed DOF index out of range")
        self.fixed = fixed
        mask = np.ones(ndof, dtype=bool)
        mask[fixed] = False
        self.free = np.flatnonzero(mask)
        self.free_index = np.full(ndof, -1, dtype=np.int64)
        self.free_index[self.free] = np.arange(self.free.size)
        springs = []
        for dof, k in self.springs:
            dof = int(dof)
            if not 0 <= dof < ndof or self.free_index[dof] < 0:
                raise ConfigurationError(f"spring on DOF {dof} which is not a free DOF")
            if not k > 0:
                raise ConfigurationError(f"spring stiffness must be positive, got {k}")
            springs.append((dof, float(k)))
        self.springs = springs

    @property
    def n_free(self) -> int:
        return int(self.free.size)

    def to_full(self, x: np.ndarray) -> np.ndarray:
        full = np.zeros(self.grid.ndof)
        full[self.free] = x
        return full


@dataclass
class LoadCase:
    """Nodal point loads as ``(node, axis, magnitude)`` triples."""

    entries: list[tuple[int, int, float]]

    @property
    def total(self) -> np.ndarray:
        tot = np.zeros(3)
        for _, axis, mag in self.entries:
            tot[axis] += mag
        return tot


def _gauss_points(dim: int):
    g = 1.0 / np.sqrt(3.0)
    return list(itertools.product((-g, g), repeat=dim))


def _constitutive(dim: int, nu: float) -> np.ndarray:
    if dim == 2:
        return np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1 - nu)]]) / (1 - nu**2)
    c = 1.0 / ((1 + nu) * (1 - 2 * nu))
    D = np.zeros((6, 6))
    D[:3, :3] = nu
    np.fill_diagonal(D[:3, :3], 1 - nu)
    D[3:, 3:] = np.eye(3) * (0.5 - nu)
    return c * D


def element_stiffness(dim: int, nu: float = 0.3) -> np.ndarray:
    """Unit-modulus stiffness matrix of the unit Q4 (plane stress) or H8 element.

    Full Gauss integration (2 points per direction), node-major DOF order
    ``[u0x, u0y(, u0z), u1x, ...]`` with nodes as in
    :meth:`StructuredGrid.local_node_offsets`.
    """
    if dim not in (2, 3):
        raise ParameterError(f"dim must be 2 or 3, got {dim}")
    if not 0.0 <= nu < 0.5:
        raise ParameterError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    signs = 2 * StructuredGrid(1, 1, None if dim == 2 else 1).local_node_offsets() - 1
    D = _constitutive(dim, nu)
    nen = len(signs)
    ke = np.zeros((dim * nen, dim * nen))
    for xi in _gauss_points(dim):
        xi = np.asarray(xi)
        # dN/dxi for trilinear/bilinear shape functions prod(1 + s*xi)/2^d
        dn = np.empty((nen, dim))
        for a in range(dim):
            others = np.prod([1 + signs[:, b] * xi[b] for b in range(dim) if b != a], axis=0)
            dn[:, a] = signs[:, a] * others / 2**dim
        dn *= 2.0  # unit element: x = (xi + 1)/2
        detj = 0.5**dim
        if dim == 2:
            B = np.zeros((3, 2 * nen))
            B[0, 0::2] = dn[:, 0]
            B[1, 1::2] = dn[:, 1]
            B[2, 0::2] = dn[:, 1]
            B[2, 1::2] = dn[:, 0]
        else:
            B = np.zeros((6, 3 * nen))
            B[0, 0::3] = dn[:, 0]
            B[1, 1::3] = dn[:, 1]
            B[2, 2::3] = dn[:, 2]
            B[3, 0::3] = dn[:, 1]
            B[3, 1::3] = dn[:, 0]
            B[4, 1::3] = dn[:, 2]
            B[4, 2::3] = dn[:, 1]
            B[5, 0::3] = dn[:, 2]
            B[5, 2::3] = dn[:, 0]
        ke += B.T @ D @ B * detj
    return 0.5 * (ke + ke.T)


class StiffnessOperator:
    """Assembled stiffness over the free DOFs.

    ``matrix`` is a CSR matrix; ``moduli`` the per-element Young's moduli it
    was built from.  Calling :meth:`apply` (or ``op @ x``) is the sparse
    product; :meth:`apply_matrix_free` recomputes it element by element.
    """

    def __init__(self, model: "FEModel", moduli: np.ndarray, matrix: sp.csr_matrix):
        self.model = model
        self.moduli = moduli
        self.matrix = matrix

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x):
        return self.matrix @ x

    __matmul__ = apply

    def apply_matrix_free(self, x):
        return self.model.apply_K(x, self.moduli)

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()


class FEModel:
    """Finite-element model on a structured grid with a fixed DOF partition.

    All index bookkeeping (element DOFs, CSR pattern over the free DOFs) is
    computed once here, so repeated assembly for new moduli only touches
    the value array.

    Parameters
    ----------
    grid : StructuredGrid
    dofmap : DofMap
    nu : float
        Poisson ratio.
    e_min : float
        Smallest admissible element modulus.
    """

    def __init__(self, grid: StructuredGrid, dofmap: DofMap, nu: float = 0.3,
                 e_min: float = E_MIN_DEFAULT):
        if dofmap.grid != grid:
            raise ConfigurationError("DOF map belongs to a different grid")
        self.grid = grid
        self.dofmap = dofmap
        self.nu = nu
        self.e_min = e_min
        self.ke = element_stiffness(grid.dim, nu)
        self.edof = grid.element_dofs()
        self._build_pattern()

    def _build_pattern(self):
        g, d = self.grid, self.grid.dim
        node_shape = g.node_shape
        # neighbour offsets ordered so neighbour node index increases: (dz, dy, dx)
        offs = np.array(list(itertools.product((-1, 0, 1), repeat=d)))  # ([z,] y, x)
        self._slot = {tuple(o): s for s, o in enumerate(offs)}
        nslot = len(offs)
        strides = np.cumprod((1,) + node_shape[::-1][:-1])[::-1]  # ([z,] y, x) strides
        idx = np.indices(node_shape).reshape(d, -1).T  # ([z,] y, x)
        nb = idx[:, None, :] + offs[None, :, :]
        inb = np.all((nb >= 0) & (nb < np.array(node_shape)), axis=2)
        nb_node = (nb * strides).sum(axis=2)
        node = np.arange(g.n_nodes)
        row_dof = d * node[:, None] + np.arange(d)  # (node, a)
        col_dof = d * nb_node[:, :, None] + np.arange(d)  # (node, s, b)
        fi = self.dofmap.free_index
        row_free = fi[row_dof]  # (node, a)
        col_free = np.where(inb[:, :, None], fi[np.where(inb[:, :, None], col_dof, 0)], -1)
        mask = (row_free[:, :, None, None] >= 0) & (col_free[:, None, :, :] >= 0)
        self._stencil_shape = node_shape + (d, nslot, d)
        self._mask = mask.reshape(-1)
        cols = np.broadcast_to(col_free[:, None, :, :], mask.shape)[mask]
        counts = mask.reshape(g.n_nodes * d, -1).sum(axis=1)
        counts = counts[fi[np.arange(g.ndof)] >= 0]
        n = self.dofmap.n_free
        self._indices = cols.astype(np.int32 if n < 2**31 else np.int64)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(self._indices.dtype)
        rows = np.repeat(np.arange(n), counts)
        self._diag_pos = np.flatnonzero(self._indices == rows)
        self._spring_pos = np.array([self._diag_pos[fi[dof]] for dof, _ in self.dofmap.springs], dtype=np.int64)
        self._spring_k = np.array([k for _, k in self.dofmap.springs])
        self._spring_free = np.array([fi[dof] for dof, _ in self.dofmap.springs], dtype=np.int64)
        local = self.grid.local_node_offsets()[:, ::-1]  # ([z,] y, x) order
        self._pairs = []
        for a in range(len(local)):
            for b in range(len(local)):
                s = self._slot[tuple(local[b] - local[a])]
                self._pairs.append((tuple(local[a]), s, self.ke[d * a:d * a + d, d * b:d * b + d]))

    @property
    def n_free(self) -> int:
        return self.dofmap.n_free

    def check_moduli(self, moduli) -> np.ndarray:
        moduli = np.asarray(moduli, dtype=float)
        if moduli.shape != (self.grid.n_elem,):
            raise ParameterError(f"expected {self.grid.n_elem} moduli, got shape {moduli.shape}")
        if not np.all(moduli > 0) or np.any(moduli < self.e_min * (1 - 1e-12)):
            raise ParameterError(f"moduli must be >= E_min = {self.e_min:g}")
        return moduli

    def assemble(self, moduli) -> StiffnessOperator:
        """Global stiffness over the free DOFs for per-element moduli."""
        moduli = self.check_moduli(moduli)
        g = self.grid
        stencil = np.zeros(self._stencil_shape)
        E = moduli.reshape(g.elem_shape)
        for start, s, block in self._pairs:
            sl = tuple(slice(o, o + n) for o, n in zip(start, g.elem_shape))
            stencil[sl + (slice(None), s, slice(None))] += E[..., None, None] * block
        data = stencil.reshape(-1)[self._mask]
        if self._spring_pos.size:
            np.add.at(data, self._spring_pos, self._spring_k)
        n = self.n_free
        K = sp.csr_matrix((data, self._indices, self._indptr), shape=(n, n))
        return StiffnessOperator(self, moduli, K)

    def _elementwise(self, x, coef):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_free,):
            raise ParameterError(f"vector has shape {x.shape}, expected ({self.n_free},)")
        xe = self.dofmap.to_full(x)[self.edof]
        ye = (xe @ self.ke) * coef[:, None]
        out = np.bincount(self.edof.ravel(), weights=ye.ravel(), minlength=self.grid.ndof)
        return out[self.dofmap.free]

    def apply_K(self, x, moduli) -> np.ndarray:
        """Matrix-free ``K x`` (springs included)."""
        y = self._elementwise(x, self.check_moduli(moduli))
        if self._spring_free.size:
            y[self._spring_free] += self._spring_k * np.asarray(x)[self._spring_free]
        return y

    def apply_delta_K(self, x, moduli_new, moduli_old) -> np.ndarray:
        """``(K(new) - K(old)) x`` accumulated element by element; springs cancel."""
        new = np.asarray(moduli_new, dtype=float)
        old = np.asarray(moduli_old, dtype=float)
        if new.shape != old.shape or new.shape != (self.grid.n_elem,):
            raise ParameterError("moduli arrays must both have one entry per element")
        return self._elementwise(x, new - old)

    def element_energy(self, u, v=None) -> np.ndarray:
        """Per-element ``u_e^T K_e^0 v_e`` (``v = u`` when omitted)."""
        ue = self.dofmap.to_full(u)[self.edof]
        ve = ue if v is None else self.dofmap.to_full(v)[self.edof]
        return np.einsum("ij,ij->i", ue @ self.ke, ve)

    def build_load(self, loadcase: LoadCase) -> np.ndarray:
        """Free-DOF load vector; duplicate entries on a DOF are summed."""
        g = self.grid
        if not loadcase.entries:
            raise ConfigurationError("load case has no entries")
        f = np.zeros(g.ndof)
        for node, axis, mag in loadcase.entries:
            if not 0 <= node < g.n_nodes or not 0 <= axis < g.dim:
                raise ConfigurationError(f"load on nonexistent node/axis ({node}, {axis})")
            dof = g.dim * int(node) + int(axis)
            if self.dofmap.free_index[dof] < 0:
                raise ConfigurationError(f"load applied to fixed DOF {dof}")
            f[dof] += mag
        f = f[self.dofmap.free]
        if not np.any(f):
            raise ConfigurationError("assembled load vector is zero")
        return f


def distributed_line_load(grid: StructuredGrid, nodes: Sequence[int], axis: int,
                          total: float) -> list[tuple[int, int, float]]:
    """Split ``total`` over a straight line of nodes with trapezoidal weights.

    End nodes carry half the share of interior nodes, which is the consistent
    lumping of a uniform line load on linear elements.
    """
    nodes = list(nodes)
    if len(nodes) == 1:
        return [(int(nodes[0]), axis, float(total))]
    w = np.ones(len(nodes))
    w[[0, -1]] = 0.5
    w *= total / w.sum()
    return [(int(n), axis, float(v)) for n, v in zip(nodes, w)]
