"""Benchmark problem catalog.

Coordinates: x to the right, y up, z out of the plane.  Supports and loads
are attached to nodes; all load magnitudes are unit.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .grid_fe import DofMap, LoadCase, StructuredGrid, distributed_line_load

DEFAULT_DIMS = {
    "cantilever2d": (300, 180),
    "halfwheel2d": (320, 160),
    "volschedule2d": (320, 160),
    "inverter2d": (320, 160),
    "ssbeam3d": (72, 24, 48),
    "cantilever3d-case1": (64, 32, 32),
    "cantilever3d-case2": (64, 32, 32),
    "cantilever3d-case3": (64, 32, 32),
    "cantilever3d-case4": (64, 32, 32),
}
PRESETS = tuple(DEFAULT_DIMS)


def _all_dofs(grid, nodes):
    nodes = np.atleast_1d(nodes)
    return (grid.dim * nodes[:, None] + np.arange(grid.dim)).ravel()


def cantilever2d(nelx, nely):
    """Left edge clamped, downward load at the middle of the right edge."""
    g = StructuredGrid(nelx, nely)
    dm = DofMap(g, _all_dofs(g, g.nodes_where(x=0)))
    load = LoadCase([(int(g.node_index(nelx, nely // 2)), 1, -1.0)])
    return g, dm, load, {}


def halfwheel2d(nelx, nely):
    """Pinned lower-left corner, vertical roller at lower-right, downward load at bottom middle."""
    g = StructuredGrid(nelx, nely)
    fixed = list(_all_dofs(g, g.node_index(0, 0))) + [2 * int(g.node_index(nelx, 0)) + 1]
    dm = DofMap(g, fixed)
    load = LoadCase([(int(g.node_index(nelx // 2, 0)), 1, -1.0)])
    return g, dm, load, {}


def inverter2d(nelx, nely, k_in=1.0, k_out=0.1):
    """Upper half of a displacement inverter; the bottom edge is the symmetry line.

    Input point A is the bottom-left node (pushed in +x, spring ``k_in``);
    output point B is the bottom-right node (spring ``k_out``), whose
    displacement in -x is maximised.  The two top-left nodes are clamped.
    """
    g = StructuredGrid(nelx, nely)
    sym = 2 * g.nodes_where(y=0) + 1
    clamp = _all_dofs(g, g.node_index(0, [nely, nely - 1]))
    a = int(g.node_index(0, 0))
    b = int(g.node_index(nelx, 0))
    dm = DofMap(g, np.concatenate([sym, clamp]), springs=[(2 * a, k_in), (2 * b, k_out)])
    load = LoadCase([(a, 0, 1.0)])
    return g, dm, load, dict(objective="displacement", output_dof=2 * b, output_sign=-1.0)


def ssbeam3d(nelx, nely, nelz):
    """Bottom face (y=0) held at its four corners, downward load at the bottom centre."""
    g = StructuredGrid(nelx, nely, nelz)
    corners = g.node_index([0, nelx, 0, nelx], 0, [0, 0, nelz, nelz])
    dm = DofMap(g, _all_dofs(g, corners))
    load = LoadCase([(int(g.node_index(nelx // 2, 0, nelz // 2)), 1, -1.0)])
    return g, dm, load, {}


def cantilever3d(nelx, nely, nelz, case):
    """Clamped x=0 face; the free end carries one of four load schemes.

    1: downward point load at the centre of the end face;
    2: oblique point load (equal -y and -z components) at the same node;
    3: two downward point loads at the mid-height of the end face's side edges;
    4: downward load distributed along the mid-height line of the end face.
    """
    g = StructuredGrid(nelx, nely, nelz)
    dm = DofMap(g, _all_dofs(g, g.nodes_where(x=0)))
    ym, zm = nely // 2, nelz // 2
    centre = int(g.node_index(nelx, ym, zm))
    if case == 1:
        entries = [(centre, 1, -1.0)]
    elif case == 2:
        entries = [(centre, 1, -np.sqrt(0.5)), (centre, 2, -np.sqrt(0.5))]
    elif case == 3:
        entries = [(int(g.node_index(nelx, ym, z)), 1, -0.5) for z in (0, nelz)]
    elif case == 4:
        line = g.node_index(nelx, ym, np.arange(nelz + 1))
        entries = distributed_line_load(g, line, 1, -1.0)
    else:
        raise ConfigurationError(f"unknown 3D cantilever load case {case}")
    return g, dm, LoadCase(entries), {}


def build_preset(name: str, dims=None):
    """Return ``(grid, dofmap, loadcase, extra_problem_kwargs)`` for a preset."""
    if name not in DEFAULT_DIMS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    dims = tuple(dims) if dims else DEFAULT_DIMS[name]
    if len(dims) != len(DEFAULT_DIMS[name]):
        raise ConfigurationError(f"preset {name} needs {len(DEFAULT_DIMS[name])} grid dimensions")
    if name == "cantilever2d":
        return cantilever2d(*dims)
    if name in ("halfwheel2d", "volschedule2d"):
        return halfwheel2d(*dims)
    if name == "inverter2d":
        return inverter2d(*dims)
    if name == "ssbeam3d":
        return ssbeam3d(*dims)
    return cantilever3d(*dims, case=int(name[-1]))


def volume_ramp(start_loop=50, v_start=0.48, v_end=0.45, step=0.005):
    """Volume fraction held at ``v_start`` up to ``start_loop``, then reduced by ``step`` per iteration."""
    def schedule(loop):
        if loop <= start_loop:
            return v_start
        return max(v_end, v_start - step * (loop - start_loop))
    return schedule
