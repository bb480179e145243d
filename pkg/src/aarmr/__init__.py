"""Density-based topology optimization on structured grids with MGCG and
adaptive reduced-model reanalysis equilibrium solvers."""
from .bench import ProblemSpec, RunReport, compare, load_spec, make_spec, run, sweep
from .errors import (AarmrError, ConfigurationError, DegenerateBasisError, OptimizationError,
                     ParameterError, SolverError)
from .grid_fe import DofMap, FEModel, LoadCase, StructuredGrid, element_stiffness
from .material_filter import SimpLaw, build_filter, filter_densities
from .multigrid import MultigridConfig, build_hierarchy, build_prolongations, direct_solve, mgcg
from .optimizer import OptConfig, OptProblem, exact_objective, oc_update, optimize
from .presets import PRESETS, build_preset
from .reanalysis import Parm, ReanalysisConfig, ReanalysisState, reanalysis_solve

__version__ = "0.1.0"
