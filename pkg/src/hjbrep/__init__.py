"""Representations of convex Hamiltonians and state-constrained HJB solvers."""

from .errors import (ConfigError, DomainError, HJBRepError, InconsistentGrid,
                     NumericalFailure, UnsupportedRepresentation)
from .fenchel import Axis, ConjugateData, GridFunction, biconjugate_residual, conjugate_data, llt
from .geometry import (BallIntersection, Cone, Polytope, boundary_normals, hausdorff,
                       min_norm_point, normal_cone, proj_map, project_point, steiner, support)
from .hamiltonians import HamiltonianSpec, ProblemSpec, load_problem, parse_problem, shipped_config
from .hjb import (ValueGrid, check_opc, check_vanishing, check_weak_solution,
                  equivalence_experiment, numeric_subdifferential, solve_v, solve_W)
from .representation import Representation

__version__ = "0.1.0"
