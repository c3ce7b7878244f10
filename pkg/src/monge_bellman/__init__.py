"""Degenerate real and complex Monge-Ampere Dirichlet problems via their Bellman form."""

from .controls import ControlMatrix, FrameControl, InnerMaxResult, inner_max, optimal_control
from .domain import DefiningFunction, DomainKind, boundary_project, normalize, strict_concavity_margin
from .grid import Grid, GridFunction
from .problems import ProblemSpec, get
from .solver import Policy, SolutionBundle, howard_solve

__version__ = "0.1.0"
