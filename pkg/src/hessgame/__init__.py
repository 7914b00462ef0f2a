"""Numerics for eigenvalue-sum Hessian equations viewed as stochastic differential games."""

from .domain import BarrierDomain, Region, RegionParams
from .errors import HessGameError
from .linalg import Projection, SkewMatrix, SymMatrix
from .operators import ControlPair, FiniteControlSet, OperatorSpec, operator_eval

__version__ = "0.1.0"

__all__ = [
    "BarrierDomain",
    "ControlPair",
    "FiniteControlSet",
    "HessGameError",
    "OperatorSpec",
    "Projection",
    "Region",
    "RegionParams",
    "SkewMatrix",
    "SymMatrix",
    "operator_eval",
]
