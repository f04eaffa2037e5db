"""Operational work statistics of a driven, dissipative qubit."""

from .model import (BathSpec, DriveProtocol, EnsembleSpec, PurePrep, eigenstate_ensemble,
                    haar_ensemble, named_ensemble, plus_minus_ensemble, polar_pair)
from .moments import solve_mgf, solve_moment_hierarchy
from .protocols import ErasureSpec, builtin_protocol, optimize_erasure_protocol

__all__ = ["BathSpec", "DriveProtocol", "EnsembleSpec", "PurePrep", "eigenstate_ensemble",
           "haar_ensemble", "named_ensemble", "plus_minus_ensemble", "polar_pair",
           "solve_mgf", "solve_moment_hierarchy", "ErasureSpec", "builtin_protocol",
           "optimize_erasure_protocol"]
