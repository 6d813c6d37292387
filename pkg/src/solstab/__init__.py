"""Numerical laboratory for stability of 1D NLS ground states."""

from solstab.fields import Grid, Field, Spinor, make_grid, derivative, weighted_norm, pairing, sigma_apply
from solstab.nonlinearity import Nonlinearity, make_nonlinearity, check_H1_H2
from solstab.groundstate import GroundState, Branch, solve_ground_state, dphi_domega, build_branch, slope_condition

__all__ = [
    "Grid", "Field", "Spinor", "make_grid", "derivative", "weighted_norm",
    "pairing", "sigma_apply",
    "Nonlinearity", "make_nonlinearity", "check_H1_H2",
    "GroundState", "Branch", "solve_ground_state", "dphi_domega",
    "build_branch", "slope_condition",
]

__version__ = "0.1.0"
