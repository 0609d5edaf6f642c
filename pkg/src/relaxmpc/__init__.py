"""Priority-driven soft-constrained safe MPC with learned constraint relaxation."""

__version__ = "0.1.0"
