"""Space-time finite element solvers for tracking-type optimal control of
the wave equation with L2 and energy regularization."""

__version__ = "0.1.0"
