"""Mean-field-game solvers and interacting-particle simulation kit.

Forward kinetic solvers, backward mild HJB solvers, their fixed-point
coupling, N-agent approximations with convergence-rate studies, and
sensitivity analysis of both layers.
"""

__version__ = "0.1.0"
