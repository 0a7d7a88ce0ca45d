"""Numerical laboratory for nondivergence-form Grushin operators.

Modules
-------
geometry
    Gauges, quasi-distance, boxes, sublevel sets, volumes, CC lattice.
fields
    Coefficient fields, the operator ``L`` and its finite-difference solver.
barriers
    Closed-form barriers built from powers of the gauge ``rho``.
abp
    Convex envelopes, Monge-Ampere mass and ABP-type checks.
lab
    Critical density, double ball, power decay and Harnack experiments.
cli
    The ``grushin-lab`` command.
"""

__version__ = "0.1.0"
