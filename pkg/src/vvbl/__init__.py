"""Verification suite for viscous boundary layers under oblique injection/suction.

Modules
-------
geometry       boundary-normal charts, metric data, partition of unity, collar cutoff
calculus       curvilinear differential operators (closed-form and grid backends)
layer_algebra  exact algebra for decaying boundary-layer term families
correctors     leading- and first-order corrector construction and residual splits
solvers        exact flow scenarios, MMS forcing, Navier-Stokes and Stokes solvers
harness        viscosity sweeps, remainder norms, rate fits, reports and CLI
"""

__version__ = "0.1.0"
