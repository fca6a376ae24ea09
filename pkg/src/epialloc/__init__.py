"""Epidemic treatment-bed allocation under an uncertain second-stage budget.

Simulation (stochastic SEIHFR metapopulation model), calibration to case
data, logistic curve fits with lasso-regressed plateaus, and a two-stage
stochastic integer program solved by an in-package branch and bound.
"""

__version__ = "0.1.0"
