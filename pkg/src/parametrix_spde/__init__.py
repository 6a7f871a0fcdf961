"""Parametrix fundamental solutions for divergence-form parabolic operators with
coefficients measurable in time, their Malliavin derivatives, and the
anticipating mild solution of the driven stochastic heat equation."""

from .errors import ConfigError, DomainError, NumericalError, UnsupportedOperation
from .coeff_fields import (CoefficientField, ConstantProfile, DiffusionCoefficient, Link,
                           PiecewiseProfile, TanhDiagonal, constant_field, piecewise_field,
                           random_breakpoints)
from .kernel_iteration import SweepConfig, build_Phi, dirac_sweep
from .fundamental_solution import (FundamentalSolution, aronson_fit, eval_Gamma, grad_Gamma)
from .reference_fdm import FdmConfig, gamma_oracle
from .malliavin import first_variation, malliavin_Gamma, psi, simulate_paths
from .mild_solution import (AlphaParams, NoiseField, SeparableModel, TimeChangeBank,
                            fractional_representation, skorohod_integral,
                            weak_solution_residual)

__version__ = "0.1.0"
