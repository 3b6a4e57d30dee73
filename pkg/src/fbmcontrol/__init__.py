"""Numerical toolkit for stochastic calculus and optimal control driven by
fractional Brownian motion with Hurst index in (1/2, 1)."""

from .errors import (AccuracyError, AdmissibilityError, ConfigurationError, ContractError,
                     DriverError, FactorizationError, FbmControlError, NumericalError,
                     ParameterError, SingularPointError)
from .kernel import (GridFunction, HurstParam, PhiKernel, TimeGrid, cell_integral, gram_matrix,
                     inner_product_phiT, norm_sq_running, phi_eval, running_phi_integral)
from .paths import FbmEnsemble, cholesky_factor, covariance, empirical_cov_report, sample_ensemble
from .wick import (EtaSpec, ScalarField, WickIntegrand, clark_ocone_check, heat_semigroup,
                   ito_residual, quasi_cond_exp, quasi_cond_integral_zero_check, wis_integral,
                   wis_moments_check)
from .fredholm import FredholmProblem, PhiTerm, TikhonovSolution, assemble, tikhonov_solve
from .bsde import (BsdeSolution, DriverSpec, LinearBsdeSpec, apriori_check, girsanov_shift,
                   integrating_factor, solve_iterative, solve_linear)
from .control import (AdjointPair, ControlProblemSpec, adjoint_assemble, example_pipeline,
                      exact_J, hamiltonian, minimal_variance_problem, mp_certificate,
                      performance_J, solve_optimal_control)

__version__ = "0.1.0"
