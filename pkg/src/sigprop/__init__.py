"""Signal propagation in deep transformers at initialization.

The theory engine (``kernels``, ``covariance``, ``apjn``, ``asymptotics``)
integrates covariance and averaged-partial-Jacobian-norm recurrences; the
empirical engine (``simulator``, ``measurement``) measures the same
quantities on a toy transformer; ``harness`` and ``cli`` tie them together.
"""

__version__ = "0.1.0"

from .apjn import (ApjnCurve, JKState, backward_extended, backward_simplified, chi_factor, final_norm_factor,
                   forward_extended, forward_simplified)
from .asymptotics import (AsymptoticLaw, FixedPointReport, asymptotic_curve, asymptotic_law, g_of_c,
                          solve_c_star)
from .covariance import CovTrajectory, ModelHyper, run_trajectory, step_attention, step_mlp
from .errors import (ConfigError, DomainError, NoInteriorRootError, NonFiniteActivationError, NumericalError,
                     QuadratureError, SigpropError, UnsupportedRegimeError)
from .estimators import ApjnMeasurement, ApjnTheory, CovarianceExtractor
from .kernels import (CovPair, Nonlinearity, QuadratureRule, c_alpha, gauss_hermite, hat_kappa, hat_q, kappa,
                      propagate_phi, propagate_phi_prime)
from .measurement import ApjnEstimate, gmfe, gradient_amplification, hutchinson_apjn, measure_covariance
from .simulator import (TransformerConfig, Weights, forward, generate_permutation_symmetric, init_weights, vjp)

__all__ = [
    "ApjnCurve", "ApjnEstimate", "ApjnMeasurement", "ApjnTheory", "AsymptoticLaw", "ConfigError", "CovPair",
    "CovTrajectory", "CovarianceExtractor", "DomainError", "FixedPointReport", "JKState", "ModelHyper",
    "NoInteriorRootError", "NonFiniteActivationError", "Nonlinearity", "NumericalError", "QuadratureError",
    "QuadratureRule", "SigpropError", "TransformerConfig", "UnsupportedRegimeError", "Weights",
    "asymptotic_curve", "asymptotic_law", "backward_extended", "backward_simplified", "c_alpha", "chi_factor",
    "final_norm_factor", "forward", "forward_extended", "forward_simplified", "g_of_c", "gauss_hermite",
    "generate_permutation_symmetric", "gmfe", "gradient_amplification", "hat_kappa", "hat_q", "hutchinson_apjn",
    "init_weights", "kappa", "measure_covariance", "propagate_phi", "propagate_phi_prime", "run_trajectory",
    "solve_c_star", "step_attention", "step_mlp", "vjp",
]
