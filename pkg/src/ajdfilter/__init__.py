"""Estimation and filtering of affine jump-diffusion option models from
option-implied conditional characteristic functions."""

from .models import (AffineModel, ParameterVector, admissible, build_model,
                     default_params)
from .riccati import CCFCoefficients, model_ccf, riccati_solve
from .moments import ConditionalMomentCoeffs, stationary_init, transition_coeffs

__version__ = "0.1.0"
