"""Multiresponse GLMM estimation by EM with fully exponential Laplace E steps."""

from .em import FitConfig, FitResult, approx_loglik, fit, standard_errors
from .errors import (
    DomainError,
    GLMMError,
    NonConvergenceError,
    NotPositiveDefiniteError,
    TierRefusedError,
    ValidationError,
)
from .estep import Tier, e_step, find_mode
from .families import Family, FamilyKind, evaluate
from .model import (
    Model,
    ParameterSet,
    RandomEffectsLayout,
    ResponseBlock,
    RKind,
    RStructure,
    expand_G,
    invert_G_blockwise,
    linear_predictor,
    validate_model,
)
from .pl import PLConfig, pl_fit

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "Family",
    "FamilyKind",
    "FitConfig",
    "FitResult",
    "GLMMError",
    "Model",
    "NonConvergenceError",
    "NotPositiveDefiniteError",
    "PLConfig",
    "ParameterSet",
    "RKind",
    "RStructure",
    "RandomEffectsLayout",
    "ResponseBlock",
    "Tier",
    "TierRefusedError",
    "ValidationError",
    "approx_loglik",
    "e_step",
    "evaluate",
    "expand_G",
    "find_mode",
    "fit",
    "invert_G_blockwise",
    "linear_predictor",
    "pl_fit",
    "standard_errors",
    "validate_model",
]
