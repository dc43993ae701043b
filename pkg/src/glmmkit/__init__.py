"""glmmkit: generalised linear mixed models from design to fit.

Block-design data generation, a covariance formula DSL compiled to stack
programs, marginal design statistics (covariance approximation,
information, power), full-likelihood fitting by Monte Carlo maximum
likelihood and Laplace approximation, and combinatorial c-optimal design
search.
"""

__version__ = "0.1.0"

from .blocks import expand_blocks, format_block_formula, nelder, parse_block_formula
from .covariance import NotPositiveDefiniteError, RandomEffects
from .datatable import DataTable
from .families import Beta, Binomial, FamilyError, Gamma, Gaussian, Poisson, get_family
from .formula import FormulaError, build_design_matrix, compile_term, parse_formula
from .hmc import HmcOptions, hmc_sample
from .laplace import LaOptions, la_fit, la_loglik
from .mcml import (
    EssError,
    FitResult,
    McmlOptions,
    log_gradient,
    mcml_fit,
    simlik_refine,
    std_errors,
)
from .model import Glmm, SingularInformationError
from .optdesign import (
    DegenerateDesignError,
    DesignSpace,
    apportion,
    downdate_inverse,
    expand_inverse,
)

__all__ = [
    "__version__",
    "Beta", "Binomial", "DataTable", "DegenerateDesignError", "DesignSpace",
    "EssError", "FamilyError", "FitResult", "FormulaError", "Gamma",
    "Gaussian", "Glmm", "HmcOptions", "LaOptions", "McmlOptions",
    "NotPositiveDefiniteError", "Poisson", "RandomEffects",
    "SingularInformationError",
    "apportion", "build_design_matrix", "compile_term", "downdate_inverse",
    "expand_blocks", "expand_inverse", "format_block_formula", "get_family",
    "hmc_sample", "la_fit", "la_loglik", "log_gradient", "mcml_fit",
    "nelder", "parse_block_formula", "parse_formula", "simlik_refine",
    "std_errors",
]
