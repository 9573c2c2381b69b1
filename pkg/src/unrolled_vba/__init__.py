"""Blind image deconvolution by variational Bayes and its unrolled network."""

from .errors import NumericalFailure, SingularPosteriorError, SingularPriorError, TrainingDiverged
from .operators import KernelModel, PriorSpec, build_sar_prior, build_symmetric_constraint
from .vba import VbaConfig, VbaState, make_config, vba_run, vba_sweep

__version__ = "0.1.0"
