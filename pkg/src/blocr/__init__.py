"""Bayesian block-structured covariance regression from summary statistics."""

from .covreg import CoefficientSet, build_delta, build_L, sensitivity_matrices
from .errors import BlocrError, FormatError, NumericalError, ValidationError
from .gibbs import PriorConfig, Schedule, map_estimate, run_chain
from .partition import BlockPartition, validate_partition
from .sumstats import ParticipantSummary, SummaryBatch, compute_summary, log_likelihood, stack_summaries

__version__ = "0.1.0"
