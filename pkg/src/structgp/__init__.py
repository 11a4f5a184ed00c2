"""Structured multi-task Gaussian processes with learnable DAG structure.

Continuous-time multi-task GPs whose covariance comes from Gaussian
convolution filters, a sparse acyclic graph over tasks learned by
constrained marginal-likelihood optimisation, optional latent pathways
shared across subjects, low-rank features and streaming Woodbury solves.
"""

__version__ = "0.1.0"

from .data import (DataError, ObservationSet, SubjectBatch, TaskCatalog, TransformState,  # noqa: E402
                   derive_pseudo_tasks, ingest_csv, make_batches, normal_score_transform, write_csv)
from .gp import NumericalError, PosteriorForecast, blockwise_nmll, nmll, posterior_predict  # noqa: E402
from .kernels import GraphParams, StandardizedGraphParams, assemble_covariance, cross_cov, \
    pair_term, standardize  # noqa: E402
from .latent import PathwayParams, assign_pathways, gating_weights, lp_covariance  # noqa: E402
from .online import AccumulatorState, BatchBlocks, conditional_nmll, update_and_solve  # noqa: E402
from .structure import LearnedStructure, acyclicity, hard_threshold, smooth_l1  # noqa: E402
