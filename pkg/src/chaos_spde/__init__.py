"""Wiener chaos solver for linear parabolic SPDEs driven by colored Gaussian noise.

Modules
-------
basis
    Cosine basis of L2(0, T) and time grids.
noise
    White, Ornstein-Uhlenbeck and fractional noise through their
    representation operators ``K``.
chaos
    Multi-indices, Hermite/Wick algebra, truncation sets and Gaussian draws.
propagator
    Spectral fields on the torus and the truncated S-system solver.
solver
    Moments, sampling, truncation errors, error bounds and the multistep scheme.
config, cli
    Experiment configuration and the ``chaos-spde`` command.
"""

from .basis import TimeGrid, basis_matrix, eval_basis, inner_product
from .chaos import (
    MultiIndex,
    TruncationLimitError,
    TruncationSet,
    enumerate_truncation,
    hermite,
    sample_gaussians,
    truncation_cardinality,
    wick_product,
    xi_matrix,
)
from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .noise import NoiseSpec, apply_K, m_tilde, m_tilde_parseval, operator_norm_bound, rate_exponents
from .propagator import (
    ChaosCoefficients,
    NumericalGuardError,
    OperatorA,
    OperatorB,
    SpectralField,
    solve_s_system,
    sobolev_norm,
)
from .solver import (
    build_budget,
    bound_overall,
    error_sweep,
    mc_second_moment,
    multistep_solve,
    second_moment,
    truncation_tail,
)

__version__ = "0.1.0"
