"""Quantised Langevin stochastic dynamics for federated Bayesian sampling."""

from .compression import BitLedger, CompressedMessage, QuantizerSpec, bit_cost, decode, omega, quantize
from .core import (
    ConfigError,
    ContractError,
    CorruptMessageError,
    DivergenceError,
    DomainError,
    IterationRecord,
    OptimizationError,
    QLSDError,
    RandomStream,
    StateError,
    gaussian_draw,
    substream,
)
from .diagnostics import (
    BoundInputs,
    BoundReport,
    MomentAccumulator,
    bound_qlsd,
    bound_qlsd_pp,
    bound_qlsd_star,
    gaussian_w2,
    hpd_eta,
    lyapunov_psi,
    mse_test_functional,
    w2_bound_curve,
)
from .models import (
    GaussianModel,
    LogisticModel,
    grad_client,
    grad_component,
    make_gaussian_dataset,
    make_synthetic_logistic,
    minimizer,
    smoothness_profile,
)
from .oracles import OracleKind, oracle_eval, sample_minibatch
from .sampler import SamplerConfig, ServerState, Trace, qlsd_pp_step, qlsd_step, run_chain

__version__ = "0.1.0"
