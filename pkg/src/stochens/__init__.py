"""Stochastic-ensemble posterior approximation lab.

Approximate Bayesian neural-network posteriors on 2D toy classification with
stochastic ensembles (dropout, DropConnect, non-parametric parameter
exchange), plain deep ensembles, and weight-averaged ensembles, validated
against a built-in NUTS sampler and a posterior-fidelity metric suite.
"""

from .errors import (
    ArtifactError,
    ConfigError,
    DomainError,
    SamplerError,
    ShapeError,
    StochensError,
    TrainingError,
)
from .hmc import HMCConfig, PosteriorSamples, leapfrog, nuts_chain, rhat, run_hmc
from .masks import MaskSet, StochasticKind, StochasticSpec, apply_np_selection, masked_forward, sample_masks
from .metrics import (
    MetricsReport,
    PredictiveDistribution,
    agreement,
    ece,
    evaluate,
    mean_abs_diff,
    mutual_information,
    odd_auroc,
    predictive_entropy,
    predictive_variance,
)
from .net import (
    Dataset,
    MLPArch,
    ParamVector,
    PriorSpec,
    finite_diff_grad,
    forward,
    grad_potential,
    nll,
    potential,
    softmax,
)
from .toydata import EvalGrid, ToySpec, eval_grid, generate_toy
from .training import (
    EnsembleKind,
    EnsembleModel,
    SWAConfig,
    TrainConfig,
    predict,
    swa_member,
    train_ensemble,
    train_member,
)
from .vi import (
    EnsembleFamilySpec,
    KLBreakdown,
    enll,
    kl_deep_ensemble,
    kl_stochastic_ensemble,
    mc_kl_oracle,
    rf2_mc_bound,
    rf_upper_bound,
    training_loss,
)

__version__ = "0.1.0"
