"""Particle-based bilevel mean-field Langevin training for IV regression.

The package trains two-layer particle networks for two-stage IV problems
with a fully first-order penalty scheme: two noisy inner chains for the
instrument-side ensemble, one envelope-difference step for the outcome-side
ensemble.  Fixed-feature two-stage ridge and learned-feature (dfiv-style)
baselines plus a tabular Bellman / off-policy-evaluation harness ride on
the same objectives.

Most names here are re-exports; the modules stay importable on their own.
"""

from .bilevel import (
    TrainConfig,
    TrainedModel,
    gaussian_ensemble,
    inner_loop,
    load_model,
    outer_step,
    predict,
    predict_batch,
    projected_risk,
    save_model,
    train,
)
from .baselines import dfiv_train, fixed_2sls, random_tanh_features
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    MfldivError,
    NumericalFailure,
)
from .features import ClippedLinearSpec, NeuronSpec, ParticleEnsemble
from .npiv_data import (
    NpivDataset,
    StructuralSpec,
    generate_npiv,
    instrument_grid,
    load_dataset,
    oracle_th,
    save_dataset,
)
from .objectives import RegParams

__version__ = "0.1.0"

__all__ = [
    "ClippedLinearSpec",
    "ConfigError",
    "DataFormatError",
    "DivergenceError",
    "MfldivError",
    "NeuronSpec",
    "NpivDataset",
    "NumericalFailure",
    "ParticleEnsemble",
    "RegParams",
    "StructuralSpec",
    "TrainConfig",
    "TrainedModel",
    "dfiv_train",
    "fixed_2sls",
    "gaussian_ensemble",
    "generate_npiv",
    "inner_loop",
    "instrument_grid",
    "load_dataset",
    "load_model",
    "oracle_th",
    "outer_step",
    "predict",
    "predict_batch",
    "projected_risk",
    "random_tanh_features",
    "save_dataset",
    "save_model",
    "train",
]
