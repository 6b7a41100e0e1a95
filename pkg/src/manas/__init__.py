"""Gradient-based search of multi-scale attentive de-raining networks."""

from .core import (
    AttentionOpKind,
    ColumnChoice,
    ConfigError,
    Genotype,
    GenotypeError,
    NetworkConfig,
    NumericalAbort,
    SearchConfig,
    TrainConfig,
    validate_config,
)
from .supernet import DerainNetwork, Mode, instantiate, load_weights, save_weights
from .search_engine import ArchParams, binarize, bilevel_step, relax, run_search, run_train

__version__ = "0.1.0"
