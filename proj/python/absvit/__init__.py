# SPDX-License-Identifier: Apache-2.0
"""Top-down attention transformer with a sparse-reconstruction core.

The compiled extension holds everything; this package re-exports it and adds
small conveniences for JSON configs.
"""

import json

from ._core import (
    CheckpointError,
    ConfigError,
    ConvergenceError,
    Model,
    NumericError,
    class_name,
    default_config,
    gen_single_object,
    gen_two_object,
    kkt_residual,
    lasso_oracle,
    max_step_size,
    normalize_config,
    positive_random_features,
    selftest,
    soft_threshold,
    solve_sparse_code,
    sparse_objective,
)
from ._core import train as _train

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvergenceError",
    "Model",
    "NumericError",
    "class_name",
    "config",
    "default_config",
    "gen_single_object",
    "gen_two_object",
    "kkt_residual",
    "lasso_oracle",
    "max_step_size",
    "normalize_config",
    "positive_random_features",
    "selftest",
    "soft_threshold",
    "solve_sparse_code",
    "sparse_objective",
    "train",
]


def config(**sections):
    """Builds a validated config dict: config(train={"epochs": 2})."""
    return json.loads(normalize_config(json.dumps(sections)))


def train(cfg, checkpoint="", log=None):
    """Trains from a config dict or JSON string."""
    text = cfg if isinstance(cfg, str) else json.dumps(cfg)
    return _train(text, checkpoint, log)
