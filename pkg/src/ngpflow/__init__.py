"""Finite-width corrections to neural-network Gaussian-process priors.

The package propagates the core kernel, self-energy and four-point vertex of
a multilayer perceptron's preactivations layer by layer, evaluates the
resulting weakly non-Gaussian output density, performs corrected Bayesian
inference and checks everything against brute-force network sampling.
"""

from .core import (
    Activation,
    Dataset,
    FlowState,
    KernelConditionError,
    NetworkConfig,
    RaisedState,
    lower_indices,
    pair_index,
    raise_indices,
)
from .flow import FlowTrace, closed_form_single_input, init_first_layer, run_flow, step

__all__ = [
    "Activation",
    "Dataset",
    "FlowState",
    "FlowTrace",
    "KernelConditionError",
    "NetworkConfig",
    "RaisedState",
    "closed_form_single_input",
    "init_first_layer",
    "lower_indices",
    "pair_index",
    "raise_indices",
    "run_flow",
    "step",
]

__version__ = "0.1.0"
