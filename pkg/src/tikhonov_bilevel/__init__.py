"""Diagonal Tikhonov proximal-gradient methods for simple bilevel problems."""
from .core import (
    BilevelProblem,
    CompositeObjective,
    HolderData,
    Oracle,
    ProxTerm,
    Schedule,
    SmoothTerm,
    combined_prox,
    epsilon_continuous,
    epsilon_discrete,
    power_iteration,
    regularized_gradient,
    regularized_value,
    zero_smooth,
)
from .algorithms import Method, SolverConfig, SolverState, run
from .diagnostics import LyapunovParams, RunTrace, FlowTrace, fit_rate
from . import errors, prox

__version__ = "0.1.0"
