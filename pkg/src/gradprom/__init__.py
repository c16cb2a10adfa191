"""Gradient-gated task-driven image enhancement on a small numpy autodiff core."""
__version__ = "0.1.0"

from .engine import (NumericalAbort, OptimConfig, StrategyConfig, combine_gradients,
                     cosine_similarity, fit)
from .estimator import GradPromEnhancer

__all__ = ["GradPromEnhancer", "NumericalAbort", "OptimConfig", "StrategyConfig",
           "combine_gradients", "cosine_similarity", "fit", "__version__"]
