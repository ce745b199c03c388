"""Offline policy gradient estimation in POMDPs with a hidden confounder."""

from .baselines import NaiveConfig, NaiveEstimator, behavior_cloning, naive_gradient
from .bridge import BridgeFitter, BridgeHyper, BridgeStage, eval_bridge, fit_all, fit_stage
from .env import (ContinuousChainSpec, OfflineDataset, TabularBanditSpec, rollout_value,
                  sample_continuous, sample_tabular)
from .errors import ConfigError, InputError, NumericError
from .estimator import GradientEstimate, estimate_gradient, gradient_ascent, select_output
from .linalg import KernelConfig
from .policy import LogLinearPolicy, PolicyParams, SignIndicatorFeatures, TabularIndicatorFeatures

__all__ = [
    "BridgeFitter", "BridgeHyper", "BridgeStage", "ConfigError", "ContinuousChainSpec",
    "GradientEstimate", "InputError", "KernelConfig", "LogLinearPolicy", "NaiveConfig",
    "NaiveEstimator", "NumericError", "OfflineDataset", "PolicyParams", "SignIndicatorFeatures",
    "TabularBanditSpec", "TabularIndicatorFeatures", "behavior_cloning", "estimate_gradient",
    "eval_bridge", "fit_all", "fit_stage", "gradient_ascent", "naive_gradient", "rollout_value",
    "sample_continuous", "sample_tabular", "select_output",
]
