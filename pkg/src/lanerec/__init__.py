"""Adherence-aware lane-change recommendation with deep Q-learning."""

from lanerec._accel import USE_NUMBA
from lanerec.adherence import AdherenceEstimator, BaselineConfig, BaselinePolicy, ComplianceModel
from lanerec.mdp_env import Action, EnvConfig, LaneChangeEnv, RewardWeights
from lanerec.traffic_sim import IDMParams, RoadConfig, SimWorld, SpawnConfig

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA", "AdherenceEstimator", "BaselineConfig", "BaselinePolicy", "ComplianceModel",
    "Action", "EnvConfig", "LaneChangeEnv", "RewardWeights", "IDMParams", "RoadConfig",
    "SimWorld", "SpawnConfig",
]
