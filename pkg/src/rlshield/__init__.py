"""RLShield: a desk-scale multi-agent RL defense laboratory.

Flow preprocessing, an attack-surface MDP with scripted and adaptive
attackers, CTDE policy learning, a safety-gated response orchestrator with an
audit trail, and a seeded evaluation harness.
"""

__version__ = "0.1.0"

from .agents import TrainConfig, train
from .evaluation import EvalSettings
from .flowdata import FlowPreprocessor, SynthConfig, synth_flows
from .surface import AttackSurfaceEnv, FlowPools, Scenario, default_scenario

__all__ = [
    "AttackSurfaceEnv",
    "EvalSettings",
    "FlowPools",
    "FlowPreprocessor",
    "Scenario",
    "SynthConfig",
    "TrainConfig",
    "default_scenario",
    "synth_flows",
    "train",
    "__version__",
]
