"""Learned profit-seeking double-auction mechanisms with exact feasibility/IR
layers, adversarial incentive probing, and gradient conflict surgery."""

from .market import MarketConfig, MarketInstance, instance_rng, sample_batch, sample_market
from .nets import (
    ArchConfig,
    AttentionMechanismNet,
    MarketBatch,
    MlpMechanismNet,
    clamp_payments,
    scale_allocation,
)
from .ic import ICProbe, brute_force_ic_oracle, consumer_ic_gap, optimize_probe, supplier_ic_gap
from .surgery import GradientSet, eliminate_conflicts, merge, project
from .baselines import BaselineKind, random_matching, trade_reduction
from .training import TrainConfig, TrainHistory, TrainingAbort, train
from .evaluation import (
    EvalReport,
    NetMechanism,
    RandomMatchingMechanism,
    TradeReductionMechanism,
    evaluate_mechanism,
    expected_profit,
    fluctuation_variance,
    generalization_eval,
    max_ic_violation,
    sweep,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "AttentionMechanismNet",
    "BaselineKind",
    "EvalReport",
    "GradientSet",
    "ICProbe",
    "MarketBatch",
    "MarketConfig",
    "MarketInstance",
    "MlpMechanismNet",
    "NetMechanism",
    "RandomMatchingMechanism",
    "TradeReductionMechanism",
    "TrainConfig",
    "TrainHistory",
    "TrainingAbort",
    "brute_force_ic_oracle",
    "clamp_payments",
    "consumer_ic_gap",
    "eliminate_conflicts",
    "evaluate_mechanism",
    "expected_profit",
    "fluctuation_variance",
    "generalization_eval",
    "instance_rng",
    "load_checkpoint",
    "max_ic_violation",
    "merge",
    "optimize_probe",
    "project",
    "random_matching",
    "sample_batch",
    "sample_market",
    "save_checkpoint",
    "scale_allocation",
    "supplier_ic_gap",
    "sweep",
    "trade_reduction",
    "train",
]
