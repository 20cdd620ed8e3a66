"""Class-incremental learning with a side branch that softly masks backbone blocks."""

from g2b.backbones import ResidualCNN, TinyViT, build_backbone, expand_head, param_count
from g2b.cil import ExemplarMemory, StrategySpec, build_task_stream, evaluate, run_round
from g2b.harness import ExperimentConfig, RunRecord, run_experiment
from g2b.metrics import AccuracyMatrix, avg_accuracy, forgetting_measure, last_accuracy
from g2b.modulation import modulate
from g2b.sidebranch import G2BModel, wrap_g2b

__all__ = [
    "AccuracyMatrix",
    "ExemplarMemory",
    "ExperimentConfig",
    "G2BModel",
    "ResidualCNN",
    "RunRecord",
    "StrategySpec",
    "TinyViT",
    "avg_accuracy",
    "build_backbone",
    "build_task_stream",
    "evaluate",
    "expand_head",
    "forgetting_measure",
    "last_accuracy",
    "modulate",
    "param_count",
    "run_experiment",
    "run_round",
    "wrap_g2b",
]
