"""Gated KG+feature fusion teacher, distilled feature-only student, and leakage-safe evaluation."""

from .config import ExperimentConfig, load_config
from .exceptions import (ChecksumError, ConfigError, DdiError, FormatError, IndexRangeError,
                         LeakageError, MissingDrugError, TrainingError, UndefinedMetricError)
from .experiment import compare_models, run_experiment
from .features import EmbeddingTable, PairFeaturizer, load_embedding_table, pair_features
from .graph import (LeakageReport, Regime, SplitPlan, TripleSet, edge_holdout_split, load_triples,
                    node_holdout_split, verify_no_leakage)
from .metrics import EvalReport
from .negatives import NegativePool, build_pool, freeze_pool, load_pool
from .student import DistilledStudent, RelationMLP, distill
from .synth import SynthWorld, WorldSpec, generate
from .teacher import DistMultKG, FusionTeacher
from .two_head import Alert, LogitBinaryHead, Threshold, TwoHeadClassifier, calibrate_threshold, infer

__version__ = "0.1.0"

__all__ = [
    "Alert", "ChecksumError", "ConfigError", "DdiError", "DistMultKG", "DistilledStudent",
    "EmbeddingTable", "EvalReport", "ExperimentConfig", "FormatError", "FusionTeacher",
    "IndexRangeError", "LeakageError", "LeakageReport", "MissingDrugError", "NegativePool",
    "PairFeaturizer", "Regime", "RelationMLP", "SplitPlan", "SynthWorld", "Threshold",
    "TrainingError", "TripleSet", "TwoHeadClassifier", "UndefinedMetricError", "WorldSpec",
    "build_pool", "calibrate_threshold", "compare_models", "distill", "edge_holdout_split",
    "freeze_pool", "generate", "infer", "load_config", "load_embedding_table", "load_pool",
    "load_triples", "node_holdout_split", "pair_features", "run_experiment", "verify_no_leakage",
]
