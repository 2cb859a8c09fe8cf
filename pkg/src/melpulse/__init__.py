"""Feature-discovery sequence models for monophonic melody prediction."""

from .corpus import (
    Corpus,
    CorpusError,
    Event,
    EventSequence,
    FoldAssignment,
    ingest,
    split_folds,
    train_test_split,
)
from .ensemble import CombinationConfig, HybridPredictor, NGramModel, combine
from .evalgen import GenerationConfig, beam_search, cross_entropy, iterative_random_walk
from .features import BasisFeature, CompoundFeature, FeatureSet, build_matrix, evaluate
from .model import PredictiveDistribution, objective, predict
from .optimizer import ConvergenceConfig, OptimizerConfig, OptimizerState
from .pulse import (
    NPlusSpec,
    OuterConvergence,
    RegularizationSpec,
    TrainedModel,
    fit_ltm,
    fit_predict_stm,
)
from .viewpoints import KeyProfiles, ViewpointId, find_key, load_key_profiles

__version__ = "0.1.0"

__all__ = [
    "BasisFeature",
    "CombinationConfig",
    "CompoundFeature",
    "ConvergenceConfig",
    "Corpus",
    "CorpusError",
    "Event",
    "EventSequence",
    "FeatureSet",
    "FoldAssignment",
    "GenerationConfig",
    "HybridPredictor",
    "KeyProfiles",
    "NGramModel",
    "NPlusSpec",
    "OptimizerConfig",
    "OptimizerState",
    "OuterConvergence",
    "PredictiveDistribution",
    "RegularizationSpec",
    "TrainedModel",
    "ViewpointId",
    "beam_search",
    "build_matrix",
    "combine",
    "cross_entropy",
    "evaluate",
    "find_key",
    "fit_ltm",
    "fit_predict_stm",
    "ingest",
    "iterative_random_walk",
    "load_key_profiles",
    "objective",
    "predict",
    "split_folds",
    "train_test_split",
]
