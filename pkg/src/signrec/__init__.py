"""Sign-aware graph collaborative filtering with numpy and scipy.sparse."""

from .config import TrainConfig
from .errors import (
    ConfigError,
    ContractError,
    EmptyDatasetError,
    InvariantError,
    NonFiniteError,
    SignRecError,
)
from .evaluation import EvalReport, aggregate_folds, evaluate, ndcg_at_k, precision_recall_at_k
from .graph import (
    DatasetSplit,
    RatingRecord,
    SignedBipartiteGraph,
    build_graph,
    build_vocabs,
    kcore_filter,
    parse_ratings,
    sign_edges,
    split_folds,
)
from .propagation import EmbeddingState, backward, full_forward
from .recommend import RecommendationList, recommend, recommend_all
from .trainer import ModelParams, embed, fit, init_params, train_epoch

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DatasetSplit",
    "EmbeddingState",
    "EmptyDatasetError",
    "EvalReport",
    "InvariantError",
    "ModelParams",
    "NonFiniteError",
    "RatingRecord",
    "RecommendationList",
    "SignRecError",
    "SignedBipartiteGraph",
    "TrainConfig",
    "aggregate_folds",
    "backward",
    "build_graph",
    "build_vocabs",
    "embed",
    "evaluate",
    "fit",
    "full_forward",
    "init_params",
    "kcore_filter",
    "ndcg_at_k",
    "parse_ratings",
    "precision_recall_at_k",
    "recommend",
    "recommend_all",
    "sign_edges",
    "split_folds",
    "train_epoch",
]
