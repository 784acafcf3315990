"""Soft-kNN routed classifier ensembles for class-incremental streams."""

from ._core import (
    ConfigError,
    DataError,
    Ensemble,
    SoftKnnResult,
    TrainConfig,
    __version__,
    cosine_distances,
    default_kappa,
    final_average_accuracy,
    forgetting,
    generate_synthetic,
    gradcheck,
    hard_topk,
    load_embeddings,
    resolve_config,
    run_experiment,
    save_embeddings,
    sinkhorn,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Ensemble",
    "SoftKnnResult",
    "TrainConfig",
    "cosine_distances",
    "default_kappa",
    "final_average_accuracy",
    "forgetting",
    "generate_synthetic",
    "gradcheck",
    "hard_topk",
    "load_embeddings",
    "resolve_config",
    "run_experiment",
    "save_embeddings",
    "sinkhorn",
]
