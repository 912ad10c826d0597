"""Dialogue language model with speaker token-type embeddings."""

from turnlm._core import (
    CapacityError,
    ChatSession,
    ContractError,
    Model,
    NumericError,
    ParseError,
    NormalizationError,
    Vocabulary,
    assemble,
    distinct_n,
    evaluate_metrics,
    init_model,
    load_conversations,
    lr_at,
    masked_cross_entropy,
    tokenize,
    train,
    training_instances,
)

__all__ = [
    "CapacityError",
    "ChatSession",
    "ContractError",
    "Model",
    "NumericError",
    "ParseError",
    "NormalizationError",
    "Vocabulary",
    "assemble",
    "distinct_n",
    "evaluate_metrics",
    "init_model",
    "load_conversations",
    "lr_at",
    "masked_cross_entropy",
    "tokenize",
    "train",
    "training_instances",
]
