"""Differential attention networks (DAN/DCN) on planted synthetic VQA data."""

from ._core import (  # noqa: F401
    DomainError,
    IoError,
    NumericError,
    ShapeError,
    cross_entropy,
    decay_factor,
    downscale_attention,
    grad_check,
    knn,
    matmul,
    normalize_answer,
    opposing_context,
    project,
    rank_correlation,
    reject,
    run_cli,
    softmax,
    supporting_context,
    train_and_evaluate,
    triplet_grads,
    triplet_loss,
    vqa_accuracy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
