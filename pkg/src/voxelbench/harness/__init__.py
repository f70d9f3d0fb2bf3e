"""Fold generation, two-rank cross-validation, single-case application, CLI."""

from .config import ExperimentConfig, load_experiment_config, parse_experiment_config
from .folds import FoldAssignment, make_folds
from .pipeline import (
    CrossvalResult,
    PreparedCase,
    SingleResult,
    StageFailure,
    derived_seed,
    load_cases,
    make_patch,
    patch_checksum,
    prepare_case,
    prepare_volumes,
    run_crossval,
    run_fold_organ,
    run_single,
)

__all__ = [
    "CrossvalResult",
    "ExperimentConfig",
    "FoldAssignment",
    "PreparedCase",
    "SingleResult",
    "StageFailure",
    "derived_seed",
    "load_cases",
    "load_experiment_config",
    "make_folds",
    "make_patch",
    "parse_experiment_config",
    "patch_checksum",
    "prepare_case",
    "prepare_volumes",
    "run_crossval",
    "run_fold_organ",
    "run_single",
]
