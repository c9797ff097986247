"""Probabilistic logic query engine for coordinate-based meta-analysis data."""

from .dsl import parse_program, parse_query, validate_program
from .probdb import ProbDatabase, ProbRelation, load_tsv, make_equiprobable_choice
from .lifted import UCQ, check_safety, compile_ucq, rewrite_choices, unfold, unfold_query
from .ra import ProbTable, conditional, evaluate
from .oracle import enumerate_worlds, oracle_prob
from .cbma import (
    CbmaDataset,
    ThresholdConfig,
    encode_program,
    estimate_conjunction,
    estimate_disjunction,
    estimate_formula,
    omega,
)

__all__ = [
    "CbmaDataset",
    "ProbDatabase",
    "ProbRelation",
    "ProbTable",
    "ThresholdConfig",
    "UCQ",
    "check_safety",
    "compile_ucq",
    "conditional",
    "encode_program",
    "enumerate_worlds",
    "estimate_conjunction",
    "estimate_disjunction",
    "estimate_formula",
    "evaluate",
    "load_tsv",
    "make_equiprobable_choice",
    "omega",
    "oracle_prob",
    "parse_program",
    "parse_query",
    "rewrite_choices",
    "unfold",
    "unfold_query",
    "validate_program",
]

__version__ = "0.1.0"
