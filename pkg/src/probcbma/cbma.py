"""CBMA datasets, soft/hard term-study weighting, and closed-form estimators.

A dataset is a sparse study-by-term TF-IDF matrix ``x`` and a sparse binary
study-by-voxel activation matrix ``y``.  The estimators compute forward
inference maps ``P[Activation(v) | formula]`` directly from per-study weights:
hard mode thresholds TF-IDF at ``tau``; soft mode replaces the indicator with
the logistic ramp ``omega``.  `encode_program` emits the equivalent
probabilistic program so the same queries can be answered by the lifted
engine or the possible-worlds oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.special import expit

from . import dsl
from .dsl import And, Atom, Constant, Not, Or, ValidatedProgram, Variable
from .probdb import CHOICE, INDEPENDENT, ProbDatabase, ProbRelation, make_equiprobable_choice
from .ra import ProbTable

HARD = "hard"
SOFT = "soft"

DEFAULT_TAU = 0.1
DEFAULT_ALPHA = 300.0

NO_MATCH_THRESHOLD = 1e-15

STUDY_SELECTION = "SelectedStudy"
VOXEL_REPORTED = "VoxelReported"
TERM_IN_STUDY = "TermInStudy"
ACTIVATION = "Activation"
TERM_ASSOCIATION = "TermAssociation"


class NoMatchingStudiesError(Exception):
    """Every study weight is (numerically) zero for the requested formula."""


class FormulaError(Exception):
    pass


@dataclass(frozen=True)
class ThresholdConfig:
    """Hard thresholding ``1[x > tau]`` or the soft ramp ``omega(x; alpha, tau)``."""

    mode: str = SOFT
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.mode not in (HARD, SOFT):
            raise ValueError(f"mode must be {HARD!r} or {SOFT!r}, got {self.mode!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def omega(x, alpha: float = DEFAULT_ALPHA, tau: float = DEFAULT_TAU):
    """Soft-threshold a TF-IDF value: the logistic function of ``alpha*(x-tau)``."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return expit(alpha * (np.asarray(x, dtype=float) - tau))


class CbmaDataset:
    """Sparse TF-IDF matrix ``x`` (study x term) and activation matrix ``y``
    (study x voxel), with opaque string/int identifiers."""

    def __init__(self, studies, terms, voxels, x, y):
        self.studies = np.asarray(studies)
        self.terms = np.asarray(terms)
        self.voxels = np.asarray(voxels)
        self.x = sparse.csr_matrix(x, dtype=float)
        self.y = sparse.csr_matrix(y, dtype=float)
        self.x.eliminate_zeros()
        self.y.eliminate_zeros()
        n, m, k = len(self.studies), len(self.terms), len(self.voxels)
        if n < 1 or m < 1 or k < 1:
            raise ValueError("a dataset needs at least one study, term and voxel")
        if self.x.shape != (n, m):
            raise ValueError(f"x has shape {self.x.shape}, expected {(n, m)}")
        if self.y.shape != (n, k):
            raise ValueError(f"y has shape {self.y.shape}, expected {(n, k)}")
        if self.x.nnz and (not np.isfinite(self.x.data).all() or self.x.data.min() < 0):
            raise ValueError("TF-IDF values must be finite and >= 0")
        self._term_index = {t: i for i, t in enumerate(self.terms)}

    @property
    def n_studies(self):
        return len(self.studies)

    def term_column(self, term) -> int:
        try:
            return self._term_index[term]
        except KeyError:
            raise FormulaError(f"unknown term {term!r}") from None

    # -- I/O ------------------------------------------------------------

    @classmethod
    def from_tsv(cls, directory) -> "CbmaDataset":
        directory = Path(directory)
        features = pd.read_csv(directory / "features.tsv", sep="\t")
        activations = pd.read_csv(directory / "activations.tsv", sep="\t")
        for frame, cols, name in (
            (features, ["study_id", "term", "tfidf"], "features.tsv"),
            (activations, ["study_id", "voxel_id"], "activations.tsv"),
        ):
            missing = [c for c in cols if c not in frame.columns]
            if missing:
                raise ValueError(f"{name}: missing columns {missing}")
        studies = np.unique(
            np.concatenate([features["study_id"].unique(), activations["study_id"].unique()])
        )
        terms = np.unique(features["term"])
        voxels = np.unique(activations["voxel_id"])
        study_idx = {s: i for i, s in enumerate(studies)}
        term_idx = {t: i for i, t in enumerate(terms)}
        voxel_idx = {v: i for i, v in enumerate(voxels)}
        x = sparse.coo_matrix(
            (
                features["tfidf"].to_numpy(dtype=float),
                (
                    features["study_id"].map(study_idx).to_numpy(),
                    features["term"].map(term_idx).to_numpy(),
                ),
            ),
            shape=(len(studies), len(terms)),
        ).tocsr()
        y = sparse.coo_matrix(
            (
                np.ones(len(activations)),
                (
                    activations["study_id"].map(study_idx).to_numpy(),
                    activations["voxel_id"].map(voxel_idx).to_numpy(),
                ),
            ),
            shape=(len(studies), len(voxels)),
        ).tocsr()
        y.data[:] = 1.0  # duplicate coordinate reports collapse to one
        return cls(studies, terms, voxels, x, y)

    def to_tsv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        coo = self.x.tocoo()
        pd.DataFrame(
            {
                "study_id": self.studies[coo.row],
                "term": self.terms[coo.col],
                "tfidf": coo.data,
            }
        ).to_csv(directory / "features.tsv", sep="\t", index=False, float_format="%.17g")
        coo = self.y.tocoo()
        pd.DataFrame(
            {"study_id": self.studies[coo.row], "voxel_id": self.voxels[coo.col]}
        ).to_csv(directory / "activations.tsv", sep="\t", index=False)


# ---------------------------------------------------------------------------
# Study weights


def weight_matrix(ds: CbmaDataset, cfg: ThresholdConfig) -> sparse.csr_matrix:
    """Per-(study, term) probability weights.

    Absent TF-IDF entries get weight 0 in both modes (in soft mode this is an
    approximation: omega(0) is below 1e-13 at the default alpha and tau).
    """
    w = ds.x.copy()
    if cfg.mode == HARD:
        w.data = (w.data > cfg.tau).astype(float)
    else:
        w.data = omega(w.data, cfg.alpha, cfg.tau)
    w.eliminate_zeros()
    return w


def _term_leaf(formula) -> Optional[str]:
    if isinstance(formula, (str, int, np.integer)):
        return formula
    if isinstance(formula, Atom):
        if formula.predicate != TERM_ASSOCIATION or len(formula.args) != 1:
            raise FormulaError(
                f"estimator formulas range over {TERM_ASSOCIATION} atoms, got {formula!r}"
            )
        arg = formula.args[0]
        if not isinstance(arg, Constant):
            raise FormulaError(f"term atom must be ground: {formula!r}")
        return arg.value
    return None


def formula_terms(formula) -> list:
    """Distinct terms referenced by a formula, in first-mention order."""
    leaf = _term_leaf(formula)
    if leaf is not None:
        return [leaf]
    if isinstance(formula, Not):
        return formula_terms(formula.child)
    if isinstance(formula, (And, Or)):
        out = []
        for child in formula.children:
            for term in formula_terms(child):
                if term not in out:
                    out.append(term)
        return out
    raise FormulaError(f"not a term formula: {formula!r}")


def _formula_leaf_count(formula, counts):
    leaf = _term_leaf(formula)
    if leaf is not None:
        counts[leaf] = counts.get(leaf, 0) + 1
    elif isinstance(formula, Not):
        _formula_leaf_count(formula.child, counts)
    else:
        for child in formula.children:
            _formula_leaf_count(child, counts)


def study_weights(ds: CbmaDataset, cfg: ThresholdConfig, formula) -> np.ndarray:
    """Per-study probability that the term formula holds for the study.

    Conjunction multiplies the per-term weights, disjunction combines them by
    noisy-or, negation complements; when a term occurs more than once the
    weight is computed exactly by enumerating its truth assignments.
    """
    w = weight_matrix(ds, cfg)
    columns = {
        term: np.asarray(w[:, ds.term_column(term)].todense()).ravel()
        for term in formula_terms(formula)
    }
    counts = {}
    _formula_leaf_count(formula, counts)
    if all(c == 1 for c in counts.values()):
        return _factorized_weight(formula, columns)
    return _enumerated_weight(formula, columns, ds.n_studies)


def _factorized_weight(formula, columns) -> np.ndarray:
    leaf = _term_leaf(formula)
    if leaf is not None:
        return columns[leaf]
    if isinstance(formula, Not):
        return 1.0 - _factorized_weight(formula.child, columns)
    parts = [_factorized_weight(c, columns) for c in formula.children]
    if isinstance(formula, And):
        out = parts[0].copy()
        for p in parts[1:]:
            out *= p
        return out
    out = 1.0 - parts[0]
    for p in parts[1:]:
        out *= 1.0 - p
    return 1.0 - out


def _enumerated_weight(formula, columns, n) -> np.ndarray:
    terms = list(columns)
    if len(terms) > 20:
        raise FormulaError("formula references too many distinct terms to enumerate")

    def holds(node, assignment):
        leaf = _term_leaf(node)
        if leaf is not None:
            return assignment[leaf]
        if isinstance(node, Not):
            return not holds(node.child, assignment)
        if isinstance(node, And):
            return all(holds(c, assignment) for c in node.children)
        return any(holds(c, assignment) for c in node.children)

    total = np.zeros(n)
    for bits in range(2 ** len(terms)):
        assignment = {t: bool(bits >> i & 1) for i, t in enumerate(terms)}
        if not holds(formula, assignment):
            continue
        mass = np.ones(n)
        for term in terms:
            mass *= columns[term] if assignment[term] else 1.0 - columns[term]
        total += mass
    return total


# ---------------------------------------------------------------------------
# Estimators


def _estimate(ds: CbmaDataset, cfg: ThresholdConfig, formula, per_voxel: bool) -> ProbTable:
    weights = study_weights(ds, cfg, formula)
    total = math.fsum(weights.tolist())
    if total < NO_MATCH_THRESHOLD:
        raise NoMatchingStudiesError(
            f"no studies match {formula!r} in {cfg.mode} mode"
        )
    if not per_voxel:
        return ProbTable.scalar(total / ds.n_studies)
    numerators = ds.y.T.dot(weights)
    frame = pd.DataFrame({"v": ds.voxels, "p": np.clip(numerators / total, 0.0, 1.0)})
    return ProbTable(("v",), frame)


def estimate_conjunction(
    ds: CbmaDataset, cfg: ThresholdConfig, terms: Sequence, per_voxel: bool = True
) -> ProbTable:
    """``P[Activation(v) | T_1 & ... & T_p]`` (or ``P[T_1 & ... & T_p]``)."""
    if not terms:
        raise FormulaError("at least one term is required")
    formula = And(tuple(terms)) if len(terms) > 1 else terms[0]
    return _estimate(ds, cfg, formula, per_voxel)


def estimate_disjunction(
    ds: CbmaDataset, cfg: ThresholdConfig, terms: Sequence, per_voxel: bool = True
) -> ProbTable:
    """``P[Activation(v) | T_1 | ... | T_p]`` with noisy-or study weights."""
    if not terms:
        raise FormulaError("at least one term is required")
    formula = Or(tuple(terms)) if len(terms) > 1 else terms[0]
    return _estimate(ds, cfg, formula, per_voxel)


def estimate_formula(
    ds: CbmaDataset, cfg: ThresholdConfig, formula, per_voxel: bool = True
) -> ProbTable:
    """``P[Activation(v) | formula]`` for a boolean formula over terms."""
    return _estimate(ds, cfg, formula, per_voxel)


def estimate_marginal(ds: CbmaDataset) -> ProbTable:
    """Unconditional ``P[Activation(v)]``: the mean activation over studies."""
    p = np.asarray(ds.y.mean(axis=0)).ravel()
    return ProbTable(("v",), pd.DataFrame({"v": ds.voxels, "p": p}))


# ---------------------------------------------------------------------------
# Program encoding


def encode_program(ds: CbmaDataset, cfg: ThresholdConfig):
    """Encode the dataset as a probabilistic program plus its database.

    SelectedStudy is an equiprobable choice over studies, VoxelReported holds
    the reported activations deterministically, and TermInStudy carries the
    per-(term, study) weight as a probabilistic fact; weight-zero tuples are
    omitted (equivalent semantics, smaller grounding).
    """
    v, s, t = Variable("v"), Variable("s"), Variable("t")
    rules = (
        dsl.DeterministicRule(
            Atom(ACTIVATION, (v,)),
            (Atom(STUDY_SELECTION, (s,)), Atom(VOXEL_REPORTED, (v, s))),
        ),
        dsl.DeterministicRule(
            Atom(TERM_ASSOCIATION, (t,)),
            (Atom(STUDY_SELECTION, (s,)), Atom(TERM_IN_STUDY, (t, s))),
        ),
    )
    program = dsl.Program(rules=rules)
    validated = ValidatedProgram(
        program,
        arities={
            ACTIVATION: 1,
            TERM_ASSOCIATION: 1,
            STUDY_SELECTION: 1,
            VOXEL_REPORTED: 2,
            TERM_IN_STUDY: 2,
        },
        choice_relations=frozenset({STUDY_SELECTION}),
    )

    db = ProbDatabase()
    db.add(make_equiprobable_choice(STUDY_SELECTION, list(ds.studies)))

    ycoo = ds.y.tocoo()
    vr = pd.DataFrame(
        {
            "c0": ds.voxels[ycoo.col],
            "c1": ds.studies[ycoo.row],
            "p": np.ones(ycoo.nnz),
        }
    )
    db.add(ProbRelation(VOXEL_REPORTED, 2, vr, INDEPENDENT))

    wcoo = weight_matrix(ds, cfg).tocoo()
    tis = pd.DataFrame(
        {
            "c0": ds.terms[wcoo.col],
            "c1": ds.studies[wcoo.row],
            "p": wcoo.data.astype(float),
        }
    )
    db.add(ProbRelation(TERM_IN_STUDY, 2, tis, INDEPENDENT))
    return validated, db
