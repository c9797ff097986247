"""Probabilistic relations: independent-tuple and mutually-exclusive storage.

Relations are stored columnwise (one pandas DataFrame per relation) so that
query evaluation stays vectorized at meta-analysis scale; `tuples()` exposes
the row view used by the possible-worlds oracle and by small tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .dsl import ValidatedProgram

CHOICE_SUM_TOLERANCE = 1e-9

INDEPENDENT = "independent"
CHOICE = "choice"


class DatabaseError(Exception):
    pass


def _arg_columns(arity):
    return [f"c{i}" for i in range(arity)]


class ProbRelation:
    """A named relation of tuples, each carrying a probability.

    ``semantics`` is either `INDEPENDENT` (tuples are independent Bernoulli
    events) or `CHOICE` (tuples are mutually exclusive; at most one holds per
    possible world and their probabilities sum to at most one).
    """

    def __init__(self, name: str, arity: int, frame: pd.DataFrame, semantics: str = INDEPENDENT):
        if semantics not in (INDEPENDENT, CHOICE):
            raise ValueError(f"unknown semantics {semantics!r}")
        self.name = name
        self.arity = arity
        self.semantics = semantics
        self.frame = frame.reset_index(drop=True)
        self._validate()

    @classmethod
    def from_tuples(
        cls,
        name: str,
        rows: Iterable[tuple],
        arity: Optional[int] = None,
        semantics: str = INDEPENDENT,
    ) -> "ProbRelation":
        """Build a relation from ``(args, p)`` pairs."""
        rows = list(rows)
        if arity is None:
            if not rows:
                raise DatabaseError(f"cannot infer arity of empty relation {name!r}")
            arity = len(rows[0][0])
        columns = {c: [] for c in _arg_columns(arity)}
        probs = []
        for args, p in rows:
            if len(args) != arity:
                raise DatabaseError(f"{name}: tuple {args!r} does not have arity {arity}")
            for c, a in zip(columns.values(), args):
                c.append(a)
            probs.append(p)
        frame = pd.DataFrame({**columns, "p": np.asarray(probs, dtype=float)})
        return cls(name, arity, frame, semantics)

    def _validate(self):
        cols = _arg_columns(self.arity) + ["p"]
        if list(self.frame.columns) != cols:
            self.frame = self.frame[cols]
        p = self.frame["p"].to_numpy()
        if len(p) and (np.isnan(p).any() or p.min() < 0.0 or p.max() > 1.0):
            bad = self.frame[(self.frame["p"] < 0) | (self.frame["p"] > 1) | self.frame["p"].isna()]
            raise DatabaseError(
                f"{self.name}: probability outside [0, 1] in rows {bad.index.tolist()[:5]}"
            )
        if self.arity and self.frame.duplicated(subset=_arg_columns(self.arity)).any():
            raise DatabaseError(f"{self.name}: duplicate tuples")
        if self.semantics == CHOICE:
            total = math.fsum(p.tolist())
            if total > 1.0 + CHOICE_SUM_TOLERANCE:
                raise DatabaseError(f"{self.name}: choice probabilities sum to {total} > 1")

    def __len__(self):
        return len(self.frame)

    def __eq__(self, other):
        return (
            isinstance(other, ProbRelation)
            and self.name == other.name
            and self.arity == other.arity
            and self.semantics == other.semantics
            and self.frame.equals(other.frame)
        )

    def tuples(self):
        """Iterate ``(args, p)`` pairs."""
        cols = [self.frame[c].to_numpy() for c in _arg_columns(self.arity)]
        p = self.frame["p"].to_numpy()
        for i in range(len(self.frame)):
            yield tuple(c[i] for c in cols), float(p[i])

    def lookup(self, args: tuple) -> float:
        """Probability of a ground tuple; absent tuples have probability 0."""
        if getattr(self, "_index", None) is None:
            self._index = {args: p for args, p in self.tuples()}
        return self._index.get(tuple(args), 0.0)

    def total_probability(self) -> float:
        return math.fsum(self.frame["p"].tolist())

    def __repr__(self):
        return f"ProbRelation({self.name}/{self.arity}, {len(self)} tuples, {self.semantics})"


class ProbDatabase:
    """Immutable-after-construction map from relation name to `ProbRelation`."""

    def __init__(self, relations: Iterable[ProbRelation] = ()):
        self.relations = {}
        for rel in relations:
            self.add(rel)

    def add(self, relation: ProbRelation):
        if relation.name in self.relations:
            raise DatabaseError(f"duplicate relation {relation.name!r}")
        self.relations[relation.name] = relation

    def __getitem__(self, name) -> ProbRelation:
        return self.relations[name]

    def __contains__(self, name):
        return name in self.relations

    def schema(self) -> dict:
        """Map relation name -> (arity, is_choice); the compiler's view."""
        return {
            r.name: (r.arity, r.semantics == CHOICE) for r in self.relations.values()
        }

    def uncertain_tuple_count(self) -> int:
        """Number of independent tuples with 0 < p < 1 (choice groups excluded)."""
        n = 0
        for rel in self.relations.values():
            if rel.semantics == INDEPENDENT:
                p = rel.frame["p"].to_numpy()
                n += int(((p > 0.0) & (p < 1.0)).sum())
        return n


def load_tsv(
    relation_name: str,
    path,
    schema: Sequence[str],
    probability_column: Optional[str] = "p",
    semantics: str = INDEPENDENT,
) -> ProbRelation:
    """Load a relation from a tab-separated file with a header row.

    ``schema`` names the argument columns in order.  If the probability
    column is absent from the file, every tuple gets probability 1.
    """
    frame = pd.read_csv(path, sep="\t", dtype={c: object for c in schema})
    missing = [c for c in schema if c not in frame.columns]
    if missing:
        raise DatabaseError(f"{path}: missing columns {missing} (found {list(frame.columns)})")
    out = pd.DataFrame({f"c{i}": frame[c] for i, c in enumerate(schema)})
    if probability_column is not None and probability_column in frame.columns:
        p = pd.to_numeric(frame[probability_column], errors="coerce").to_numpy()
        bad = np.flatnonzero(np.isnan(p) | (p < 0.0) | (p > 1.0))
        if bad.size:
            # +2 converts the frame row index to a 1-based file line (header line first).
            raise DatabaseError(
                f"{path}: bad probability at line {int(bad[0]) + 2}"
            )
        out["p"] = p
    else:
        out["p"] = 1.0
    if out[_arg_columns(len(schema))].isna().any().any():
        line = int(out[_arg_columns(len(schema))].isna().any(axis=1).idxmax()) + 2
        raise DatabaseError(f"{path}: malformed row at line {line}")
    return ProbRelation(relation_name, len(schema), out, semantics)


def make_equiprobable_choice(relation_name: str, elements: Sequence) -> ProbRelation:
    """A choice relation assigning probability 1/N to each element."""
    elements = list(elements)
    if not elements:
        raise DatabaseError("equiprobable choice over an empty element list")
    if len(set(elements)) != len(elements):
        raise DatabaseError("equiprobable choice elements must be distinct")
    p = 1.0 / len(elements)
    frame = pd.DataFrame({"c0": elements, "p": np.full(len(elements), p)})
    return ProbRelation(relation_name, 1, frame, CHOICE)


def from_program(validated: ValidatedProgram) -> ProbDatabase:
    """Materialize the probabilistic blocks of a program as a database."""
    db = ProbDatabase()
    for block in validated.program.fact_blocks:
        rows = [(tuple(c.value for c in args), p) for args, p in block.tuples]
        db.add(ProbRelation.from_tuples(block.relation, rows, semantics=INDEPENDENT))
    for block in validated.program.choice_blocks:
        rows = [(tuple(c.value for c in args), p) for args, p in block.tuples]
        db.add(ProbRelation.from_tuples(block.relation, rows, semantics=CHOICE))
    return db
