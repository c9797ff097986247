"""Execution of extensional plans over probabilistic relations.

Tables are pandas frames with one column per free variable plus a ``p``
column.  Operator semantics: independent join multiplies probabilities on the
natural join, independent project is a per-group noisy-or, exclusive sum adds
the probabilities of a choice group, union is a noisy-or on outer-joined
keys, complement flips ``p`` to ``1 - p``, and missing keys mean probability
zero (closed world).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional

import numpy as np
import pandas as pd

from .lifted import (
    Complement,
    ConstantPlan,
    ExclusiveSum,
    GroundLookup,
    InclusionExclusion,
    IndependentJoin,
    IndependentProject,
    IndependentUnion,
    Plan,
    RelationLeaf,
    Selection,
)
from .probdb import ProbDatabase

ZERO_CONDITION_THRESHOLD = 1e-15

# Below this many rows, group sums use math.fsum (exact); above, a numpy
# groupby whose sequential accumulation error stays far below 1e-9 at
# meta-analysis scale.
_EXACT_SUM_ROWS = 100_000


class PlanExecutionError(Exception):
    pass


class ZeroConditionError(Exception):
    """The conditioning event has (numerically) zero probability: no studies
    match the condition."""


@dataclass
class ProbTable:
    """Key columns plus a probability column, keys unique."""

    columns: tuple
    frame: pd.DataFrame  # columns == [*self.columns, "p"]

    @classmethod
    def scalar(cls, p: float) -> "ProbTable":
        return cls((), pd.DataFrame({"p": [float(p)]}))

    @classmethod
    def from_pairs(cls, columns, pairs) -> "ProbTable":
        """Build from ``(key_tuple, p)`` pairs."""
        columns = tuple(columns)
        data = {c: [] for c in columns}
        probs = []
        for key, p in pairs:
            for c, v in zip(columns, key):
                data[c].append(v)
            probs.append(p)
        frame = pd.DataFrame({**data, "p": np.asarray(probs, dtype=float)})
        return cls(columns, frame)

    @property
    def is_scalar(self):
        return not self.columns

    def scalar_value(self) -> float:
        if self.columns:
            raise PlanExecutionError(f"table keyed by {self.columns} is not a scalar")
        if len(self.frame) == 0:
            return 0.0
        return float(self.frame["p"].iloc[0])

    def lookup(self, key, default=0.0) -> float:
        if not isinstance(key, tuple):
            key = (key,)
        mask = np.ones(len(self.frame), dtype=bool)
        for c, v in zip(self.columns, key):
            mask &= (self.frame[c] == v).to_numpy()
        hits = self.frame["p"].to_numpy()[mask]
        if hits.size == 0:
            return default
        return float(hits[0])

    def to_dict(self) -> dict:
        return {
            tuple(row[c] for c in self.columns): row["p"]
            for _, row in self.frame.iterrows()
        }

    def sorted(self) -> "ProbTable":
        if not self.columns:
            return self
        frame = self.frame.sort_values(list(self.columns), kind="mergesort")
        return ProbTable(self.columns, frame.reset_index(drop=True))

    def to_tsv(self, path_or_buffer) -> None:
        self.sorted().frame.to_csv(
            path_or_buffer, sep="\t", index=False, float_format="%.17g"
        )

    def __len__(self):
        return len(self.frame)


def _group_sum(frame: pd.DataFrame, keys) -> pd.DataFrame:
    if not keys:
        values = frame["p"].to_numpy()
        total = math.fsum(values.tolist()) if len(values) <= _EXACT_SUM_ROWS else float(
            values.sum()
        )
        return pd.DataFrame({"p": [total]})
    if len(frame) <= _EXACT_SUM_ROWS:
        grouped = frame.groupby(list(keys), sort=False)["p"].agg(
            lambda s: math.fsum(s.tolist())
        )
    else:
        grouped = frame.groupby(list(keys), sort=False)["p"].sum()
    return grouped.reset_index()


def _group_noisy_or(frame: pd.DataFrame, keys) -> pd.DataFrame:
    # 1 - prod(1 - p) computed in log space for precision.
    work = frame.copy()
    with np.errstate(divide="ignore"):
        work["_log1m"] = np.log1p(-work["p"].to_numpy())
    if not keys:
        total = work["_log1m"].sum()
        return pd.DataFrame({"p": [-np.expm1(total)]})
    grouped = work.groupby(list(keys), sort=False)["_log1m"].sum().reset_index()
    grouped["p"] = -np.expm1(grouped["_log1m"].to_numpy())
    return grouped.drop(columns="_log1m")


def _clip(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.copy()
    frame["p"] = frame["p"].clip(0.0, 1.0)
    return frame


def _leaf_frame(db: ProbDatabase, relation: str, arity: int) -> pd.DataFrame:
    if relation in db:
        rel = db[relation]
        if rel.arity != arity:
            raise PlanExecutionError(
                f"plan expects {relation!r} with arity {arity}, database has {rel.arity}"
            )
        return rel.frame
    return pd.DataFrame({**{f"c{i}": [] for i in range(arity)}, "p": []})


def _evaluate_leaf(plan: RelationLeaf, db: ProbDatabase) -> ProbTable:
    from .dsl import Constant, Variable

    frame = _leaf_frame(db, plan.relation, len(plan.pattern))
    mask = None
    first_position = {}
    for i, term in enumerate(plan.pattern):
        if isinstance(term, Constant):
            cond = frame[f"c{i}"] == term.value
        elif term.name in first_position:
            cond = frame[f"c{i}"] == frame[f"c{first_position[term.name]}"]
        else:
            first_position[term.name] = i
            continue
        mask = cond if mask is None else (mask & cond)
    if mask is not None:
        frame = frame[mask]
    out = pd.DataFrame(
        {name: frame[f"c{i}"].to_numpy() for name, i in first_position.items()}
    )
    out["p"] = frame["p"].to_numpy()
    return ProbTable(tuple(first_position), out)


def _evaluate_ground(plan: GroundLookup, db: ProbDatabase) -> ProbTable:
    frame = _leaf_frame(db, plan.relation, len(plan.args))
    mask = np.ones(len(frame), dtype=bool)
    for i, value in enumerate(plan.args):
        mask &= (frame[f"c{i}"] == value).to_numpy()
    hits = frame["p"].to_numpy()[mask]
    return ProbTable.scalar(float(hits[0]) if hits.size else 0.0)


def _merge_tables(tables) -> ProbTable:
    tables = sorted(tables, key=lambda t: len(t.columns), reverse=True)
    result = tables[0]
    for other in tables[1:]:
        shared = [c for c in result.columns if c in other.columns]
        if shared:
            merged = result.frame.merge(
                other.frame, on=shared, how="inner", suffixes=("", "_r")
            )
        else:
            merged = result.frame.merge(other.frame, how="cross", suffixes=("", "_r"))
        merged["p"] = merged["p"].to_numpy() * merged["p_r"].to_numpy()
        merged = merged.drop(columns="p_r")
        columns = tuple(dict.fromkeys(result.columns + other.columns))
        result = ProbTable(columns, merged[list(columns) + ["p"]])
    return result


def _evaluate_join(plan: IndependentJoin, db: ProbDatabase) -> ProbTable:
    scalars = []
    tables = []
    probes = []
    for child in plan.children:
        if isinstance(child, Complement) and child.columns:
            probes.append(child)
            continue
        table = evaluate(child, db)
        if table.is_scalar:
            scalars.append(table.scalar_value())
        else:
            tables.append(table)

    if not tables:
        if probes:
            raise PlanExecutionError("negated literals cannot drive a join on their own")
        return ProbTable.scalar(math.prod(scalars))

    result = _merge_tables(tables)
    for probe in probes:
        leaf = evaluate(probe.child, db)
        if not set(leaf.columns) <= set(result.columns):
            raise PlanExecutionError(
                f"complement over {leaf.columns} not covered by join keys {result.columns}"
            )
        merged = result.frame.merge(
            leaf.frame.rename(columns={"p": "_p_neg"}),
            on=list(leaf.columns),
            how="left",
        )
        neg = merged["_p_neg"].fillna(0.0).to_numpy()
        merged["p"] = merged["p"].to_numpy() * (1.0 - neg)
        result = ProbTable(result.columns, merged[list(result.columns) + ["p"]])
    if scalars:
        factor = math.prod(scalars)
        frame = result.frame.copy()
        frame["p"] = frame["p"].to_numpy() * factor
        result = ProbTable(result.columns, frame)
    return result


def _align_children(tables) -> tuple:
    columns = tables[0].columns
    for t in tables[1:]:
        if set(t.columns) != set(columns):
            raise PlanExecutionError(
                f"union/sum children keyed differently: {t.columns} vs {columns}"
            )
    if not columns:
        return columns, [t.scalar_value() for t in tables]
    frames = []
    for i, t in enumerate(tables):
        f = t.frame[list(columns) + ["p"]].rename(columns={"p": f"p{i}"})
        frames.append(f)
    merged = reduce(lambda a, b: a.merge(b, on=list(columns), how="outer"), frames)
    probs = [merged[f"p{i}"].fillna(0.0).to_numpy() for i in range(len(tables))]
    return columns, (merged, probs)


def evaluate(plan: Plan, db: ProbDatabase) -> ProbTable:
    """Evaluate a compiled plan, returning exact query probabilities."""
    if isinstance(plan, ConstantPlan):
        return ProbTable.scalar(plan.value)
    if isinstance(plan, RelationLeaf):
        return _evaluate_leaf(plan, db)
    if isinstance(plan, GroundLookup):
        return _evaluate_ground(plan, db)
    if isinstance(plan, Complement):
        child = evaluate(plan.child, db)
        if child.columns:
            raise PlanExecutionError(
                "complement of a keyed table must be applied inside a join"
            )
        return ProbTable.scalar(1.0 - child.scalar_value())
    if isinstance(plan, Selection):
        child = evaluate(plan.child, db)
        if plan.column not in child.columns:
            raise PlanExecutionError(f"selection on unknown column {plan.column!r}")
        frame = child.frame[child.frame[plan.column] == plan.value]
        remaining = tuple(c for c in child.columns if c != plan.column)
        return ProbTable(remaining, frame[list(remaining) + ["p"]])
    if isinstance(plan, IndependentJoin):
        return _evaluate_join(plan, db)
    if isinstance(plan, IndependentProject):
        child = evaluate(plan.child, db)
        keys = [c for c in child.columns if c != plan.variable]
        out = _clip(_group_noisy_or(child.frame, keys))
        return ProbTable(tuple(keys), out)
    if isinstance(plan, ExclusiveSum):
        child = evaluate(plan.child, db)
        keys = [c for c in child.columns if c != plan.variable]
        out = _clip(_group_sum(child.frame, keys))
        return ProbTable(tuple(keys), out)
    if isinstance(plan, IndependentUnion):
        tables = [evaluate(c, db) for c in plan.children]
        columns, aligned = _align_children(tables)
        if not columns:
            p = 1.0
            for value in aligned:
                p *= 1.0 - value
            return ProbTable.scalar(1.0 - p)
        merged, probs = aligned
        complement = np.ones(len(merged))
        for p in probs:
            complement *= 1.0 - p
        merged["p"] = 1.0 - complement
        return ProbTable(columns, _clip(merged[list(columns) + ["p"]]))
    if isinstance(plan, InclusionExclusion):
        tables = [evaluate(c, db) for c in plan.children]
        columns, aligned = _align_children(tables)
        if not columns:
            total = math.fsum(
                coef * value for coef, value in zip(plan.coefficients, aligned)
            )
            return ProbTable.scalar(min(1.0, max(0.0, total)))
        merged, probs = aligned
        total = np.zeros(len(merged))
        for coef, p in zip(plan.coefficients, probs):
            total += coef * p
        merged["p"] = total
        return ProbTable(columns, _clip(merged[list(columns) + ["p"]]))
    raise PlanExecutionError(f"unknown plan node {plan!r}")


def conditional(numerator: ProbTable, denominator: float) -> ProbTable:
    """Per-key ratio ``numerator / denominator`` clamped to [0, 1].

    Raises `ZeroConditionError` when the denominator is numerically zero,
    i.e. no studies match the conditioning formula.
    """
    if denominator <= ZERO_CONDITION_THRESHOLD:
        raise ZeroConditionError(
            f"condition probability {denominator!r} is zero: no studies match"
        )
    frame = numerator.frame.copy()
    frame["p"] = np.clip(frame["p"].to_numpy() / denominator, 0.0, 1.0)
    return ProbTable(numerator.columns, frame)
