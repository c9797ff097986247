"""Brute-force possible-worlds enumeration; ground truth for engine tests.

Exponential in the number of uncertain tuples, so capped; tuples with
probability exactly 0 or 1 are deterministic and not enumerated.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterator

from .dsl import Constant, Variable
from .lifted import UCQ
from .probdb import CHOICE, ProbDatabase
from .ra import ProbTable

WORLD_CAP = 1 << 20
_RESIDUAL_TOLERANCE = 1e-12


class TooLargeError(Exception):
    """The database has too many uncertain tuples to enumerate."""


def _world_space(db: ProbDatabase):
    """Split the database into always-present facts, independent uncertain
    tuples, and choice groups (with their residual no-tuple probability)."""
    base = {}
    independent = []  # (relation, args, p)
    groups = []  # (relation, [(args, p), ...], residual)
    for rel in db.relations.values():
        present = base.setdefault(rel.name, set())
        if rel.semantics == CHOICE:
            tuples = [(args, p) for args, p in rel.tuples() if p > 0.0]
            residual = 1.0 - math.fsum(p for _, p in tuples)
            groups.append((rel.name, tuples, residual))
        else:
            for args, p in rel.tuples():
                if p >= 1.0:
                    present.add(args)
                elif p > 0.0:
                    independent.append((rel.name, args, p))
    return base, independent, groups


def count_worlds(db: ProbDatabase) -> int:
    _, independent, groups = _world_space(db)
    count = 2 ** len(independent)
    for _, tuples, _ in groups:
        count *= len(tuples) + 1
    return count


def enumerate_worlds(db: ProbDatabase, cap: int = WORLD_CAP) -> Iterator[tuple]:
    """Yield ``(facts, weight)`` pairs; ``facts`` maps relation name to the
    set of tuples holding in that world.  Weights sum to one."""
    base, independent, groups = _world_space(db)
    if count_worlds(db) > cap:
        raise TooLargeError(
            f"{count_worlds(db)} possible worlds exceed the cap of {cap}"
        )

    group_options = []
    for name, tuples, residual in groups:
        options = [((name, args), p) for args, p in tuples]
        if residual > _RESIDUAL_TOLERANCE:
            options.append((None, residual))
        group_options.append(options)

    ind_options = [
        (((name, args), p), (None, 1.0 - p)) for name, args, p in independent
    ]

    for ind_pick in itertools.product(*ind_options):
        for group_pick in itertools.product(*group_options):
            weight = 1.0
            facts = {name: set(args_set) for name, args_set in base.items()}
            for selected, p in itertools.chain(ind_pick, group_pick):
                weight *= p
                if selected is not None:
                    name, args = selected
                    facts.setdefault(name, set()).add(args)
            yield facts, weight


def _cq_bindings(cq, facts, free):
    """Set of free-variable bindings under which the CQ holds in a world."""
    positives = sorted(
        (lit for lit in cq.literals if not lit.negated),
        key=lambda lit: len(facts.get(lit.atom.predicate, ())),
    )
    negatives = [lit for lit in cq.literals if lit.negated]
    results = set()

    def ground_ok(binding):
        for lit in negatives:
            args = tuple(
                binding[a] if isinstance(a, Variable) else a.value
                for a in lit.atom.args
            )
            if args in facts.get(lit.atom.predicate, ()):
                return False
        return True

    def match(i, binding):
        if i == len(positives):
            if ground_ok(binding):
                results.add(tuple(binding[v] for v in free))
            return
        atom = positives[i].atom
        for row in facts.get(atom.predicate, ()):
            new = dict(binding)
            ok = True
            for term, value in zip(atom.args, row):
                if isinstance(term, Constant):
                    if term.value != value:
                        ok = False
                        break
                elif term in new:
                    if new[term] != value:
                        ok = False
                        break
                else:
                    new[term] = value
            if ok:
                match(i + 1, new)

    match(0, {})
    return results


def oracle_prob(ucq: UCQ, db: ProbDatabase, cap: int = WORLD_CAP) -> ProbTable:
    """Exact query probability by weighted enumeration of possible worlds."""
    free = tuple(ucq.free)
    totals = {}
    for facts, weight in enumerate_worlds(db, cap):
        bindings = set()
        for cq in ucq.disjuncts:
            bindings |= _cq_bindings(cq, facts, free)
        for binding in bindings:
            totals[binding] = totals.get(binding, 0.0) + weight
    columns = tuple(v.name for v in free)
    if not columns:
        return ProbTable.scalar(totals.get((), 0.0))
    return ProbTable.from_pairs(columns, sorted(totals.items()))
