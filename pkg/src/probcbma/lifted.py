"""Lifted query processing: UCQ construction, safety checking, plan compilation.

A query over the program's intensional predicates is unfolded into a union of
conjunctive queries (UCQ) over extensional relations, mutually-exclusive
choice atoms are rewritten into the tuple-independent framework, and a safe
UCQ is compiled into a tree of probability-aware relational operators.  The
rule set, applied in a fixed order, is: ground-atom elimination, independent
join, independent union, inclusion-exclusion over disjuncts, and
separator-variable projection.  Queries on which no rule applies get an
`Unsafe` verdict; they are #P-hard in general and only the possible-worlds
oracle can evaluate them (on tiny databases).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Union

from .dsl import (
    And,
    Atom,
    Constant,
    Formula,
    Literal,
    Not,
    Or,
    Query,
    ValidatedProgram,
    Variable,
    to_nnf,
)


class UnsupportedQueryError(Exception):
    """The query falls outside the liftable fragment handled by this engine."""


# ---------------------------------------------------------------------------
# UCQ representation


@dataclass(frozen=True)
class CQ:
    """A conjunction of literals; variables not free in the UCQ are existential."""

    literals: tuple

    def variables(self):
        out = []
        for lit in self.literals:
            for v in lit.atom.variables():
                if v not in out:
                    out.append(v)
        return tuple(out)

    def __repr__(self):
        return " & ".join(map(repr, self.literals))


@dataclass(frozen=True)
class UCQ:
    free: tuple  # tuple[Variable, ...]
    disjuncts: tuple  # tuple[CQ, ...]

    def __repr__(self):
        free = ", ".join(v.name for v in self.free)
        body = "  |  ".join(map(repr, self.disjuncts))
        return f"UCQ[{free}]({body})"


@dataclass(frozen=True)
class Safe:
    plan: "Plan"

    @property
    def is_safe(self):
        return True


@dataclass(frozen=True)
class Unsafe:
    witness: str

    @property
    def is_safe(self):
        return False


SafetyVerdict = Union[Safe, Unsafe]


# ---------------------------------------------------------------------------
# Plan operators


class Plan:
    columns: tuple = ()

    def children_plans(self):
        return ()


@dataclass(frozen=True)
class RelationLeaf(Plan):
    """Scan a relation, filter constant positions, project variable positions."""

    relation: str
    pattern: tuple  # tuple[Term, ...]
    columns: tuple = field(init=False)

    def __post_init__(self):
        cols = []
        for term in self.pattern:
            if isinstance(term, Variable) and term.name not in cols:
                cols.append(term.name)
        object.__setattr__(self, "columns", tuple(cols))

    def __repr__(self):
        return f"Scan[{self.relation}({', '.join(map(repr, self.pattern))})]"


@dataclass(frozen=True)
class GroundLookup(Plan):
    relation: str
    args: tuple

    def __repr__(self):
        return f"GroundLookup[{self.relation}{self.args!r}]"


@dataclass(frozen=True)
class ConstantPlan(Plan):
    value: float

    def __repr__(self):
        return f"Constant[{self.value}]"


@dataclass(frozen=True)
class Complement(Plan):
    child: Plan
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "columns", self.child.columns)

    def children_plans(self):
        return (self.child,)

    def __repr__(self):
        return f"Complement({self.child!r})"


@dataclass(frozen=True)
class Selection(Plan):
    """Keep only rows whose key column equals the given value."""

    child: Plan
    column: str
    value: object
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "columns", tuple(c for c in self.child.columns if c != self.column)
        )

    def children_plans(self):
        return (self.child,)

    def __repr__(self):
        return f"Selection[{self.column}={self.value!r}]({self.child!r})"


@dataclass(frozen=True)
class IndependentJoin(Plan):
    children: tuple
    columns: tuple = field(init=False)

    def __post_init__(self):
        cols = []
        for child in self.children:
            for c in child.columns:
                if c not in cols:
                    cols.append(c)
        object.__setattr__(self, "columns", tuple(cols))

    def children_plans(self):
        return self.children


@dataclass(frozen=True)
class IndependentProject(Plan):
    """Noisy-or aggregation over one variable of an independent sub-query."""

    variable: str
    child: Plan
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "columns", tuple(c for c in self.child.columns if c != self.variable)
        )

    def children_plans(self):
        return (self.child,)


@dataclass(frozen=True)
class ExclusiveSum(Plan):
    """Additive aggregation over the tuple variable of a choice relation."""

    variable: str
    child: Plan
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "columns", tuple(c for c in self.child.columns if c != self.variable)
        )

    def children_plans(self):
        return (self.child,)


@dataclass(frozen=True)
class IndependentUnion(Plan):
    children: tuple
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "columns", self.children[0].columns)

    def children_plans(self):
        return self.children


@dataclass(frozen=True)
class InclusionExclusion(Plan):
    children: tuple
    coefficients: tuple
    columns: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "columns", self.children[0].columns)

    def children_plans(self):
        return self.children


def explain(plan: Plan, indent: int = 0) -> str:
    """Render a plan as an indented textual tree (the ``--explain`` output)."""
    pad = "  " * indent
    name = type(plan).__name__
    if isinstance(plan, (RelationLeaf, GroundLookup, ConstantPlan)):
        return f"{pad}{plan!r}"
    header = pad + name
    if isinstance(plan, (IndependentProject, ExclusiveSum)):
        header += f"[{plan.variable}]"
    elif isinstance(plan, Selection):
        header += f"[{plan.column}={plan.value!r}]"
    elif isinstance(plan, InclusionExclusion):
        header += f"[coefficients={list(plan.coefficients)}]"
    lines = [header]
    for child in plan.children_plans():
        lines.append(explain(child, indent + 1))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Unfolding queries into UCQs


class _FreshNamer:
    def __init__(self, taken):
        self.taken = set(taken)
        self.counter = 0

    def fresh(self, hint: str) -> Variable:
        while True:
            name = f"{hint}_{self.counter}"
            self.counter += 1
            if name not in self.taken:
                self.taken.add(name)
                return Variable(name)


def _used_names(formula: Formula):
    names = set()
    stack = [formula]
    while stack:
        node = stack.pop()
        if isinstance(node, Atom):
            names.update(v.name for v in node.variables())
        elif isinstance(node, Not):
            stack.append(node.child)
        else:
            stack.extend(node.children)
    return names


def _unfold_literal(atom: Atom, negated: bool, program: ValidatedProgram, namer, depth=0):
    """Return a list of literal-conjunctions (DNF) over extensional atoms."""
    if depth > 100:
        raise UnsupportedQueryError("unfolding exceeded depth limit (recursive program?)")
    if atom.predicate not in program.intensional_predicates:
        if negated and atom.predicate in program.choice_relations:
            raise UnsupportedQueryError(
                f"negation of choice atom {atom!r} is not supported"
            )
        return [[Literal(atom, negated)]]

    rules = program.rules_for(atom.predicate)
    if not negated:
        conjunctions = []
        for rule in rules:
            mapping = _head_unifier(rule, atom, namer)
            body_dnf = [[]]
            for body_atom in rule.body:
                sub = _unfold_literal(body_atom.substitute(mapping), False, program, namer, depth + 1)
                body_dnf = [c1 + c2 for c1 in body_dnf for c2 in sub]
            conjunctions.extend(body_dnf)
        return conjunctions

    # Negated intensional atom.  Supported only for the guarded shape
    # H(x) :- Choice(s), Fact(..., s): within a world, exactly one choice
    # tuple holds, so !H is the complement of the guarded fact.  Requires a
    # total choice (probabilities summing to 1).
    if len(rules) != 1:
        raise UnsupportedQueryError(f"cannot negate {atom!r}: multiple defining rules")
    rule = rules[0]
    mapping = _head_unifier(rule, atom, namer)
    body = [a.substitute(mapping) for a in rule.body]
    choice_atoms = [a for a in body if a.predicate in program.choice_relations]
    fact_atoms = [a for a in body if a.predicate not in program.choice_relations]
    if len(choice_atoms) != 1 or len(fact_atoms) != 1:
        raise UnsupportedQueryError(
            f"cannot negate {atom!r}: body is not of the guarded choice+fact shape"
        )
    if fact_atoms[0].predicate in program.intensional_predicates:
        raise UnsupportedQueryError(f"cannot negate {atom!r}: body atom is intensional")
    _require_total_choice(program, choice_atoms[0].predicate)
    return [[Literal(choice_atoms[0], False), Literal(fact_atoms[0], True)]]


def _require_total_choice(program: ValidatedProgram, relation: str):
    for block in program.program.choice_blocks:
        if block.relation == relation:
            total = sum(p for _, p in block.tuples)
            if total < 1.0 - 1e-9:
                raise UnsupportedQueryError(
                    f"negation through {relation!r} requires a total choice "
                    f"(probabilities sum to {total})"
                )
            return
    # Choice data lives outside the program AST (dataset encodings); the
    # encoder guarantees an equiprobable, total choice.


def _head_unifier(rule, atom, namer):
    mapping = {}
    for head_arg, query_arg in zip(rule.head.args, atom.args):
        if isinstance(head_arg, Variable):
            mapping[head_arg] = query_arg
        elif head_arg != query_arg:
            raise UnsupportedQueryError(f"cannot unify {rule.head!r} with {atom!r}")
    for atom_ in rule.body:
        for var in atom_.variables():
            if var not in mapping:
                mapping[var] = namer.fresh(var.name)
    return mapping


def _formula_dnf(formula: Formula, program: ValidatedProgram, namer):
    formula = to_nnf(formula)
    if isinstance(formula, Atom):
        return _unfold_literal(formula, False, program, namer)
    if isinstance(formula, Not):
        return _unfold_literal(formula.child, True, program, namer)
    if isinstance(formula, Or):
        out = []
        for child in formula.children:
            out.extend(_formula_dnf(child, program, namer))
        return out
    if isinstance(formula, And):
        out = [[]]
        for child in formula.children:
            child_dnf = _formula_dnf(child, program, namer)
            out = [c1 + c2 for c1 in out for c2 in child_dnf]
        return out
    raise TypeError(f"not a formula: {formula!r}")


def unfold(formula: Formula, program: ValidatedProgram) -> UCQ:
    """Replace intensional predicates by their definitions; result is a UCQ
    over extensional/probabilistic atoms only."""
    namer = _FreshNamer(_used_names(formula))
    disjuncts = tuple(CQ(tuple(_dedupe(c))) for c in _formula_dnf(formula, program, namer))
    free = []
    for atom in _formula_free_atoms(formula):
        for v in atom.variables():
            if v not in free:
                free.append(v)
    ucq = UCQ(tuple(free), disjuncts)
    _check_well_formed(ucq)
    return ucq


def _formula_free_atoms(formula: Formula):
    if isinstance(formula, Atom):
        yield formula
    elif isinstance(formula, Not):
        yield from _formula_free_atoms(formula.child)
    else:
        for child in formula.children:
            yield from _formula_free_atoms(child)


def unfold_query(query: Query, program: ValidatedProgram):
    """Unfold a query into (numerator UCQ, denominator UCQ or None)."""
    if query.condition is None:
        return unfold(query.target, program), None
    numerator = unfold(And((query.target, query.condition)), program)
    denominator = unfold(query.condition, program)
    return numerator, denominator


def _dedupe(literals):
    seen = set()
    out = []
    for lit in literals:
        if lit not in seen:
            seen.add(lit)
            out.append(lit)
    return out


def _check_well_formed(ucq: UCQ):
    free = set(ucq.free)
    for cq in ucq.disjuncts:
        positive_vars = {
            v for lit in cq.literals if not lit.negated for v in lit.atom.variables()
        }
        all_vars = {v for lit in cq.literals for v in lit.atom.variables()}
        unbound = all_vars - positive_vars
        if unbound:
            raise UnsupportedQueryError(
                f"variables {sorted(v.name for v in unbound)} occur only in negated "
                f"literals of {cq!r}"
            )
        missing = free - all_vars
        if missing:
            raise UnsupportedQueryError(
                f"free variables {sorted(v.name for v in missing)} missing from {cq!r}"
            )


# ---------------------------------------------------------------------------
# Choice-exclusivity rewrite


def rewrite_choices(ucq: UCQ, schema: dict) -> UCQ:
    """Unify repeated occurrences of a choice relation within each CQ.

    Two distinct tuples of a choice group never co-occur in a world, so
    repeated choice atoms must describe the same tuple; conjunctions forcing
    two different ground tuples are unsatisfiable and are dropped.
    """
    free = set(ucq.free)
    out = []
    for cq in ucq.disjuncts:
        rewritten = _rewrite_cq(cq, schema, free)
        if rewritten is not None:
            out.append(rewritten)
    return UCQ(ucq.free, tuple(out))


def _rewrite_cq(cq: CQ, schema: dict, free: set) -> Optional[CQ]:
    literals = list(cq.literals)
    changed = True
    while changed:
        changed = False
        by_choice = {}
        for lit in literals:
            info = schema.get(lit.atom.predicate)
            if info is not None and info[1]:
                by_choice.setdefault(lit.atom.predicate, []).append(lit)
        for lits in by_choice.values():
            if len(lits) < 2:
                continue
            mapping = _unify_atoms(lits[0].atom, lits[1].atom, free)
            if mapping is None:
                return None  # two distinct exclusive tuples: unsatisfiable
            literals = _dedupe(lit.substitute(mapping) for lit in literals)
            changed = True
            break
    return CQ(tuple(literals))


def _unify_atoms(a: Atom, b: Atom, free: set) -> Optional[dict]:
    mapping = {}

    def resolve(term):
        while term in mapping:
            term = mapping[term]
        return term

    for x, y in zip(a.args, b.args):
        x, y = resolve(x), resolve(y)
        if x == y:
            continue
        if isinstance(x, Constant) and isinstance(y, Constant):
            return None
        if isinstance(x, Variable) and x not in free:
            mapping[x] = y
        elif isinstance(y, Variable) and y not in free:
            mapping[y] = x
        else:
            raise UnsupportedQueryError(
                f"cannot unify choice atoms {a!r} and {b!r} on free variables"
            )
    return {k: resolve(k) for k in mapping}


# ---------------------------------------------------------------------------
# Canonicalization (verdict stability under renaming/reordering)


def canonical_ucq(ucq: UCQ) -> UCQ:
    """Order literals and disjuncts, and number variables, canonically."""
    free_order = {v: i for i, v in enumerate(ucq.free)}

    def literal_key(lit):
        kinds = tuple(
            ("c", repr(a.value)) if isinstance(a, Constant)
            else ("f", free_order[a]) if a in free_order
            else ("v",)
            for a in lit.atom.args
        )
        return (lit.atom.predicate, lit.negated, kinds)

    new_disjuncts = []
    for cq in ucq.disjuncts:
        ordered = sorted(cq.literals, key=literal_key)
        mapping = {}
        for lit in ordered:
            for v in lit.atom.variables():
                if v not in free_order and v not in mapping:
                    mapping[v] = Variable(f"_x{len(mapping)}")
        renamed = tuple(lit.substitute(mapping) for lit in ordered)
        new_disjuncts.append(CQ(tuple(sorted(renamed, key=lambda l: (literal_key(l), repr(l))))))
    unique = []
    for cq in sorted(new_disjuncts, key=repr):
        if cq not in unique:
            unique.append(cq)
    return UCQ(ucq.free, tuple(unique))


# ---------------------------------------------------------------------------
# Safety checking and compilation


def check_safety(ucq: UCQ, schema: Optional[dict] = None) -> SafetyVerdict:
    """Classify a UCQ as liftable (`Safe`, with a plan) or `Unsafe`.

    ``schema`` supplies arities and choice semantics; without it every
    relation is treated as tuple-independent.
    """
    try:
        return Safe(compile_ucq(ucq, schema or {}))
    except UnsupportedQueryError as err:
        return Unsafe(str(err))


def compile_ucq(ucq: UCQ, schema: dict) -> Plan:
    """Compile a safe UCQ into an extensional plan; raises
    `UnsupportedQueryError` when the rule set does not apply."""
    _check_well_formed(ucq)
    ucq = canonical_ucq(ucq)
    ucq = rewrite_choices(ucq, schema)
    if not ucq.disjuncts:
        return ConstantPlan(0.0)
    return _lift_disjuncts(list(ucq.disjuncts), frozenset(ucq.free), schema)


def _lift_disjuncts(disjuncts, free, schema):
    disjuncts = list(dict.fromkeys(disjuncts))
    if len(disjuncts) == 1:
        return _lift_cq(disjuncts[0], free, schema)

    # Independent union over groups of disjuncts sharing no relation symbol.
    groups = _symbol_components(disjuncts)
    if len(groups) > 1:
        children = tuple(_lift_disjuncts(g, free, schema) for g in groups)
        return IndependentUnion(children)

    # Inclusion-exclusion over the disjunct powerset.
    children = []
    coefficients = []
    for size in range(1, len(disjuncts) + 1):
        for subset in itertools.combinations(range(len(disjuncts)), size):
            merged = _merge_cqs([disjuncts[i] for i in subset], free)
            merged = _rewrite_cq(merged, schema, free)
            if merged is None:
                continue  # unsatisfiable conjunction contributes 0
            plan = _lift_cq(merged, free, schema)
            if isinstance(plan, ConstantPlan) and plan.value == 0.0:
                continue
            children.append(plan)
            coefficients.append(1 if size % 2 == 1 else -1)
    if not children:
        return ConstantPlan(0.0)
    return InclusionExclusion(tuple(children), tuple(coefficients))


def _merge_cqs(cqs, free):
    """Conjoin CQs with existential variables standardized apart."""
    taken = {v.name for v in free}
    for cq in cqs:
        taken |= {v.name for v in cq.variables()}
    namer = _FreshNamer(taken)
    literals = []
    for cq in cqs:
        mapping = {
            v: namer.fresh(v.name) for v in cq.variables() if v not in free
        }
        literals.extend(lit.substitute(mapping) for lit in cq.literals)
    return CQ(tuple(_dedupe(literals)))


def _symbol_components(disjuncts):
    symbols = [frozenset(l.atom.predicate for l in cq.literals) for cq in disjuncts]
    n = len(disjuncts)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if symbols[i] & symbols[j]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(disjuncts[i])
    return list(groups.values())


def _lift_cq(cq: CQ, free, schema) -> Plan:
    literals = _dedupe(cq.literals)

    # Contradictory pair: an atom asserted and denied.
    atoms = {lit.atom for lit in literals if not lit.negated}
    if any(lit.negated and lit.atom in atoms for lit in literals):
        return ConstantPlan(0.0)

    if not literals:
        return ConstantPlan(1.0)

    # Ground-atom elimination: a fully ground literal whose relation cannot
    # produce the same tuple as any other literal is an independent factor.
    ground, rest = [], []
    for lit in literals:
        if lit.atom.is_ground() and not any(
            other is not lit
            and other.atom.predicate == lit.atom.predicate
            and _patterns_unifiable(other.atom, lit.atom)
            for other in literals
        ):
            ground.append(lit)
        else:
            rest.append(lit)
    if ground and rest:
        factors = [_leaf_plan(lit, schema) for lit in ground]
        factors.append(_lift_cq(CQ(tuple(rest)), free, schema))
        return IndependentJoin(tuple(factors))
    if ground and not rest:
        if len(ground) == 1:
            return _leaf_plan(ground[0], schema)
        return IndependentJoin(tuple(_leaf_plan(lit, schema) for lit in ground))

    # Independent join over components that share neither an existential
    # variable nor a potentially overlapping relation pattern.
    components = _dependence_components(literals, free)
    if len(components) > 1:
        children = tuple(_lift_cq(CQ(tuple(c)), free, schema) for c in components)
        return IndependentJoin(children)

    existentials = {
        v for lit in literals for v in lit.atom.variables() if v not in free
    }
    if not existentials:
        # Base case: all variables are free; independent leaves joined per key.
        self_conflicts = _self_join_conflicts(literals)
        if self_conflicts:
            raise UnsupportedQueryError(
                f"self-join on {self_conflicts!r} is not liftable by this rule set: {cq!r}"
            )
        if len(literals) == 1:
            return _leaf_plan(literals[0], schema)
        return IndependentJoin(tuple(_leaf_plan(lit, schema) for lit in literals))

    separator = _find_separator(literals, existentials)
    if separator is None:
        raise UnsupportedQueryError(f"no separator variable in {cq!r}")
    child = _lift_cq(cq, frozenset(free | {separator}), schema)
    if any(
        schema.get(lit.atom.predicate, (None, False))[1]
        and separator in lit.atom.variables()
        for lit in literals
    ):
        return ExclusiveSum(separator.name, child)
    return IndependentProject(separator.name, child)


def _leaf_plan(lit: Literal, schema) -> Plan:
    atom = lit.atom
    if atom.is_ground():
        base = GroundLookup(atom.predicate, tuple(a.value for a in atom.args))
    else:
        base = RelationLeaf(atom.predicate, atom.args)
    return Complement(base) if lit.negated else base


def _patterns_unifiable(a: Atom, b: Atom) -> bool:
    if a.predicate != b.predicate or len(a.args) != len(b.args):
        return False
    for x, y in zip(a.args, b.args):
        if isinstance(x, Constant) and isinstance(y, Constant) and x != y:
            return False
    return True


def _dependence_components(literals, free):
    n = len(literals)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    existential_vars = [
        {v for v in lit.atom.variables() if v not in free} for lit in literals
    ]
    for i in range(n):
        for j in range(i + 1, n):
            if existential_vars[i] & existential_vars[j] or (
                literals[i].atom.predicate == literals[j].atom.predicate
                and _patterns_unifiable(literals[i].atom, literals[j].atom)
            ):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(literals[i])
    return list(groups.values())


def _self_join_conflicts(literals):
    for i, a in enumerate(literals):
        for b in literals[i + 1:]:
            if a.atom.predicate == b.atom.predicate and _patterns_unifiable(a.atom, b.atom):
                return a.atom.predicate
    return None


def _find_separator(literals, existentials) -> Optional[Variable]:
    candidates = []
    for var in sorted(existentials, key=lambda v: v.name):
        if not all(var in lit.atom.variables() for lit in literals):
            continue
        positions = {}
        ok = True
        for lit in literals:
            occurrences = {i for i, a in enumerate(lit.atom.args) if a == var}
            pred = lit.atom.predicate
            if pred in positions:
                positions[pred] &= occurrences
                if not positions[pred]:
                    ok = False
                    break
            else:
                positions[pred] = occurrences
        if ok:
            candidates.append(var)
    return candidates[0] if candidates else None
