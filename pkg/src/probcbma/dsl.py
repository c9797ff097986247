"""Restricted CP-Logic dialect: AST, parser, validator, pretty-printer.

The language has three statement forms (files use the ``.npl`` extension,
``%`` starts a comment):

    Activation(v) :- SelectedStudy(s), VoxelReported(v, s).
    0.9::TermInStudy(insula, s1).
    0.5::SelectedStudy(s1); 0.5::SelectedStudy(s2).

Conventions: inside deterministic rules, bare identifiers are variables and
quoted strings / numbers are constants.  Probabilistic facts and choices are
ground, so their bare identifiers are constants.  A bodiless, probability-less
statement (``VoxelReported(v1, s1).``) is a deterministic ground fact
(probability 1).
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

CHOICE_SUM_TOLERANCE = 1e-9


class DslError(Exception):
    """Base class for parse/validation errors."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{message} (line {line}, column {col})"
        super().__init__(message)


class ParseError(DslError):
    pass


class ProgramError(DslError):
    """Structural problem detected while assembling a program."""


class CycleError(ProgramError):
    """Recursive rules are not allowed; names the offending cycle."""

    def __init__(self, cycle):
        self.cycle = tuple(cycle)
        super().__init__(f"recursive rules are not permitted: cycle {' -> '.join(self.cycle)}")


class UnsafeVariableError(ProgramError):
    """A head variable does not occur in the rule body."""

    def __init__(self, variable, rule):
        self.variable = variable
        super().__init__(f"head variable {variable!r} does not occur in the body of {rule}")


class ChoiceSumError(ProgramError):
    """Probabilities of a choice block sum to more than one."""

    def __init__(self, relation, total):
        self.relation = relation
        self.total = total
        super().__init__(f"choice probabilities for {relation!r} sum to {total!r} > 1")


# ---------------------------------------------------------------------------
# Terms, atoms, rules


@dataclass(frozen=True, order=True)
class Variable:
    name: str

    def __repr__(self):
        return self.name


@dataclass(frozen=True, order=True)
class Constant:
    value: Union[str, int, float]

    def __repr__(self):
        return repr(self.value)


Term = Union[Variable, Constant]


@dataclass(frozen=True, order=True)
class Atom:
    predicate: str
    args: tuple = ()

    def __repr__(self):
        if not self.args:
            return self.predicate
        return f"{self.predicate}({', '.join(map(repr, self.args))})"

    @property
    def arity(self):
        return len(self.args)

    def variables(self):
        return tuple(a for a in self.args if isinstance(a, Variable))

    def is_ground(self):
        return all(isinstance(a, Constant) for a in self.args)

    def substitute(self, mapping: dict) -> "Atom":
        return Atom(self.predicate, tuple(mapping.get(a, a) for a in self.args))


@dataclass(frozen=True)
class Literal:
    """An atom, possibly negated (negation is only meaningful in queries)."""

    atom: Atom
    negated: bool = False

    def __repr__(self):
        return ("!" if self.negated else "") + repr(self.atom)

    def substitute(self, mapping) -> "Literal":
        return Literal(self.atom.substitute(mapping), self.negated)


@dataclass(frozen=True)
class DeterministicRule:
    head: Atom
    body: tuple  # tuple[Atom, ...], positive conjunction
    location: Optional[tuple] = field(default=None, compare=False)

    def __repr__(self):
        return f"{self.head!r} :- {', '.join(map(repr, self.body))}."


@dataclass(frozen=True)
class ProbabilisticFactBlock:
    relation: str
    tuples: tuple  # tuple[(args: tuple[Constant, ...], p: float), ...]
    location: Optional[tuple] = field(default=None, compare=False)


@dataclass(frozen=True)
class ProbabilisticChoiceBlock:
    relation: str
    tuples: tuple
    location: Optional[tuple] = field(default=None, compare=False)


@dataclass(frozen=True)
class Program:
    rules: tuple = ()
    fact_blocks: tuple = ()
    choice_blocks: tuple = ()

    @property
    def intensional_predicates(self):
        return {r.head.predicate for r in self.rules}

    @property
    def extensional_relations(self):
        out = {b.relation for b in self.fact_blocks}
        out |= {b.relation for b in self.choice_blocks}
        return out

    def rules_for(self, predicate):
        return tuple(r for r in self.rules if r.head.predicate == predicate)


@dataclass(frozen=True)
class ValidatedProgram:
    """A program that passed `validate_program`, with derived indexes."""

    program: Program
    arities: dict
    choice_relations: frozenset

    @property
    def rules(self):
        return self.program.rules

    def rules_for(self, predicate):
        return self.program.rules_for(predicate)

    @property
    def intensional_predicates(self):
        return self.program.intensional_predicates


# ---------------------------------------------------------------------------
# Boolean condition formulas (query language)


@dataclass(frozen=True)
class And:
    children: tuple

    def __repr__(self):
        return "(" + " & ".join(map(repr, self.children)) + ")"


@dataclass(frozen=True)
class Or:
    children: tuple

    def __repr__(self):
        return "(" + " | ".join(map(repr, self.children)) + ")"


@dataclass(frozen=True)
class Not:
    child: "Formula"

    def __repr__(self):
        return f"!{self.child!r}"


Formula = Union[And, Or, Not, Atom]

SUCC = "SUCC"
CONDITIONAL = "CONDITIONAL"


@dataclass(frozen=True)
class Query:
    """A SUCC query ``P[target]`` or conditional ``P[target | condition]``.

    The target atom has at most one free variable; the condition, when
    present, is a boolean combination of ground atoms.
    """

    target: Atom
    condition: Optional[Formula] = None

    @property
    def kind(self):
        return SUCC if self.condition is None else CONDITIONAL

    def __repr__(self):
        if self.condition is None:
            return f"P[{self.target!r}]"
        return f"P[{self.target!r} | {self.condition!r}]"


def formula_atoms(formula: Formula) -> Iterator[Atom]:
    if isinstance(formula, Atom):
        yield formula
    elif isinstance(formula, Not):
        yield from formula_atoms(formula.child)
    else:
        for child in formula.children:
            yield from formula_atoms(child)


def to_nnf(formula: Formula, negated=False) -> Formula:
    """Push negations down to the atoms."""
    if isinstance(formula, Atom):
        return Not(formula) if negated else formula
    if isinstance(formula, Not):
        return to_nnf(formula.child, not negated)
    children = tuple(to_nnf(c, negated) for c in formula.children)
    if isinstance(formula, And):
        return Or(children) if negated else And(children)
    return And(children) if negated else Or(children)


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>%[^\n]*)
  | (?P<number>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<rulearrow>:-)
  | (?P<probsep>::)
  | (?P<punct>[().,;|&!])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind, text=None) -> _Token:
        tok = self.current
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            raise ParseError(f"expected {want!r}, found {tok.text!r}", tok.line, tok.col)
        return self.advance()

    def at(self, kind, text=None) -> bool:
        tok = self.current
        return tok.kind == kind and (text is None or tok.text == text)

    def error(self, message):
        raise ParseError(message, self.current.line, self.current.col)

    # -- shared pieces ------------------------------------------------

    def parse_number(self) -> float:
        tok = self.expect("number")
        value = float(tok.text)
        return value

    def parse_term(self, ground: bool) -> Term:
        tok = self.current
        if tok.kind == "ident":
            self.advance()
            name = sys.intern(tok.text)
            return Constant(name) if ground else Variable(name)
        if tok.kind == "string":
            self.advance()
            return Constant(sys.intern(_unquote(tok.text)))
        if tok.kind == "number":
            self.advance()
            return Constant(_as_number(tok.text))
        self.error(f"expected a term, found {tok.text!r}")

    def parse_atom(self, ground: bool) -> Atom:
        name_tok = self.expect("ident")
        args = []
        if self.at("punct", "("):
            self.advance()
            while True:
                args.append(self.parse_term(ground))
                if self.at("punct", ","):
                    self.advance()
                    continue
                break
            self.expect("punct", ")")
        return Atom(sys.intern(name_tok.text), tuple(args))

    # -- statements ---------------------------------------------------

    def parse_statement(self):
        start = self.current
        if start.kind == "number":
            return self.parse_probabilistic(start)
        head = self.parse_atom(ground=False)
        if self.at("rulearrow"):
            self.advance()
            body = [self.parse_atom(ground=False)]
            while self.at("punct", ","):
                self.advance()
                body.append(self.parse_atom(ground=False))
            self.expect("punct", ".")
            return DeterministicRule(head, tuple(body), (start.line, start.col))
        # Bodiless statement: a deterministic ground fact.
        self.expect("punct", ".")
        fact = _reground(head)
        return ("fact", fact.predicate, fact.args, 1.0, (start.line, start.col))

    def parse_probabilistic(self, start):
        entries = []
        while True:
            tok = self.current
            p = self.parse_number()
            if not 0.0 <= p <= 1.0:
                raise ParseError(f"probability {p!r} outside [0, 1]", tok.line, tok.col)
            self.expect("probsep")
            atom = self.parse_atom(ground=True)
            entries.append((atom, p))
            if self.at("punct", ";"):
                self.advance()
                continue
            break
        if self.at("rulearrow"):
            # Probabilistic rules must have a true body.
            self.advance()
            tok = self.expect("ident")
            if tok.text != "true":
                raise ParseError(
                    "probabilistic rules only support the body 'true'", tok.line, tok.col
                )
        self.expect("punct", ".")
        loc = (start.line, start.col)
        if len(entries) == 1:
            atom, p = entries[0]
            return ("fact", atom.predicate, atom.args, p, loc)
        return ("choice", entries, loc)

    # -- queries --------------------------------------------------------

    def parse_query(self, default_predicate) -> Query:
        target = self.parse_atom(ground=False)
        condition = None
        if self.at("punct", "|"):
            self.advance()
            condition = self.parse_formula(default_predicate)
        self.expect("eof")
        return Query(target, condition)

    def parse_formula(self, default_predicate) -> Formula:
        return self._parse_or(default_predicate)

    def _parse_or(self, default_predicate) -> Formula:
        children = [self._parse_and(default_predicate)]
        while self.at("punct", "|"):
            self.advance()
            children.append(self._parse_and(default_predicate))
        return children[0] if len(children) == 1 else Or(tuple(children))

    def _parse_and(self, default_predicate) -> Formula:
        children = [self._parse_unary(default_predicate)]
        while self.at("punct", "&"):
            self.advance()
            children.append(self._parse_unary(default_predicate))
        return children[0] if len(children) == 1 else And(tuple(children))

    def _parse_unary(self, default_predicate) -> Formula:
        if self.at("punct", "!"):
            self.advance()
            return Not(self._parse_unary(default_predicate))
        if self.at("punct", "("):
            self.advance()
            inner = self._parse_or(default_predicate)
            self.expect("punct", ")")
            return inner
        atom = self.parse_atom(ground=True)
        if not atom.args and default_predicate is not None:
            # Bare identifier: sugar for e.g. TermAssociation(name).
            return Atom(default_predicate, (Constant(atom.predicate),))
        return atom


def _unquote(text: str) -> str:
    body = text[1:-1]
    return re.sub(r"\\(.)", r"\1", body)


def _as_number(text: str):
    value = float(text)
    if value.is_integer() and re.fullmatch(r"\d+", text):
        return int(text)
    return value


def _reground(atom: Atom) -> Atom:
    args = []
    for a in atom.args:
        if isinstance(a, Variable):
            args.append(Constant(sys.intern(a.name)))
        else:
            args.append(a)
    return Atom(atom.predicate, tuple(args))


# ---------------------------------------------------------------------------
# Public entry points


def parse_program(source: str) -> Program:
    """Parse ``.npl`` source text into a `Program` AST.

    Raises `ParseError` with line/column on syntax errors, probabilities
    outside [0, 1], and arity mismatches.
    """
    parser = _Parser(source)
    rules = []
    facts = {}  # relation -> {args: (p, loc)}
    fact_order = []
    choices = []
    while not parser.at("eof"):
        stmt = parser.parse_statement()
        if isinstance(stmt, DeterministicRule):
            rules.append(stmt)
        elif stmt[0] == "fact":
            _, relation, args, p, loc = stmt
            block = facts.setdefault(relation, {})
            if not block:
                fact_order.append(relation)
            if args in block:
                raise ParseError(
                    f"duplicate fact {relation}{tuple(a.value for a in args)!r}", *loc
                )
            block[args] = (p, loc)
        else:
            _, entries, loc = stmt
            relations = {atom.predicate for atom, _ in entries}
            if len(relations) > 1:
                raise ParseError(
                    f"a choice must range over a single relation, found {sorted(relations)}", *loc
                )
            seen = set()
            tuples = []
            for atom, p in entries:
                if atom.args in seen:
                    raise ParseError(f"duplicate choice tuple {atom!r}", *loc)
                seen.add(atom.args)
                tuples.append((atom.args, p))
            choices.append(ProbabilisticChoiceBlock(relations.pop(), tuple(tuples), loc))

    fact_blocks = tuple(
        ProbabilisticFactBlock(
            rel, tuple((args, p) for args, (p, _) in facts[rel].items()), None
        )
        for rel in fact_order
    )
    program = Program(tuple(rules), fact_blocks, tuple(choices))
    _check_arities(program)
    return program


def parse_query(source: str, default_predicate: Optional[str] = "TermAssociation") -> Query:
    """Parse a query string like ``Activation(v) | insula & !speech``.

    Bare identifiers in the condition are sugar for
    ``default_predicate(identifier)``; pass ``default_predicate=None`` to
    require fully written atoms.
    """
    return _Parser(source).parse_query(default_predicate)


def _check_arities(program: Program) -> dict:
    arities = {}

    def check(predicate, arity, loc=None):
        known = arities.setdefault(predicate, arity)
        if known != arity:
            raise ParseError(
                f"arity mismatch for {predicate!r}: used with {arity} and {known} arguments",
                *(loc or (None, None)),
            )

    for rule in program.rules:
        check(rule.head.predicate, rule.head.arity, rule.location)
        for atom in rule.body:
            check(atom.predicate, atom.arity, rule.location)
    for block in program.fact_blocks + program.choice_blocks:
        for args, _ in block.tuples:
            check(block.relation, len(args), block.location)
    return arities


def validate_program(program: Program) -> ValidatedProgram:
    """Check rule safety, acyclicity and choice-probability sums."""
    arities = _check_arities(program)
    extensional = program.extensional_relations
    intensional = program.intensional_predicates
    overlap = extensional & intensional
    if overlap:
        raise ProgramError(
            f"predicates defined both by rules and by probabilistic blocks: {sorted(overlap)}"
        )
    fact_relations = {b.relation for b in program.fact_blocks}
    choice_names = [b.relation for b in program.choice_blocks]
    mixed = fact_relations & set(choice_names)
    if mixed:
        raise ProgramError(f"relations defined both as facts and as a choice: {sorted(mixed)}")
    if len(choice_names) != len(set(choice_names)):
        dup = sorted({n for n in choice_names if choice_names.count(n) > 1})
        raise ProgramError(f"multiple choice blocks for the same relation: {dup}")

    for rule in program.rules:
        body_vars = {v for atom in rule.body for v in atom.variables()}
        for var in rule.head.variables():
            if var not in body_vars:
                raise UnsafeVariableError(var.name, rule)

    _check_acyclic(program, intensional)

    for block in program.choice_blocks:
        total = sum(p for _, p in block.tuples)
        if total > 1.0 + CHOICE_SUM_TOLERANCE:
            raise ChoiceSumError(block.relation, total)

    choice_relations = frozenset(b.relation for b in program.choice_blocks)
    return ValidatedProgram(program, arities, choice_relations)


def _check_acyclic(program: Program, intensional):
    graph = {p: set() for p in intensional}
    for rule in program.rules:
        for atom in rule.body:
            if atom.predicate in intensional:
                graph[rule.head.predicate].add(atom.predicate)

    # Iterative DFS with an explicit stack; reports the cycle it finds.
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {p: WHITE for p in graph}
    for root in sorted(graph):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(sorted(graph[root])))]
        path = [root]
        color[root] = GRAY
        while stack:
            node, children = stack[-1]
            for child in children:
                if color[child] == GRAY:
                    cycle = path[path.index(child):] + [child]
                    raise CycleError(cycle)
                if color[child] == WHITE:
                    color[child] = GRAY
                    stack.append((child, iter(sorted(graph[child]))))
                    path.append(child)
                    break
            else:
                color[node] = BLACK
                stack.pop()
                path.pop()


# ---------------------------------------------------------------------------
# Pretty printing


def _format_constant(value) -> str:
    if isinstance(value, str):
        if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", value):
            return value
        escaped = value.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"
    return repr(value)


def _format_term_in_rule(term: Term) -> str:
    if isinstance(term, Variable):
        return term.name
    if isinstance(term.value, str):
        escaped = term.value.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"
    return repr(term.value)


def _format_atom_in_rule(atom: Atom) -> str:
    if not atom.args:
        return atom.predicate
    return f"{atom.predicate}({', '.join(_format_term_in_rule(a) for a in atom.args)})"


def _format_ground_atom(relation, args) -> str:
    if not args:
        return relation
    return f"{relation}({', '.join(_format_constant(a.value) for a in args)})"


def pretty_print(program: Program) -> str:
    """Render a program back to concrete syntax; `parse_program` round-trips it."""
    lines = []
    for block in program.choice_blocks:
        parts = [f"{p!r}::{_format_ground_atom(block.relation, args)}" for args, p in block.tuples]
        lines.append("; ".join(parts) + ".")
    for block in program.fact_blocks:
        for args, p in block.tuples:
            lines.append(f"{p!r}::{_format_ground_atom(block.relation, args)}.")
    for rule in program.rules:
        body = ", ".join(_format_atom_in_rule(a) for a in rule.body)
        lines.append(f"{_format_atom_in_rule(rule.head)} :- {body}.")
    return "\n".join(lines) + ("\n" if lines else "")


def alpha_canonical(program: Program) -> Program:
    """Rename each rule's variables to v0, v1, ... in order of first occurrence."""
    rules = []
    for rule in program.rules:
        mapping = {}
        for atom in (rule.head,) + rule.body:
            for var in atom.variables():
                if var not in mapping:
                    mapping[var] = Variable(f"v{len(mapping)}")
        rules.append(
            DeterministicRule(
                rule.head.substitute(mapping),
                tuple(a.substitute(mapping) for a in rule.body),
            )
        )
    return Program(
        tuple(rules),
        tuple(ProbabilisticFactBlock(b.relation, b.tuples) for b in program.fact_blocks),
        tuple(ProbabilisticChoiceBlock(b.relation, b.tuples) for b in program.choice_blocks),
    )
