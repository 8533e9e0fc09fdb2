"""Probability-formula language: declarations, syntax trees, parser, evaluation.

A model consists of relation and parameter declarations followed by one
probability-formula assignment per probabilistic relation.  Formulas are
built from constants, parameters, relational atoms, arithmetic (+, -, *),
weighted conditionals (WIF c THEN a ELSE b evaluates to c*a + (1-c)*b),
and combination constructs that map a multiset of values to a single value
(sum, l-reg, mean, noisy-or).

Example model text::

    input upstream/2;
    input invdistance/2 numeric [0, inf];
    prob polluted/1;
    param alpha;
    param beta;
    polluted(S) <- WIF 0.6
                   THEN COMBINE alpha,
                                COMBINE WIF polluted(V)
                                        THEN beta * invdistance(V,S)
                                        ELSE 0.0
                                WITH sum FORALL V WHERE upstream(V,S)
                        WITH l-reg
                   ELSE 0.2;
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .errors import ModelError, ModelSyntaxError, NumericalError

INF = float("inf")

COMB_FNS = ("sum", "l-reg", "mean", "noisy-or")

BOOLEAN_INPUT = "boolean-input"
NUMERIC_INPUT = "numeric-input"
PROBABILISTIC = "probabilistic"


# ---------------------------------------------------------------------------
# Declarations


@dataclass(frozen=True)
class RelationDecl:
    name: str
    arity: int
    kind: str  # BOOLEAN_INPUT | NUMERIC_INPUT | PROBABILISTIC
    lo: float = -INF  # numeric-input only
    hi: float = INF
    learnable: bool = False  # numeric-input only

    def __post_init__(self):
        if self.arity < 0:
            raise ModelError(f"relation {self.name}: negative arity")
        if self.kind not in (BOOLEAN_INPUT, NUMERIC_INPUT, PROBABILISTIC):
            raise ModelError(f"relation {self.name}: unknown kind {self.kind!r}")
        if self.lo > self.hi:
            raise ModelError(f"relation {self.name}: empty range [{self.lo}, {self.hi}]")
        if self.learnable and self.kind != NUMERIC_INPUT:
            raise ModelError(f"relation {self.name}: only numeric relations can be learnable")


@dataclass(frozen=True)
class ParameterDecl:
    name: str
    lo: float = -INF
    hi: float = INF

    def __post_init__(self):
        if self.lo > self.hi:
            raise ModelError(f"parameter {self.name}: empty range [{self.lo}, {self.hi}]")


# ---------------------------------------------------------------------------
# Formula syntax trees


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Atom:
    relation: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Plus:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Minus:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Times:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Wif:
    cond: "Formula"
    then: "Formula"
    orelse: "Formula"


@dataclass(frozen=True)
class GuardAtom:
    relation: str
    args: tuple[str, ...]
    negated: bool = False


@dataclass(frozen=True)
class VarTest:
    left: str
    right: str
    equal: bool  # True for =, False for !=


GuardTerm = Union[GuardAtom, VarTest]


@dataclass(frozen=True)
class Guard:
    """Conjunction of Boolean-input atoms and variable (in)equality tests."""

    terms: tuple[GuardTerm, ...]


@dataclass(frozen=True)
class Combine:
    bodies: tuple["Formula", ...]
    comb: str  # one of COMB_FNS
    forall: tuple[str, ...] = ()
    where: Optional[Guard] = None


Formula = Union[Constant, Param, Atom, Plus, Minus, Times, Wif, Combine]


def free_variables(f: Formula) -> frozenset[str]:
    """Variables of `f` not bound by an enclosing COMBINE."""
    if isinstance(f, (Constant, Param)):
        return frozenset()
    if isinstance(f, Atom):
        return frozenset(f.args)
    if isinstance(f, (Plus, Minus, Times)):
        return free_variables(f.left) | free_variables(f.right)
    if isinstance(f, Wif):
        return free_variables(f.cond) | free_variables(f.then) | free_variables(f.orelse)
    if isinstance(f, Combine):
        inner = frozenset()
        for b in f.bodies:
            inner |= free_variables(b)
        if f.where is not None:
            for t in f.where.terms:
                if isinstance(t, GuardAtom):
                    inner |= frozenset(t.args)
                else:
                    inner |= frozenset((t.left, t.right))
        return inner - frozenset(f.forall)
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Model


@dataclass
class Model:
    """Validated bundle of declarations plus one formula per probabilistic relation.

    Treat instances as immutable; learner and graph code share them freely.
    """

    relations: dict[str, RelationDecl]
    parameters: dict[str, ParameterDecl]
    assignments: dict[str, tuple[tuple[str, ...], Formula]]  # rel -> (head vars, formula)

    def relation(self, name: str) -> RelationDecl:
        try:
            return self.relations[name]
        except KeyError:
            raise ModelError(f"undeclared relation: {name}") from None

    def probabilistic_relations(self) -> list[str]:
        return [r.name for r in self.relations.values() if r.kind == PROBABILISTIC]

    def validate(self) -> None:
        seen = set()
        for name in self.relations:
            if name in seen:
                raise ModelError(f"duplicate declaration: {name}")
            seen.add(name)
        for name in self.parameters:
            if name in seen:
                raise ModelError(f"duplicate declaration: {name}")
            seen.add(name)
        for rel, (head_vars, f) in self.assignments.items():
            decl = self.relation(rel)
            if decl.kind != PROBABILISTIC:
                raise ModelError(f"assignment to non-probabilistic relation {rel}")
            if len(head_vars) != decl.arity:
                raise ModelError(
                    f"assignment head {rel}/{len(head_vars)} does not match declared arity {decl.arity}"
                )
            if len(set(head_vars)) != len(head_vars):
                raise ModelError(f"assignment to {rel}: repeated head variable")
            self._check_formula(rel, f, set(head_vars))
            extra = free_variables(f) - set(head_vars)
            if extra:
                raise ModelError(f"assignment to {rel}: unbound variables {sorted(extra)}")
        for rel in self.probabilistic_relations():
            if rel not in self.assignments:
                raise ModelError(f"probabilistic relation {rel} has no assignment")

    def _check_formula(self, owner: str, f: Formula, scope: set[str]) -> None:
        if isinstance(f, Constant):
            return
        if isinstance(f, Param):
            if f.name not in self.parameters:
                raise ModelError(f"in {owner}: undeclared parameter {f.name}")
            return
        if isinstance(f, Atom):
            decl = self.relations.get(f.relation)
            if decl is None:
                raise ModelError(f"in {owner}: undeclared relation {f.relation}")
            if len(f.args) != decl.arity:
                raise ModelError(
                    f"in {owner}: atom {f.relation}/{len(f.args)} does not match declared arity {decl.arity}"
                )
            return
        if isinstance(f, (Plus, Minus, Times)):
            self._check_formula(owner, f.left, scope)
            self._check_formula(owner, f.right, scope)
            return
        if isinstance(f, Wif):
            for part in (f.cond, f.then, f.orelse):
                self._check_formula(owner, part, scope)
            return
        if isinstance(f, Combine):
            if f.comb not in COMB_FNS:
                raise ModelError(f"in {owner}: unknown combination function {f.comb!r}")
            clash = set(f.forall) & scope
            if clash:
                raise ModelError(
                    f"in {owner}: COMBINE rebinds enclosing variables {sorted(clash)}"
                )
            if len(set(f.forall)) != len(f.forall):
                raise ModelError(f"in {owner}: repeated COMBINE variable")
            if f.where is not None and not f.forall:
                raise ModelError(f"in {owner}: WHERE without FORALL")
            inner = scope | set(f.forall)
            for b in f.bodies:
                self._check_formula(owner, b, inner)
            if f.where is not None:
                for t in f.where.terms:
                    if isinstance(t, GuardAtom):
                        decl = self.relations.get(t.relation)
                        if decl is None:
                            raise ModelError(f"in {owner}: undeclared guard relation {t.relation}")
                        if decl.kind != BOOLEAN_INPUT:
                            raise ModelError(
                                f"in {owner}: guard atom {t.relation} must be a Boolean input relation"
                            )
                        if len(t.args) != decl.arity:
                            raise ModelError(
                                f"in {owner}: guard atom {t.relation}/{len(t.args)} arity mismatch"
                            )
            return
        raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Tokenizer

_KEYWORDS = frozenset(
    ["input", "prob", "param", "numeric", "learnable",
     "wif", "then", "else", "combine", "with", "forall", "where"]
)

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<comment>//[^\n]*)
      | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<arrow><-)
      | (?P<neq>!=)
      | (?P<punct>[;/()\[\],+\-*&!=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # 'number' | 'name' | 'keyword' | punctuation literal | 'eof'
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, line_start = 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ModelSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        tok_text = m.group()
        col = m.start() - line_start + 1
        if kind == "ws":
            nl = tok_text.count("\n")
            if nl:
                line += nl
                line_start = m.start() + tok_text.rindex("\n") + 1
        elif kind == "comment":
            pass
        elif kind == "name":
            low = tok_text.lower()
            if low in _KEYWORDS:
                tokens.append(_Token("keyword", low, line, col))
            else:
                tokens.append(_Token("name", tok_text, line, col))
        elif kind == "number":
            tokens.append(_Token("number", tok_text, line, col))
        elif kind == "arrow":
            tokens.append(_Token("<-", tok_text, line, col))
        elif kind == "neq":
            tokens.append(_Token("!=", tok_text, line, col))
        else:
            tokens.append(_Token(tok_text, tok_text, line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, len(text) - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def expect(self, kind: str, what: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            expected = what or kind
            raise ModelSyntaxError(
                f"expected {expected}, found {tok.text or 'end of input'!r}",
                tok.line, tok.column,
            )
        return self.next()

    def expect_keyword(self, kw: str) -> _Token:
        tok = self.peek()
        if tok.kind != "keyword" or tok.text != kw:
            raise ModelSyntaxError(
                f"expected {kw.upper()!r}, found {tok.text or 'end of input'!r}",
                tok.line, tok.column,
            )
        return self.next()

    def at_keyword(self, *kws: str) -> bool:
        tok = self.peek()
        return tok.kind == "keyword" and tok.text in kws

    # -- declarations ---------------------------------------------------------

    def _parse_decl(self, relations, parameters) -> None:
        tok = self.next()
        name_tok = self.expect("name", "a name")
        name = name_tok.text
        if name in relations or name in parameters:
            raise ModelSyntaxError(f"duplicate declaration: {name}", name_tok.line, name_tok.column)
        if tok.text in ("input", "prob"):
            self.expect("/")
            arity_tok = self.expect("number", "an arity")
            try:
                arity = int(arity_tok.text)
            except ValueError:
                raise ModelSyntaxError("arity must be an integer", arity_tok.line, arity_tok.column)
            if tok.text == "prob":
                relations[name] = RelationDecl(name, arity, PROBABILISTIC)
                return
            if self.at_keyword("numeric"):
                self.next()
                lo, hi = -INF, INF
                if self.peek().kind == "[":
                    lo, hi = self._parse_range()
                learnable = False
                if self.at_keyword("learnable"):
                    self.next()
                    learnable = True
                relations[name] = RelationDecl(name, arity, NUMERIC_INPUT, lo, hi, learnable)
            else:
                relations[name] = RelationDecl(name, arity, BOOLEAN_INPUT)
        else:  # param
            lo, hi = -INF, INF
            if self.peek().kind == "[":
                lo, hi = self._parse_range()
            parameters[name] = ParameterDecl(name, lo, hi)

    def _parse_range(self) -> tuple[float, float]:
        self.expect("[")
        lo = self._parse_bound()
        self.expect(",")
        hi = self._parse_bound()
        self.expect("]")
        if lo > hi:
            tok = self.peek()
            raise ModelSyntaxError(f"empty range [{lo}, {hi}]", tok.line, tok.column)
        return lo, hi

    def _parse_bound(self) -> float:
        sign = 1.0
        if self.peek().kind == "-":
            self.next()
            sign = -1.0
        tok = self.peek()
        if tok.kind == "number":
            self.next()
            return sign * float(tok.text)
        if tok.kind == "name" and tok.text == "inf":
            self.next()
            return sign * INF
        raise ModelSyntaxError("expected a number or 'inf'", tok.line, tok.column)

    def _parse_assignment(self) -> tuple[str, tuple[str, ...], Formula]:
        name_tok = self.expect("name", "a relation name")
        self.expect("(")
        head_vars = self._parse_vars(allow_empty=True)
        self.expect(")")
        self.expect("<-")
        f = self.parse_formula()
        return name_tok.text, head_vars, f

    def _parse_vars(self, allow_empty: bool = False) -> tuple[str, ...]:
        if allow_empty and self.peek().kind == ")":
            return ()
        names = [self.expect("name", "a variable").text]
        while self.peek().kind == ",":
            self.next()
            names.append(self.expect("name", "a variable").text)
        return tuple(names)

    # -- formulas -------------------------------------------------------------

    def parse_formula(self) -> Formula:
        f = self._parse_term()
        while self.peek().kind in ("+", "-"):
            op = self.next().kind
            rhs = self._parse_term()
            f = Plus(f, rhs) if op == "+" else Minus(f, rhs)
        return f

    def _parse_term(self) -> Formula:
        f = self._parse_factor()
        while self.peek().kind == "*":
            self.next()
            f = Times(f, self._parse_factor())
        return f

    def _parse_factor(self) -> Formula:
        tok = self.peek()
        if tok.kind == "number":
            self.next()
            return Constant(float(tok.text))
        if tok.kind == "-":  # negative numeric literal only
            nxt = self.peek(1)
            if nxt.kind == "number":
                self.next()
                self.next()
                return Constant(-float(nxt.text))
            raise ModelSyntaxError("expected a number after unary '-'", tok.line, tok.column)
        if tok.kind == "(":
            self.next()
            f = self.parse_formula()
            self.expect(")")
            return f
        if tok.kind == "keyword" and tok.text == "wif":
            self.next()
            cond = self.parse_formula()
            self.expect_keyword("then")
            then = self.parse_formula()
            self.expect_keyword("else")
            orelse = self.parse_formula()
            return Wif(cond, then, orelse)
        if tok.kind == "keyword" and tok.text == "combine":
            return self._parse_combine()
        if tok.kind == "name":
            self.next()
            if self.peek().kind == "(":
                self.next()
                args = self._parse_vars(allow_empty=True)
                self.expect(")")
                return Atom(tok.text, args)
            return Atom(tok.text, ())  # bare name: nullary atom or parameter, resolved later
        raise ModelSyntaxError(
            f"expected a formula, found {tok.text or 'end of input'!r}", tok.line, tok.column
        )

    def _parse_combine(self) -> Combine:
        self.expect_keyword("combine")
        bodies = [self.parse_formula()]
        while self.peek().kind == ",":
            self.next()
            bodies.append(self.parse_formula())
        self.expect_keyword("with")
        comb = self._parse_comb_name()
        forall: tuple[str, ...] = ()
        where = None
        if self.at_keyword("forall"):
            self.next()
            forall = self._parse_vars()
            if self.at_keyword("where"):
                self.next()
                where = self._parse_guard()
        return Combine(tuple(bodies), comb, forall, where)

    def _parse_comb_name(self) -> str:
        tok = self.expect("name", "a combination function")
        parts = [tok.text]
        while self.peek().kind == "-" and self.peek(1).kind == "name":
            self.next()
            parts.append(self.next().text)
        name = "-".join(parts)
        if name not in COMB_FNS:
            raise ModelSyntaxError(
                f"unknown combination function {name!r} (expected one of {', '.join(COMB_FNS)})",
                tok.line, tok.column,
            )
        return name

    def _parse_guard(self) -> Guard:
        terms = [self._parse_guard_term()]
        while self.peek().kind == "&":
            self.next()
            terms.append(self._parse_guard_term())
        return Guard(tuple(terms))

    def _parse_guard_term(self) -> GuardTerm:
        negated = False
        if self.peek().kind == "!":
            self.next()
            negated = True
        name_tok = self.expect("name", "a guard atom or variable")
        if self.peek().kind == "(":
            self.next()
            args = self._parse_vars(allow_empty=True)
            self.expect(")")
            return GuardAtom(name_tok.text, args, negated)
        if negated:
            raise ModelSyntaxError(
                "'!' applies to guard atoms only", name_tok.line, name_tok.column
            )
        if self.peek().kind == "=":
            self.next()
            other = self.expect("name", "a variable")
            return VarTest(name_tok.text, other.text, equal=True)
        if self.peek().kind == "!=":
            self.next()
            other = self.expect("name", "a variable")
            return VarTest(name_tok.text, other.text, equal=False)
        tok = self.peek()
        raise ModelSyntaxError(
            f"expected '(', '=' or '!=', found {tok.text or 'end of input'!r}", tok.line, tok.column
        )


def _resolve_params(f: Formula, parameters: Mapping[str, ParameterDecl]) -> Formula:
    """Rewrite bare-name atoms into Param references where the name is a parameter."""
    if isinstance(f, Atom) and not f.args and f.relation in parameters:
        return Param(f.relation)
    if isinstance(f, (Constant, Param, Atom)):
        return f
    if isinstance(f, Plus):
        return Plus(_resolve_params(f.left, parameters), _resolve_params(f.right, parameters))
    if isinstance(f, Minus):
        return Minus(_resolve_params(f.left, parameters), _resolve_params(f.right, parameters))
    if isinstance(f, Times):
        return Times(_resolve_params(f.left, parameters), _resolve_params(f.right, parameters))
    if isinstance(f, Wif):
        return Wif(
            _resolve_params(f.cond, parameters),
            _resolve_params(f.then, parameters),
            _resolve_params(f.orelse, parameters),
        )
    if isinstance(f, Combine):
        return Combine(
            tuple(_resolve_params(b, parameters) for b in f.bodies), f.comb, f.forall, f.where
        )
    raise TypeError(f"not a formula: {f!r}")


def parse_model(text: str) -> Model:
    """Parse and validate model text; raises ModelSyntaxError / ModelError."""
    parser = _Parser(_tokenize(text))
    relations: dict[str, RelationDecl] = {}
    parameters: dict[str, ParameterDecl] = {}
    assignments: dict[str, tuple[tuple[str, ...], Formula]] = {}

    while parser.at_keyword("input", "prob", "param"):
        parser._parse_decl(relations, parameters)
        parser.expect(";")
    while parser.peek().kind != "eof":
        head_tok = parser.peek()
        rel, head_vars, f = parser._parse_assignment()
        if rel in assignments:
            raise ModelSyntaxError(
                f"duplicate assignment to {rel}", head_tok.line, head_tok.column
            )
        assignments[rel] = (head_vars, f)
        parser.expect(";")
    if not assignments:
        tok = parser.peek()
        raise ModelSyntaxError("model has no assignments", tok.line, tok.column)
    assignments = {
        rel: (head, _resolve_params(f, parameters)) for rel, (head, f) in assignments.items()
    }
    model = Model(relations, parameters, assignments)
    model.validate()
    return model


def parse_formula(text: str, model: Optional[Model] = None) -> Formula:
    """Parse a single formula; when `model` is given, resolve parameter names."""
    parser = _Parser(_tokenize(text))
    f = parser.parse_formula()
    tok = parser.peek()
    if tok.kind != "eof":
        raise ModelSyntaxError(f"trailing input {tok.text!r}", tok.line, tok.column)
    if model is not None:
        f = _resolve_params(f, model.parameters)
    return f


# ---------------------------------------------------------------------------
# Pretty-printing (parse(format_model(m)) reproduces the same syntax trees)


def _fmt_number(x: float) -> str:
    return repr(float(x))


def _fmt_formula(f: Formula, prec: int, tail: bool) -> str:
    """`prec`: 1 formula, 2 term, 3 factor. `tail`: nothing follows in this slot,
    so a WIF/COMBINE cannot swallow trailing operators and needs no parentheses."""
    if isinstance(f, Constant):
        return _fmt_number(f.value)
    if isinstance(f, Param):
        return f.name
    if isinstance(f, Atom):
        return f.relation + ("(" + ",".join(f.args) + ")" if f.args else "")
    if isinstance(f, (Plus, Minus)):
        op = "+" if isinstance(f, Plus) else "-"
        s = (
            _fmt_formula(f.left, 1, False)
            + f" {op} "
            + _fmt_formula(f.right, 2, tail)
        )
        return f"({s})" if prec > 1 else s
    if isinstance(f, Times):
        s = _fmt_formula(f.left, 2, False) + " * " + _fmt_formula(f.right, 3, tail)
        return f"({s})" if prec > 2 else s
    if isinstance(f, Wif):
        s = (
            "WIF "
            + _fmt_formula(f.cond, 1, True)
            + " THEN "
            + _fmt_formula(f.then, 1, True)
            + " ELSE "
            + _fmt_formula(f.orelse, 1, tail)
        )
        return s if tail else f"({s})"
    if isinstance(f, Combine):
        parts = [
            _fmt_formula(b, 1, i == len(f.bodies) - 1)
            for i, b in enumerate(f.bodies)
        ]
        s = "COMBINE " + ", ".join(parts) + " WITH " + f.comb
        if f.forall:
            s += " FORALL " + ",".join(f.forall)
            if f.where is not None:
                s += " WHERE " + _fmt_guard(f.where)
        return s if tail else f"({s})"
    raise TypeError(f"not a formula: {f!r}")


def _fmt_guard(g: Guard) -> str:
    parts = []
    for t in g.terms:
        if isinstance(t, GuardAtom):
            parts.append(("!" if t.negated else "") + t.relation + "(" + ",".join(t.args) + ")")
        else:
            parts.append(f"{t.left} {'=' if t.equal else '!='} {t.right}")
    return " & ".join(parts)


def format_formula(f: Formula) -> str:
    return _fmt_formula(f, 1, True)


def format_model(m: Model) -> str:
    lines = []
    for decl in m.relations.values():
        if decl.kind == PROBABILISTIC:
            lines.append(f"prob {decl.name}/{decl.arity};")
        elif decl.kind == BOOLEAN_INPUT:
            lines.append(f"input {decl.name}/{decl.arity};")
        else:
            rng = ""
            if (decl.lo, decl.hi) != (-INF, INF):
                rng = f" [{_fmt_bound(decl.lo)}, {_fmt_bound(decl.hi)}]"
            learn = " learnable" if decl.learnable else ""
            lines.append(f"input {decl.name}/{decl.arity} numeric{rng}{learn};")
    for p in m.parameters.values():
        rng = ""
        if (p.lo, p.hi) != (-INF, INF):
            rng = f" [{_fmt_bound(p.lo)}, {_fmt_bound(p.hi)}]"
        lines.append(f"param {p.name}{rng};")
    for rel, (head_vars, f) in m.assignments.items():
        head = rel + "(" + ",".join(head_vars) + ")"
        lines.append(f"{head} <- {format_formula(f)};")
    return "\n".join(lines) + "\n"


def _fmt_bound(x: float) -> str:
    if x == INF:
        return "inf"
    if x == -INF:
        return "-inf"
    return _fmt_number(x)


# ---------------------------------------------------------------------------
# Evaluation


def logistic(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def apply_comb(comb: str, values: Sequence[float]) -> float:
    """Apply a combination function to a multiset of values."""
    if comb == "sum":
        return math.fsum(values)
    if comb == "l-reg":
        return logistic(math.fsum(values))
    if comb == "mean":
        if not values:
            raise NumericalError("mean over an empty multiset")
        return math.fsum(values) / len(values)
    if comb == "noisy-or":
        prod = 1.0
        for v in values:
            if v < 0.0 or v > 1.0:
                raise NumericalError(f"noisy-or input {v} outside [0, 1]")
            prod *= 1.0 - v
        return 1.0 - prod
    raise ModelError(f"unknown combination function {comb!r}")


class EvalContext:
    """Supplies values needed to evaluate a ground formula.

    Subclasses or duck-typed equivalents must provide `param`, `input_value`,
    `prob_value` and `objects`.  Used by the naive evaluator, the forward
    sampler, and the graph-vs-naive consistency checks.
    """

    def param(self, name: str) -> float:
        raise KeyError(name)

    def input_value(self, relation: str, args: tuple[int, ...]) -> float:
        raise KeyError((relation, args))

    def prob_value(self, relation: str, args: tuple[int, ...]) -> float:
        raise KeyError((relation, args))

    def objects(self) -> Sequence[int]:
        return ()


class MappingContext(EvalContext):
    """Simple context backed by dictionaries; handy in tests.

    `default_input`, when not None, is returned for missing input atoms
    (closed-world reading of Boolean inputs).
    """

    def __init__(self, params=None, inputs=None, probs=None, objects=(), default_input=None):
        self._params = dict(params or {})
        self._inputs = dict(inputs or {})
        self._probs = dict(probs or {})
        self._objects = list(objects)
        self._default_input = default_input

    def param(self, name):
        return self._params[name]

    def input_value(self, relation, args):
        key = (relation, tuple(args))
        if self._default_input is not None and key not in self._inputs:
            return self._default_input
        return self._inputs[key]

    def prob_value(self, relation, args):
        return self._probs[(relation, tuple(args))]

    def objects(self):
        return self._objects


def guard_holds(guard: Optional[Guard], binding: Mapping[str, int], ctx: EvalContext) -> bool:
    if guard is None:
        return True
    for t in guard.terms:
        if isinstance(t, VarTest):
            same = binding[t.left] == binding[t.right]
            if same != t.equal:
                return False
        else:
            val = ctx.input_value(t.relation, tuple(binding[a] for a in t.args))
            truth = bool(val)
            if truth == t.negated:
                return False
    return True


def evaluate(f: Formula, binding: Mapping[str, int], ctx: EvalContext, model: Optional[Model] = None) -> float:
    """Recursive reference evaluation of `f` under `binding`.

    `model` is only needed to classify atoms; when omitted, atoms are first
    looked up as input relations and then as probabilistic ones.
    """
    if isinstance(f, Constant):
        return f.value
    if isinstance(f, Param):
        return float(ctx.param(f.name))
    if isinstance(f, Atom):
        args = tuple(binding[a] for a in f.args)
        if model is not None:
            kind = model.relation(f.relation).kind
            if kind == PROBABILISTIC:
                return float(ctx.prob_value(f.relation, args))
            return float(ctx.input_value(f.relation, args))
        try:
            return float(ctx.input_value(f.relation, args))
        except KeyError:
            return float(ctx.prob_value(f.relation, args))
    if isinstance(f, Plus):
        return evaluate(f.left, binding, ctx, model) + evaluate(f.right, binding, ctx, model)
    if isinstance(f, Minus):
        return evaluate(f.left, binding, ctx, model) - evaluate(f.right, binding, ctx, model)
    if isinstance(f, Times):
        return evaluate(f.left, binding, ctx, model) * evaluate(f.right, binding, ctx, model)
    if isinstance(f, Wif):
        c = evaluate(f.cond, binding, ctx, model)
        a = evaluate(f.then, binding, ctx, model)
        b = evaluate(f.orelse, binding, ctx, model)
        return c * a + (1.0 - c) * b
    if isinstance(f, Combine):
        values = []
        if f.forall:
            objs = list(ctx.objects())
            for combo in itertools.product(objs, repeat=len(f.forall)):
                inner = dict(binding)
                inner.update(zip(f.forall, combo))
                if not guard_holds(f.where, inner, ctx):
                    continue
                for b in f.bodies:
                    values.append(evaluate(b, inner, ctx, model))
        else:
            for b in f.bodies:
                values.append(evaluate(b, binding, ctx, model))
        return apply_comb(f.comb, values)
    raise TypeError(f"not a formula: {f!r}")


def evaluate_probability(
    model: Model, relation: str, args: tuple[int, ...], ctx: EvalContext
) -> float:
    """Evaluate the assigned formula of a probabilistic ground atom.

    Enforces the top-level [0, 1] contract.
    """
    decl = model.relation(relation)
    if decl.kind != PROBABILISTIC:
        raise ModelError(f"{relation} is not probabilistic")
    if relation not in model.assignments:
        raise ModelError(f"probabilistic relation {relation} has no assignment")
    head_vars, f = model.assignments[relation]
    if len(args) != len(head_vars):
        raise ModelError(f"atom {relation}/{len(args)} arity mismatch")
    binding = dict(zip(head_vars, args))
    p = evaluate(f, binding, ctx, model)
    if not (-1e-12 <= p <= 1.0 + 1e-12):
        raise NumericalError(
            f"probability formula for {relation}{args} evaluated to {p}, outside [0, 1]"
        )
    return min(max(p, 0.0), 1.0)
