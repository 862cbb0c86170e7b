"""Recursive-descent parser for the aggregation-query subset.

Grammar (keywords case-insensitive, identifiers may be dotted):

    query := SELECT agg (',' agg)* FROM ident
             [WHERE pred] [GROUP BY ident (',' ident)*]
    agg   := (SUM|MIN|MAX|COUNT|AVG) '(' arith ')' | COUNT '(' '*' ')'
    arith := term ('+' term)* ; term := factor ('*' factor)*
    factor := ident | integer | '(' arith ')'
    pred  := conj (OR conj)* ; conj := unary (AND unary)*
    unary := NOT unary | '(' pred ')' | comparison
    comparison := ident op (ident | integer)
                | ident BETWEEN operand AND operand
    op := '=' | '<>' | '<' | '<=' | '>' | '>='

Integer literals may carry a leading '-' (useful against signed attributes;
arithmetic rejects negative immediates later, at compile time). BETWEEN
desugars into a >= / <= conjunction at parse time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .isa import (
    Add,
    AggKind,
    And,
    ArithNode,
    AttrRef,
    Cmp,
    CMP_SYMBOL,
    Const,
    Mul,
    Not,
    Or,
    PredNode,
    TAUTOLOGY,
)

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "GROUP", "BY",
    "AND", "OR", "NOT", "BETWEEN",
    "SUM", "MIN", "MAX", "COUNT", "AVG",
}

AGG_KEYWORDS = {
    "SUM": AggKind.SUM,
    "MIN": AggKind.MIN,
    "MAX": AggKind.MAX,
    "COUNT": AggKind.COUNT,
    "AVG": AggKind.AVG,
}

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<int>-?\d+)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
      | (?P<sym><>|<=|>=|[(),*+=<>])
    )""",
    re.VERBOSE,
)


class ParseError(ValueError):
    """Carries the byte offset, what was expected, and the offending line."""

    def __init__(self, text: str, offset: int, expected: str):
        line_start = text.rfind("\n", 0, offset) + 1
        line_end = text.find("\n", offset)
        if line_end < 0:
            line_end = len(text)
        excerpt = text[line_start:line_end]
        caret = " " * (offset - line_start) + "^"
        super().__init__(
            f"expected {expected} at offset {offset}\n  {excerpt}\n  {caret}"
        )
        self.offset = offset
        self.expected = expected
        self.excerpt = excerpt


@dataclass(frozen=True)
class AggSpec:
    kind: AggKind
    arg: ArithNode | None  # None only for COUNT(*)


@dataclass(frozen=True)
class QueryIR:
    aggregates: tuple[AggSpec, ...]
    table: str
    predicate: PredNode
    group_by: tuple[str, ...]


@dataclass(frozen=True)
class _Token:
    kind: str  # "int" | "ident" | "kw" | "sym" | "end"
    value: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == m.start():
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(text) - len(stripped)
            raise ParseError(text, bad_at, "a token")
        if m.group("int") is not None:
            out.append(_Token("int", m.group("int"), m.start("int")))
        elif m.group("ident") is not None:
            word = m.group("ident")
            if word.upper() in KEYWORDS and "." not in word:
                out.append(_Token("kw", word.upper(), m.start("ident")))
            else:
                out.append(_Token("ident", word, m.start("ident")))
        else:
            out.append(_Token("sym", m.group("sym"), m.start("sym")))
        pos = m.end()
    out.append(_Token("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def _fail(self, expected: str):
        raise ParseError(self.text, self.cur.offset, expected)

    def _advance(self) -> _Token:
        t = self.cur
        self.i += 1
        return t

    def _accept_kw(self, word: str) -> bool:
        if self.cur.kind == "kw" and self.cur.value == word:
            self.i += 1
            return True
        return False

    def _expect_kw(self, word: str):
        if not self._accept_kw(word):
            self._fail(f"keyword {word}")

    def _accept_sym(self, sym: str) -> bool:
        if self.cur.kind == "sym" and self.cur.value == sym:
            self.i += 1
            return True
        return False

    def _expect_sym(self, sym: str):
        if not self._accept_sym(sym):
            self._fail(f"{sym!r}")

    def _expect_ident(self) -> str:
        if self.cur.kind != "ident":
            self._fail("an identifier")
        return self._advance().value

    def _expect_int(self) -> int:
        if self.cur.kind != "int":
            self._fail("an integer")
        return int(self._advance().value)

    # -- grammar ------------------------------------------------------------

    def query(self) -> QueryIR:
        self._expect_kw("SELECT")
        aggs = [self.aggregate()]
        while self._accept_sym(","):
            aggs.append(self.aggregate())
        self._expect_kw("FROM")
        table = self._expect_ident()
        pred: PredNode = TAUTOLOGY
        if self._accept_kw("WHERE"):
            pred = self.pred()
        group_by: tuple[str, ...] = ()
        if self._accept_kw("GROUP"):
            self._expect_kw("BY")
            names = [self._expect_ident()]
            while self._accept_sym(","):
                names.append(self._expect_ident())
            group_by = tuple(names)
        if self.cur.kind != "end":
            self._fail("end of query")
        return QueryIR(tuple(aggs), table, pred, group_by)

    def aggregate(self) -> AggSpec:
        if self.cur.kind != "kw" or self.cur.value not in AGG_KEYWORDS:
            self._fail("an aggregate function (SUM, MIN, MAX, COUNT, AVG)")
        kind = AGG_KEYWORDS[self._advance().value]
        self._expect_sym("(")
        if kind is AggKind.COUNT and self._accept_sym("*"):
            self._expect_sym(")")
            return AggSpec(kind, None)
        arg = self.arith()
        self._expect_sym(")")
        return AggSpec(kind, arg)

    def arith(self) -> ArithNode:
        node = self.term()
        while self._accept_sym("+"):
            node = Add(node, self.term())
        return node

    def term(self) -> ArithNode:
        node = self.factor()
        while self._accept_sym("*"):
            node = Mul(node, self.factor())
        return node

    def factor(self) -> ArithNode:
        if self.cur.kind == "ident":
            return AttrRef(self._advance().value)
        if self.cur.kind == "int":
            return Const(self._expect_int())
        if self._accept_sym("("):
            node = self.arith()
            self._expect_sym(")")
            return node
        self._fail("an identifier, integer, or '('")

    def pred(self) -> PredNode:
        args = [self.conj()]
        while self._accept_kw("OR"):
            args.append(self.conj())
        return args[0] if len(args) == 1 else Or(tuple(args))

    def conj(self) -> PredNode:
        args = [self.unary()]
        while self._accept_kw("AND"):
            args.append(self.unary())
        return args[0] if len(args) == 1 else And(tuple(args))

    def unary(self) -> PredNode:
        if self._accept_kw("NOT"):
            return Not(self.unary())
        if self._accept_sym("("):
            node = self.pred()
            self._expect_sym(")")
            return node
        return self.comparison()

    def comparison(self) -> PredNode:
        left = AttrRef(self._expect_ident())
        if self._accept_kw("BETWEEN"):
            lo = self.operand()
            self._expect_kw("AND")
            hi = self.operand()
            return And((Cmp("ge", left, lo), Cmp("le", left, hi)))
        if self.cur.kind != "sym" or self.cur.value not in ("=", "<>", "<", "<=", ">", ">="):
            self._fail("a comparison operator")
        sym = self._advance().value
        op = {v: k for k, v in CMP_SYMBOL.items()}[sym]
        return Cmp(op, left, self.operand())

    def operand(self):
        if self.cur.kind == "ident":
            return AttrRef(self._advance().value)
        if self.cur.kind == "int":
            return Const(self._expect_int())
        self._fail("an identifier or integer")


def parse_query(text: str) -> QueryIR:
    return _Parser(text).query()


def parse_predicate(text: str) -> PredNode:
    """A bare predicate (the WHERE grammar without the rest of the query)."""
    p = _Parser(text)
    node = p.pred()
    if p.cur.kind != "end":
        p._fail("end of predicate")
    return node


# ---------------------------------------------------------------------------
# Printing (canonical text; reparsing yields a structurally identical IR)

def expr_text(expr: ArithNode) -> str:
    if isinstance(expr, AttrRef):
        return expr.name
    if isinstance(expr, Const):
        return str(expr.value)
    if isinstance(expr, Add):
        right = expr_text(expr.right)
        if isinstance(expr.right, Add):  # right-nested only via explicit parens
            right = f"({right})"
        return f"{expr_text(expr.left)} + {right}"
    if isinstance(expr, Mul):
        left = expr_text(expr.left)
        right = expr_text(expr.right)
        if isinstance(expr.left, Add):
            left = f"({left})"
        if isinstance(expr.right, (Add, Mul)):
            right = f"({right})"
        return f"{left} * {right}"
    raise TypeError(f"not an arithmetic node: {expr!r}")


def pred_text(pred: PredNode) -> str:
    if isinstance(pred, Cmp):
        rhs = pred.right.name if isinstance(pred.right, AttrRef) else str(pred.right.value)
        return f"{pred.left.name} {CMP_SYMBOL[pred.op]} {rhs}"
    if isinstance(pred, Or):
        parts = []
        for a in pred.args:
            t = pred_text(a)
            parts.append(f"({t})" if isinstance(a, Or) else t)
        return " OR ".join(parts)
    if isinstance(pred, And):
        parts = []
        for a in pred.args:
            t = pred_text(a)
            parts.append(f"({t})" if isinstance(a, (And, Or)) else t)
        return " AND ".join(parts)
    if isinstance(pred, Not):
        t = pred_text(pred.arg)
        if isinstance(pred.arg, (And, Or)):
            t = f"({t})"
        return f"NOT {t}"
    raise TypeError(f"not a predicate node: {pred!r}")


def agg_label(agg: AggSpec) -> str:
    if agg.arg is None:
        return "count(*)"
    return f"{agg.kind.value}({expr_text(agg.arg)})"


def query_text(ir: QueryIR) -> str:
    parts = ["SELECT "]
    sel = []
    for agg in ir.aggregates:
        if agg.arg is None:
            sel.append("COUNT(*)")
        else:
            sel.append(f"{agg.kind.value.upper()}({expr_text(agg.arg)})")
    parts.append(", ".join(sel))
    parts.append(f" FROM {ir.table}")
    if ir.predicate != TAUTOLOGY:
        parts.append(f" WHERE {pred_text(ir.predicate)}")
    if ir.group_by:
        parts.append(" GROUP BY " + ", ".join(ir.group_by))
    return "".join(parts)
