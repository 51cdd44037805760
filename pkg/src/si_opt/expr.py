"""Expression AST, parser and evaluator for measure and derived-parameter text.

Expressions follow the usual SPICE conventions: comparisons yield 1.0/0.0,
``v(a)`` is a node voltage and ``v(a,b)`` the voltage difference
``v(a) - v(b)``.  Evaluation works pointwise on scalars or numpy arrays, so
the same AST serves parameter arithmetic and whole-waveform measures.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .units import UnitError, parse_value


class ExprError(ValueError):
    """Syntax or evaluation error; ``column`` is 1-based when known."""

    def __init__(self, message, column=None):
        if column is not None:
            message = f"{message} (column {column})"
        super().__init__(message)
        self.column = column


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Volt:
    node: str
    ref: str | None = None


@dataclass(frozen=True)
class Unary:
    op: str  # "abs" or "neg"
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # + - * / > < >= <=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Cond:
    test: "Expr"
    then: "Expr"
    other: "Expr"


Expr = Union[Num, Ref, Volt, Unary, Binary, Cond]

FUNCTIONS = ("abs",)

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?[a-zA-Z]*)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>>=|<=|[-+*/()?:,<>])"
    r")"
)


def _lex(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + 1 + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprError(f"unexpected character {text[col - 1]!r}", col)
        kind = m.lastgroup
        start = m.start(kind) + 1
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _lex(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, col = self.take()
        if text != value:
            raise ExprError(f"expected {value!r}, found {text or 'end of input'!r}", col)

    def parse(self):
        node = self.conditional()
        kind, text, col = self.peek()
        if kind != "end":
            raise ExprError(f"unexpected {text!r}", col)
        return node

    def conditional(self):
        test = self.comparison()
        if self.peek()[1] == "?":
            self.take()
            then = self.conditional()
            self.expect(":")
            other = self.conditional()
            return Cond(test, then, other)
        return test

    def comparison(self):
        left = self.additive()
        while self.peek()[1] in (">", "<", ">=", "<="):
            op = self.take()[1]
            left = Binary(op, left, self.additive())
        return left

    def additive(self):
        left = self.multiplicative()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            left = Binary(op, left, self.multiplicative())
        return left

    def multiplicative(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            left = Binary(op, left, self.unary())
        return left

    def unary(self):
        tok = self.peek()
        if tok[1] == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Unary("neg", arg)
        if tok[1] == "+":
            self.take()
            return self.unary()
        return self.primary()

    def primary(self):
        kind, text, col = self.take()
        if kind == "num":
            try:
                return Num(parse_value(text))
            except UnitError as exc:
                raise ExprError(str(exc), col) from None
        if kind == "name":
            if self.peek()[1] != "(":
                return Ref(text)
            self.take()
            lname = text.lower()
            if lname == "v":
                return self.voltage(col)
            if lname not in FUNCTIONS:
                raise ExprError(f"unknown function {text!r}", col)
            arg = self.conditional()
            self.expect(")")
            return Unary("abs", arg)
        if text == "(":
            node = self.conditional()
            self.expect(")")
            return node
        raise ExprError(f"unexpected {text or 'end of input'!r}", col)

    def voltage(self, col):
        nodes = []
        while True:
            kind, text, tcol = self.take()
            if kind not in ("name", "num"):
                raise ExprError("expected node name in v()", tcol)
            nodes.append(text)
            sep = self.take()
            if sep[1] == ")":
                break
            if sep[1] != "," or len(nodes) == 2:
                raise ExprError("malformed v() reference", sep[2])
        return Volt(nodes[0], nodes[1] if len(nodes) == 2 else None)


def parse_expr(text: str) -> Expr:
    """Parse expression source into an AST.

    Precedence from lowest: conditional ``?:``, comparisons, ``+ -``,
    ``* /``, unary minus.  Raises :class:`ExprError` with a column.
    """
    return _Parser(text).parse()


def _fmt_num(x):
    return repr(float(x))


def render_expr(node: Expr) -> str:
    """Canonical, fully parenthesised source text; reparses to an equal AST."""
    if isinstance(node, Num):
        text = _fmt_num(node.value)
        return f"({text})" if node.value < 0 else text
    if isinstance(node, Ref):
        return node.name
    if isinstance(node, Volt):
        return f"v({node.node},{node.ref})" if node.ref is not None else f"v({node.node})"
    if isinstance(node, Unary):
        if node.op == "abs":
            return f"abs({render_expr(node.arg)})"
        return f"(-{render_expr(node.arg)})"
    if isinstance(node, Binary):
        return f"({render_expr(node.left)} {node.op} {render_expr(node.right)})"
    if isinstance(node, Cond):
        return (f"({render_expr(node.test)} ? {render_expr(node.then)}"
                f" : {render_expr(node.other)})")
    raise TypeError(f"not an expression node: {node!r}")


def references(node: Expr) -> set[str]:
    """Parameter names referenced by ``node``."""
    if isinstance(node, Ref):
        return {node.name}
    if isinstance(node, (Num, Volt)):
        return set()
    if isinstance(node, Unary):
        return references(node.arg)
    if isinstance(node, Binary):
        return references(node.left) | references(node.right)
    return references(node.test) | references(node.then) | references(node.other)


def nodes(node: Expr) -> set[str]:
    """Circuit node names referenced through ``v()``."""
    if isinstance(node, Volt):
        return {node.node} | ({node.ref} if node.ref is not None else set())
    if isinstance(node, (Num, Ref)):
        return set()
    if isinstance(node, Unary):
        return nodes(node.arg)
    if isinstance(node, Binary):
        return nodes(node.left) | nodes(node.right)
    return nodes(node.test) | nodes(node.then) | nodes(node.other)


def _lookup(table, name, what):
    if name in table:
        return table[name]
    lowered = name.lower()
    for key, value in table.items():
        if key.lower() == lowered:
            return value
    raise ExprError(f"unbound {what} {name!r}")


def _node_voltage(samples, name):
    if name == "0" or name.lower() == "gnd":
        return 0.0
    return _lookup(samples, name, "node")


def eval_expr(node: Expr, env: Mapping[str, float] | None = None,
              samples: Mapping[str, object] | None = None):
    """Evaluate ``node`` with parameter bindings ``env`` and node voltages ``samples``.

    Values in ``samples`` may be floats or equally shaped numpy arrays; the
    result has the broadcast shape.  Both conditional branches are computed.
    """
    env = env or {}
    samples = samples or {}

    def ev(n):
        if isinstance(n, Num):
            return n.value
        if isinstance(n, Ref):
            return _lookup(env, n.name, "parameter")
        if isinstance(n, Volt):
            v = _node_voltage(samples, n.node)
            if n.ref is not None:
                v = v - _node_voltage(samples, n.ref)
            return v
        if isinstance(n, Unary):
            a = ev(n.arg)
            return np.abs(a) if n.op == "abs" else -a
        if isinstance(n, Binary):
            a, b = ev(n.left), ev(n.right)
            op = n.op
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if op == "/":
                if np.any(np.asarray(b) == 0):
                    raise ExprError(f"division by zero in {render_expr(n)}")
                return a / b
            if op == ">":
                return np.greater(a, b) * 1.0
            if op == "<":
                return np.less(a, b) * 1.0
            if op == ">=":
                return np.greater_equal(a, b) * 1.0
            return np.less_equal(a, b) * 1.0
        test, then, other = ev(n.test), ev(n.then), ev(n.other)
        return np.where(np.asarray(test) != 0, then, other)

    result = ev(node)
    if np.ndim(result) == 0:
        return float(result)
    return np.asarray(result, dtype=float)
