"""Lexer, parser and lowering for the optimization-deck dialect.

The dialect is the small HSPICE subset used to drive the optimizer:
``.PARAM`` (fixed, ``OPTn(init, min, max)`` and quoted derived
expressions), ``.MEAS``/``.MEASURE TRAN``, ``.MODEL <name> OPT``,
``.TRAN ... OPTIMIZE= RESULTS= MODEL=``, R/C/V/T element cards and the
field-solver geometry statements ``.MATERIAL``, ``.SHAPE``,
``.LAYERSTACK`` and ``.MODEL <name> W``.

Parsing is purely syntactic plus cross-reference checks.  Numeric
resolution of parameters, bounds and geometry happens in
:func:`lower_to_ir`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import expr as ex
from .expr import Expr, Num, Ref
from .units import UnitError, is_number, parse_value

__all__ = [
    "DeckError", "LexError", "LinkError", "Token", "tokenize", "parse_deck",
    "parse_text", "render_deck", "lower_to_ir", "Deck", "ParamDecl",
    "MeasureSpec", "OptModelDecl", "AnalysisDecl", "ElementCard",
    "ScenarioIR", "Stage", "BoundMeasure", "dump_ir",
]

REDUCERS = ("MIN", "MAX", "AVG", "INTEG")
ELEMENT_LETTERS = "RCVT"
STRICT_DIRECTIVES = {
    ".PARAM", ".PARAMS", ".MEAS", ".MEASURE", ".MODEL", ".TRAN",
    ".MATERIAL", ".SHAPE", ".LAYERSTACK", ".END",
}


class DeckError(ValueError):
    """Parse-level error; carries the 1-based line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LexError(DeckError):
    pass


class LinkError(DeckError):
    """A cross-reference (OPTIMIZE/RESULTS/MODEL, parameter) does not resolve."""

    def __init__(self, message, symbol=None, line=None):
        super().__init__(message, line)
        self.symbol = symbol


# --------------------------------------------------------------------------
# Tokens
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # directive | word | expr | punct | placeholder | eos
    text: str
    line: int
    col: int = 0

    def __repr__(self):
        if self.kind == "expr":
            return f"[EXPR:{self.text!r}]"
        if self.kind == "eos":
            return "[EOS]"
        return f"[{self.text}]"


_PUNCT = "(),="
_QUOTES = "'`"


def _statement_lines(text, strict):
    """Yield ``(first_line, [(line_no, content), ...])`` per logical statement."""
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("$", 1)[0].rstrip()
        stripped = line.lstrip()
        if not stripped:
            continue
        head = stripped[0]
        if head == "+":
            if current is None:
                if strict:
                    raise LexError("continuation line without a statement", lineno)
                warnings.warn(f"line {lineno}: dangling continuation ignored")
                continue
            current[1].append((lineno, stripped[1:]))
            continue
        is_element = (head.upper() in ELEMENT_LETTERS and len(stripped) > 1
                      and (stripped[1].isalnum() or stripped[1] == "_"))
        if head == "." or is_element:
            if current is not None:
                yield current
            current = (lineno, [(lineno, stripped)])
        # anything else is a comment line
    if current is not None:
        yield current


def _scan(segments, first_line):
    """Split one joined statement into tokens."""
    chars = []
    for lineno, content in segments:
        for col, ch in enumerate(content, start=1):
            chars.append((ch, lineno, col))
        chars.append((" ", lineno, len(content) + 1))
    tokens = []
    i = 0
    n = len(chars)

    def emit(kind, text, at):
        tokens.append(Token(kind, text, chars[at][1], chars[at][2]))

    while i < n:
        ch = chars[i][0]
        if ch.isspace():
            i += 1
            continue
        if ch in _QUOTES:
            j = i + 1
            while j < n and chars[j][0] != ch:
                j += 1
            if j >= n:
                raise LexError(f"unterminated {ch} quote", chars[i][1])
            body = "".join(c[0] for c in chars[i + 1:j]).strip()
            emit("expr", body, i)
            i = j + 1
            continue
        if ch in _PUNCT:
            emit("punct", ch, i)
            i += 1
            continue
        if ch == "<":
            j = i
            while j < n and chars[j][0] != ">":
                j += 1
            if j >= n:
                raise LexError("unterminated <placeholder>", chars[i][1])
            emit("placeholder", "".join(c[0] for c in chars[i:j + 1]), i)
            i = j + 1
            continue
        j = i
        while j < n and not chars[j][0].isspace() and chars[j][0] not in _PUNCT + _QUOTES:
            j += 1
        word = "".join(c[0] for c in chars[i:j])
        kind = "word"
        if not tokens and word.startswith("."):
            kind = "directive"
            word = word.upper()
        elif word == "...":
            kind = "placeholder"
        emit(kind, word, i)
        i = j
    return _fold_par(tokens)


def _fold_par(tokens):
    """Rewrite ``par ( 'x' )``, ``par 'x'`` and ``par `x` )`` to ``par`` EXPR."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind == "word" and tok.text.lower() == "par":
            j = i + 1
            opened = j < len(tokens) and tokens[j].text == "(" and tokens[j].kind == "punct"
            if opened:
                j += 1
            if j < len(tokens) and tokens[j].kind == "expr":
                body = tokens[j].text
                j += 1
                if opened:
                    if j >= len(tokens) or tokens[j].text != ")":
                        raise LexError("par( ... ) is missing ')'", tok.line)
                    j += 1
                else:
                    depth = body.count("(") - body.count(")")
                    while depth > 0 and j < len(tokens) and tokens[j].text == ")":
                        body += ")"
                        depth -= 1
                        j += 1
                out.append(tok)
                out.append(Token("expr", body, tokens[i + 1].line, tokens[i + 1].col))
                i = j
                continue
        out.append(tok)
        i += 1
    return out


def tokenize(text: str, strict: bool = False) -> list[Token]:
    """Tokenize deck source.

    Continuation lines (leading ``+``) are joined to their statement; lines
    that start with neither ``.``, ``+`` nor an element letter are comments.
    Quoted expressions become single ``expr`` tokens.  Every statement ends
    with an ``eos`` token.
    """
    tokens = []
    for first_line, segments in _statement_lines(text, strict):
        stmt = _scan(segments, first_line)
        if stmt:
            tokens.extend(stmt)
            tokens.append(Token("eos", "", first_line))
    return tokens


# --------------------------------------------------------------------------
# Deck structure
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamDecl:
    name: str
    kind: str  # fixed | opt | derived
    value: Expr | None = None  # fixed / derived
    init: Expr | None = None
    min: Expr | None = None
    max: Expr | None = None
    opt_group: str | None = None
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class MeasureSpec:
    name: str
    analysis_kind: str = "tran"
    reducer: str | None = None
    expr: Expr | None = None
    goal: Expr | None = None
    t_from: Expr | None = None
    t_to: Expr | None = None
    placeholders: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class OptModelDecl:
    """Optimizer controls; field names map to CLOSE, RELIN, RELOUT, ITROPT."""

    name: str = "default"
    rel_param_tol: float = 1e-4
    rel_result_tol: float = 1e-5
    close: float = 0.1
    max_iters: int = 60
    placeholders: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.rel_param_tol <= 0 or self.rel_result_tol <= 0 or self.close <= 0:
            raise DeckError(f"optimizer model {self.name!r}: tolerances must be > 0")
        if self.max_iters < 1:
            raise DeckError(f"optimizer model {self.name!r}: ITROPT must be >= 1")


_OPT_OPTIONS = {"CLOSE": "close", "RELIN": "rel_param_tol",
                "RELOUT": "rel_result_tol", "ITROPT": "max_iters"}


@dataclass(frozen=True)
class AnalysisDecl:
    tstep: Expr
    tstop: Expr
    optimize_group: str | None = None
    results_measure: str | None = None
    model: str | None = None
    extras: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SourceCard:
    kind: str  # pulse | pwl | dc
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class ElementCard:
    kind: str  # R | C | V | T
    name: str
    nodes: tuple[str, ...]
    value: Expr | None = None
    source: SourceCard | None = None
    options: tuple[tuple[str, Expr], ...] = ()
    line: int = field(default=0, compare=False)


# Generic option items for the geometry statements: a value is a raw word,
# an Expr (quoted) or a tuple of (key | None, value) items.

@dataclass(frozen=True)
class MaterialDecl:
    name: str
    kind: str  # DIELECTRIC | METAL
    props: tuple[tuple[str, object], ...]


@dataclass(frozen=True)
class ShapeDecl:
    name: str
    kind: str
    props: tuple[tuple[str, object], ...]


@dataclass(frozen=True)
class LayerStackDecl:
    name: str
    items: tuple[tuple[str | None, object], ...]


@dataclass(frozen=True)
class WModelDecl:
    name: str
    items: tuple[tuple[str | None, object], ...]


@dataclass(frozen=True)
class StriplineGeometryDecl:
    """Cross-section record assembled from the field-solver statements.

    Every dimension is an expression (usually a parameter reference)
    resolved against the parameter table at lowering time.
    """

    er: Expr
    loss_tangent: Expr
    conductivity: Expr
    linewidth: Expr
    metal_thickness: Expr
    dielectric_t: Expr
    total_dielectric_t: Expr | None
    pitch: Expr
    rlgc_file: str | None = None
    fs_options: str | None = None


@dataclass
class Deck:
    params: dict[str, ParamDecl] = field(default_factory=dict)
    measures: dict[str, MeasureSpec] = field(default_factory=dict)
    opt_models: dict[str, OptModelDecl] = field(default_factory=dict)
    analyses: list[AnalysisDecl] = field(default_factory=list)
    elements: list[ElementCard] = field(default_factory=list)
    materials: dict[str, MaterialDecl] = field(default_factory=dict)
    shapes: dict[str, ShapeDecl] = field(default_factory=dict)
    layerstacks: dict[str, LayerStackDecl] = field(default_factory=dict)
    w_models: dict[str, WModelDecl] = field(default_factory=dict)

    @property
    def geometry(self) -> StriplineGeometryDecl | None:
        if not self.w_models:
            return None
        return _geometry_from(self)

    def opt_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for p in self.params.values():
            if p.kind == "opt":
                groups.setdefault(p.opt_group, []).append(p.name)
        return groups

    def same_structure(self, other: "Deck") -> bool:
        """Field equality including declaration order of every ordered map."""
        if self != other:
            return False
        return all(list(getattr(self, f)) == list(getattr(other, f))
                   for f in ("params", "measures", "opt_models", "materials",
                             "shapes", "layerstacks", "w_models"))


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _split_statements(tokens):
    stmt = []
    for tok in tokens:
        if tok.kind == "eos":
            if stmt:
                yield stmt
            stmt = []
        else:
            stmt.append(tok)
    if stmt:
        yield stmt


class _Cursor:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0

    @property
    def line(self):
        if self.i < len(self.toks):
            return self.toks[self.i].line
        return self.toks[-1].line if self.toks else None

    def done(self):
        return self.i >= len(self.toks)

    def peek(self, k=0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def take(self):
        if self.done():
            raise DeckError("unexpected end of statement", self.line)
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def accept(self, text):
        tok = self.peek()
        if tok is not None and tok.kind == "punct" and tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text):
        if not self.accept(text):
            tok = self.peek()
            found = tok.text if tok else "end of statement"
            raise DeckError(f"expected {text!r}, found {found!r}", self.line)

    def word(self, what="name"):
        tok = self.take()
        if tok.kind != "word":
            raise DeckError(f"expected {what}, found {tok.text!r}", tok.line)
        return tok.text


def _word_value(tok) -> Expr:
    """A bare word as an expression: numeric literal or parameter reference."""
    if tok.kind == "expr":
        try:
            return ex.parse_expr(tok.text)
        except ex.ExprError as exc:
            raise DeckError(f"bad expression {tok.text!r}: {exc}", tok.line) from None
    if tok.kind != "word":
        raise DeckError(f"expected a value, found {tok.text!r}", tok.line)
    text = tok.text
    if text[0].isdigit() or text[0] in "+-.":
        try:
            return Num(parse_value(text))
        except UnitError as exc:
            raise DeckError(str(exc), tok.line) from None
    if not (text[0].isalpha() or text[0] == "_") or not all(
            c.isalnum() or c == "_" for c in text):
        raise DeckError(f"not a value or identifier: {text!r}", tok.line)
    return Ref(text)


def _generic_value(cur):
    tok = cur.peek()
    if tok is None:
        raise DeckError("missing value", cur.line)
    if tok.kind == "punct" and tok.text == "(":
        cur.take()
        items = _generic_items(cur, closing=")")
        return items
    cur.take()
    if tok.kind == "expr":
        return _word_value(tok)
    if tok.kind in ("word", "placeholder"):
        return tok.text
    raise DeckError(f"unexpected {tok.text!r}", tok.line)


def _generic_items(cur, closing=None):
    items = []
    while not cur.done():
        if closing and cur.accept(closing):
            return tuple(items)
        if cur.accept(","):
            continue
        tok = cur.peek()
        nxt = cur.peek(1)
        if tok.kind == "word" and nxt is not None and nxt.kind == "punct" and nxt.text == "=":
            cur.take()
            cur.take()
            items.append((tok.text, _generic_value(cur)))
        else:
            items.append((None, _generic_value(cur)))
    if closing:
        raise DeckError(f"missing {closing!r}", cur.line)
    return tuple(items)


def _item(items, key):
    for k, v in items:
        if k is not None and k.upper() == key:
            return v
    return None


def _items_all(items, key):
    return [v for k, v in items if k is not None and k.upper() == key]


def _as_expr(value, line=None) -> Expr:
    if isinstance(value, (Num, Ref, ex.Volt, ex.Unary, ex.Binary, ex.Cond)):
        return value
    if isinstance(value, str):
        return _word_value(Token("word", value, line or 0))
    raise DeckError(f"expected a scalar value, found {value!r}", line)


class _DeckParser:
    def __init__(self, strict):
        self.strict = strict
        self.deck = Deck()

    def unknown(self, what, line):
        if self.strict:
            raise DeckError(f"unsupported statement {what}", line)
        warnings.warn(f"line {line}: ignoring unsupported statement {what}")

    def statement(self, toks):
        head = toks[0]
        cur = _Cursor(toks[1:])
        if head.kind == "directive":
            d = head.text
            if d in (".PARAM", ".PARAMS"):
                self.param(cur, head.line)
            elif d in (".MEAS", ".MEASURE"):
                self.measure(cur, head.line)
            elif d == ".MODEL":
                self.model(cur, head.line)
            elif d == ".TRAN":
                self.tran(cur, head.line)
            elif d == ".MATERIAL":
                self.material(cur, head.line)
            elif d == ".SHAPE":
                self.shape(cur, head.line)
            elif d == ".LAYERSTACK":
                name = cur.word("layer stack name")
                self._unique(self.deck.layerstacks, name, head.line)
                self.deck.layerstacks[name] = LayerStackDecl(name, _generic_items(cur))
            elif d == ".END":
                pass
            else:
                self.unknown(d, head.line)
            return
        letter = head.text[0].upper()
        if letter in ELEMENT_LETTERS:
            self.element(letter, head, cur)
        else:
            self.unknown(head.text, head.line)

    def _unique(self, table, name, line, what="name"):
        if name in table:
            raise DeckError(f"duplicate {what} {name!r}", line)

    def param(self, cur, line):
        while not cur.done():
            if cur.accept(","):
                continue
            tok = cur.take()
            if tok.kind != "word":
                raise DeckError(f"expected parameter name, found {tok.text!r}", tok.line)
            name = tok.text
            cur.expect("=")
            val = cur.take()
            if name in self.deck.params:
                raise DeckError(f"duplicate parameter {name!r}", tok.line)
            nxt = cur.peek()
            if (val.kind == "word" and val.text.lower().startswith("opt")
                    and nxt is not None and nxt.text == "("):
                cur.take()
                args = []
                while True:
                    if cur.accept(")"):
                        break
                    if cur.accept(","):
                        continue
                    args.append(_word_value(cur.take()))
                if len(args) != 3:
                    raise DeckError(f"{val.text}() needs (init, min, max)", tok.line)
                decl = ParamDecl(name, "opt", init=args[0], min=args[1], max=args[2],
                                 opt_group=val.text.lower(), line=tok.line)
            else:
                value = _word_value(val)
                kind = "fixed" if isinstance(value, Num) and val.kind == "word" else "derived"
                decl = ParamDecl(name, kind, value=value, line=tok.line)
            self.deck.params[name] = decl

    def measure(self, cur, line):
        kind = cur.word("analysis kind")
        if kind.upper() != "TRAN":
            raise DeckError(f"only TRAN measures are supported, got {kind!r}", line)
        name = cur.word("measure name")
        self._unique(self.deck.measures, name, line, "measure")
        reducer = expr_ = goal = t_from = t_to = None
        placeholders = []
        while not cur.done():
            tok = cur.take()
            up = tok.text.upper()
            if tok.kind == "placeholder":
                placeholders.append(tok.text)
            elif tok.kind == "word" and up in REDUCERS and reducer is None:
                reducer = up
            elif tok.kind == "word" and up == "PAR":
                tok = cur.take()
                if tok.kind != "expr":
                    raise DeckError("par must be followed by a quoted expression", tok.line)
                expr_ = _word_value(tok)
            elif tok.kind == "expr":
                expr_ = _word_value(tok)
            elif tok.kind == "word" and up in ("GOAL", "FROM", "TO"):
                cur.expect("=")
                vtok = cur.take()
                if vtok.kind == "placeholder":
                    placeholders.append(f"{up}={vtok.text}")
                    continue
                value = _word_value(vtok)
                if up == "GOAL":
                    goal = value
                elif up == "FROM":
                    t_from = value
                else:
                    t_to = value
            else:
                raise DeckError(f"unexpected {tok.text!r} in .MEASURE", tok.line)
        self.deck.measures[name] = MeasureSpec(
            name, "tran", reducer, expr_, goal, t_from, t_to, tuple(placeholders), line)

    def model(self, cur, line):
        name = cur.word("model name")
        mtype = cur.word("model type").upper()
        if mtype == "OPT":
            self._unique(self.deck.opt_models, name, line, "model")
            kwargs = {}
            placeholders = []
            for key, value in _generic_items(cur):
                if key is None and isinstance(value, str) and value.startswith("<"):
                    placeholders.append(value)
                    continue
                if key is None or key.upper() not in _OPT_OPTIONS:
                    if self.strict:
                        raise DeckError(f"unsupported OPT model option {key or value!r}", line)
                    warnings.warn(f"line {line}: ignoring OPT option {key or value!r}")
                    continue
                expr_ = _as_expr(value, line)
                if not isinstance(expr_, Num):
                    raise DeckError(f"{key} must be numeric", line)
                attr = _OPT_OPTIONS[key.upper()]
                kwargs[attr] = int(expr_.value) if attr == "max_iters" else expr_.value
            self.deck.opt_models[name] = OptModelDecl(
                name, placeholders=tuple(placeholders), line=line, **kwargs)
        elif mtype == "W":
            self._unique(self.deck.w_models, name, line, "model")
            self.deck.w_models[name] = WModelDecl(name, _generic_items(cur))
        else:
            self.unknown(f".MODEL {mtype}", line)

    def tran(self, cur, line):
        tstep = _word_value(cur.take())
        tstop = _word_value(cur.take())
        refs = {}
        extras = []
        while not cur.done():
            tok = cur.take()
            nxt = cur.peek()
            if tok.kind == "word" and nxt is not None and nxt.text == "=":
                key = tok.text.upper()
                cur.take()
                if key not in ("OPTIMIZE", "RESULTS", "MODEL"):
                    raise DeckError(f"unsupported .TRAN option {tok.text!r}", tok.line)
                refs[key] = cur.word(key)
            elif tok.kind == "word" and tok.text.upper() in ("LIN", "SWEEP"):
                extras.append(tok.text.upper())
            else:
                raise DeckError(f"unexpected {tok.text!r} in .TRAN", tok.line)
        group = refs.get("OPTIMIZE")
        self.deck.analyses.append(AnalysisDecl(
            tstep, tstop, group.lower() if group else None, refs.get("RESULTS"),
            refs.get("MODEL"), tuple(extras), line))

    def material(self, cur, line):
        name = cur.word("material name")
        kind = cur.word("material kind").upper()
        if kind not in ("DIELECTRIC", "METAL"):
            raise DeckError(f"unknown material kind {kind!r}", line)
        self._unique(self.deck.materials, name, line, "material")
        props = tuple((k.upper(), _as_expr(v, line)) for k, v in _generic_items(cur)
                      if k is not None)
        self.deck.materials[name] = MaterialDecl(name, kind, props)

    def shape(self, cur, line):
        name = cur.word("shape name")
        kind = cur.word("shape kind").upper()
        if kind != "RECTANGLE":
            raise DeckError(f"unsupported shape {kind!r}", line)
        self._unique(self.deck.shapes, name, line, "shape")
        props = tuple((k.upper(), _as_expr(v, line)) for k, v in _generic_items(cur)
                      if k is not None)
        self.deck.shapes[name] = ShapeDecl(name, kind, props)

    def element(self, letter, head, cur):
        name = head.text
        line = head.line
        if letter in "RC":
            n1, n2 = cur.word("node"), cur.word("node")
            value = _word_value(cur.take())
            card = ElementCard(letter, name, (n1, n2), value=value, line=line)
        elif letter == "V":
            n1, n2 = cur.word("node"), cur.word("node")
            tok = cur.take()
            up = tok.text.upper()
            if tok.kind == "word" and up in ("PULSE", "PWL"):
                cur.expect("(")
                args = []
                while not cur.accept(")"):
                    if cur.accept(","):
                        continue
                    args.append(_word_value(cur.take()))
                card = ElementCard("V", name, (n1, n2),
                                   source=SourceCard(up.lower(), tuple(args)), line=line)
            else:
                if tok.kind == "word" and up == "DC":
                    tok = cur.take()
                card = ElementCard("V", name, (n1, n2),
                                   source=SourceCard("dc", (_word_value(tok),)), line=line)
        else:
            nodes = tuple(cur.word("node") for _ in range(4))
            opts = []
            for key, value in _generic_items(cur):
                if key is None or key.upper() not in ("Z0", "TD"):
                    raise DeckError(f"T element needs Z0= and TD=, got {key or value!r}", line)
                opts.append((key.upper(), _as_expr(value, line)))
            card = ElementCard("T", name, nodes, options=tuple(opts), line=line)
        if not cur.done():
            raise DeckError(f"unexpected {cur.peek().text!r} after element {name}", line)
        if any(e.name.upper() == name.upper() for e in self.deck.elements):
            raise DeckError(f"duplicate element {name!r}", line)
        self.deck.elements.append(card)


def _check_forward_refs(deck):
    declared = []
    positions = {name: i for i, name in enumerate(deck.params)}
    for i, p in enumerate(deck.params.values()):
        exprs = [p.value, p.init, p.min, p.max]
        for e in exprs:
            if e is None:
                continue
            for ref in ex.references(e):
                if ref == p.name:
                    raise DeckError(f"parameter {p.name!r} references itself", p.line)
                if positions.get(ref, -1) > i:
                    raise DeckError(
                        f"parameter {p.name!r} references {ref!r} before its declaration",
                        p.line)
        declared.append(p.name)


def _link(deck):
    groups = deck.opt_groups()
    for a in deck.analyses:
        if a.optimize_group is None and a.results_measure is None and a.model is None:
            continue
        for key, value in (("OPTIMIZE", a.optimize_group), ("RESULTS", a.results_measure),
                           ("MODEL", a.model)):
            if value is None:
                raise LinkError(f".TRAN is missing {key}=", key, a.line)
        if a.optimize_group not in groups:
            raise LinkError(f"OPTIMIZE={a.optimize_group} names no OPT parameters",
                            a.optimize_group, a.line)
        if a.results_measure not in deck.measures:
            raise LinkError(f"RESULTS={a.results_measure} names no .MEASURE",
                            a.results_measure, a.line)
        if a.model not in deck.opt_models:
            raise LinkError(f"MODEL={a.model} names no .MODEL ... OPT", a.model, a.line)
    for w in deck.w_models.values():
        stack = _item(w.items, "LAYERSTACK")
        if stack is not None and stack not in deck.layerstacks:
            raise LinkError(f"W model {w.name!r} references unknown layer stack {stack!r}", stack)
        for cond in _items_all(w.items, "CONDUCTOR"):
            shape = _item(cond, "SHAPE")
            mat = _item(cond, "MATERIAL")
            if shape not in deck.shapes:
                raise LinkError(f"conductor references unknown shape {shape!r}", shape)
            if mat not in deck.materials:
                raise LinkError(f"conductor references unknown material {mat!r}", mat)


def parse_deck(tokens: Iterable[Token], strict: bool = False,
               fragment: bool = False) -> Deck:
    """Build a :class:`Deck` from a token stream.

    ``strict`` turns unsupported statements into errors.  ``fragment``
    skips the cross-reference link step so that partial listings (a lone
    ``.TRAN`` block, say) can be checked syntactically.
    """
    parser = _DeckParser(strict)
    for stmt in _split_statements(list(tokens)):
        parser.statement(stmt)
    deck = parser.deck
    _check_forward_refs(deck)
    if not fragment:
        _link(deck)
    return deck


def parse_text(text: str, strict: bool = False, fragment: bool = False) -> Deck:
    return parse_deck(tokenize(text, strict=strict), strict=strict, fragment=fragment)


# --------------------------------------------------------------------------
# Pretty printer
# --------------------------------------------------------------------------

def _rv(e: Expr) -> str:
    """Render a value: bare literal or identifier where possible, else quoted."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Ref):
        return e.name
    return "'" + ex.render_expr(e) + "'"


def _render_generic(value):
    if isinstance(value, tuple):
        return "(" + ", ".join(_render_item(k, v) for k, v in value) + ")"
    if isinstance(value, str):
        return value
    return _rv(value)


def _render_item(key, value):
    return _render_generic(value) if key is None else f"{key}={_render_generic(value)}"


def render_deck(deck: Deck) -> str:
    """Canonical deck source; ``parse_text(render_deck(d)) == d``."""
    out = []
    for p in deck.params.values():
        if p.kind == "opt":
            out.append(f".PARAM {p.name}={p.opt_group.upper()}"
                       f"({_rv(p.init)}, {_rv(p.min)}, {_rv(p.max)})")
        elif p.kind == "fixed":
            out.append(f".PARAM {p.name}={_rv(p.value)}")
        else:
            out.append(f".PARAM {p.name}='{ex.render_expr(p.value)}'")
    for m in deck.materials.values():
        props = " ".join(f"{k}={_rv(v)}" for k, v in m.props)
        out.append(f".MATERIAL {m.name} {m.kind} {props}".rstrip())
    for s in deck.shapes.values():
        props = " ".join(f"{k}={_rv(v)}" for k, v in s.props)
        out.append(f".SHAPE {s.name} {s.kind} {props}".rstrip())
    for s in deck.layerstacks.values():
        out.append(f".LAYERSTACK {s.name}")
        out.extend(f"+ {_render_item(k, v)}" for k, v in s.items)
    for w in deck.w_models.values():
        out.append(f".MODEL {w.name} W")
        out.extend(f"+ {_render_item(k, v)}" for k, v in w.items)
    for e in deck.elements:
        nodes = " ".join(e.nodes)
        if e.kind in "RC":
            out.append(f"{e.name} {nodes} {_rv(e.value)}")
        elif e.kind == "V":
            src = e.source
            if src.kind == "dc":
                out.append(f"{e.name} {nodes} DC {_rv(src.args[0])}")
            else:
                args = " ".join(_rv(a) for a in src.args)
                out.append(f"{e.name} {nodes} {src.kind.upper()}({args})")
        else:
            opts = " ".join(f"{k}={_rv(v)}" for k, v in e.options)
            out.append(f"{e.name} {nodes} {opts}")
    for m in deck.measures.values():
        parts = [f".MEAS TRAN {m.name}"]
        if m.reducer:
            parts.append(m.reducer)
        if m.expr is not None:
            parts.append(f"par('{ex.render_expr(m.expr)}')")
        if m.t_from is not None:
            parts.append(f"FROM={_rv(m.t_from)}")
        if m.t_to is not None:
            parts.append(f"TO={_rv(m.t_to)}")
        if m.goal is not None:
            parts.append(f"GOAL={_rv(m.goal)}")
        parts.extend(m.placeholders)
        out.append(" ".join(parts))
    for m in deck.opt_models.values():
        out.append(f".MODEL {m.name} OPT CLOSE={m.close!r} RELIN={m.rel_param_tol!r} "
                   f"RELOUT={m.rel_result_tol!r} ITROPT={m.max_iters}"
                   + "".join(" " + p for p in m.placeholders))
    for a in deck.analyses:
        parts = [f".TRAN {_rv(a.tstep)} {_rv(a.tstop)}", *a.extras]
        line = " ".join(parts)
        if a.optimize_group:
            line += (f"\n+ OPTIMIZE={a.optimize_group} RESULTS={a.results_measure}"
                     f" MODEL={a.model}")
        out.append(line)
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# Geometry from field-solver statements
# --------------------------------------------------------------------------

def _geometry_from(deck) -> StriplineGeometryDecl:
    if len(deck.w_models) != 1:
        raise DeckError("exactly one W model is supported")
    w = next(iter(deck.w_models.values()))
    conductors = _items_all(w.items, "CONDUCTOR")
    if len(conductors) != 2:
        raise DeckError(f"W model {w.name!r} must define a conductor pair")
    shape = deck.shapes.get(_item(conductors[0], "SHAPE"))
    metal = deck.materials.get(_item(conductors[0], "MATERIAL"))
    stack = deck.layerstacks.get(_item(w.items, "LAYERSTACK"))
    if shape is None or metal is None or stack is None:
        raise LinkError(f"W model {w.name!r} has unresolved shape/material/layer stack")
    dielectric = None
    total_t = None
    for key, layer in stack.items:
        if key is None or key.upper() != "LAYER" or not isinstance(layer, tuple):
            continue
        mat_name = layer[0][1]
        mat = deck.materials.get(mat_name)
        if mat is not None and mat.kind == "DIELECTRIC":
            dielectric = mat
            total_t = _as_expr(layer[1][1])
    if dielectric is None:
        raise LinkError(f"layer stack {stack.name!r} has no dielectric layer")

    def prop(decl, key):
        for k, v in decl.props:
            if k == key:
                return v
        raise LinkError(f"{decl.name!r} lacks {key}", key)

    x1, y1 = (_as_expr(v) for _, v in _item(conductors[0], "ORIGIN"))
    x2, _ = (_as_expr(v) for _, v in _item(conductors[1], "ORIGIN"))
    pitch = x2 if x1 == Num(0.0) else ex.Binary("-", x2, x1)
    rlgc = _item(w.items, "RLGCFILE")
    fs = _item(w.items, "FSOPTIONS")
    return StriplineGeometryDecl(
        er=prop(dielectric, "ER"),
        loss_tangent=prop(dielectric, "LOSSTANGENT"),
        conductivity=prop(metal, "CONDUCTIVITY"),
        linewidth=prop(shape, "WIDTH"),
        metal_thickness=prop(shape, "HEIGHT"),
        dielectric_t=y1,
        total_dielectric_t=total_t,
        pitch=pitch,
        rlgc_file=rlgc if isinstance(rlgc, str) else None,
        fs_options=fs if isinstance(fs, str) else None,
    )


# --------------------------------------------------------------------------
# Lowering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamEntry:
    name: str
    kind: str
    value: float
    min: float | None = None
    max: float | None = None
    group: str | None = None
    expr: Expr | None = None


@dataclass(frozen=True)
class BoundMeasure:
    """A .MEASURE bound to node names, ready to evaluate on waveforms."""

    name: str
    reducer: str
    expr: Expr
    goal: float | None
    t_from: float | None
    t_to: float | None
    nodes: frozenset

    def evaluate(self, waveforms: Mapping[str, object], env: Mapping[str, float]):
        from .measure import MeasureResult, reduce

        if not waveforms:
            raise DeckError(f"measure {self.name!r}: no waveforms supplied")
        first = next(iter(waveforms.values()))
        t = first.times()
        samples = {}
        for node in self.nodes:
            w = _lookup_node(waveforms, node)
            if len(w.samples) != len(t):
                raise DeckError(f"measure {self.name!r}: node {node!r} is on a different grid")
            samples[node] = w.samples
        values = ex.eval_expr(self.expr, env, samples)
        values = np.broadcast_to(np.asarray(values, dtype=float), t.shape)
        keep = np.ones(t.shape, dtype=bool)
        if self.t_from is not None:
            keep &= t >= self.t_from - 1e-6 * first.dt
        if self.t_to is not None:
            keep &= t <= self.t_to + 1e-6 * first.dt
        value = reduce(t[keep], values[keep], self.reducer)
        return MeasureResult(self.name, value, self.reducer, int(keep.sum()))


def _lookup_node(waveforms, node):
    if node in waveforms:
        return waveforms[node]
    for key, w in waveforms.items():
        if key.lower() == node.lower():
            return w
    raise DeckError(f"no waveform for node {node!r}")


@dataclass(frozen=True)
class Stage:
    index: int
    group: str
    variables: tuple[str, ...]
    measure: str
    model: str
    tstep: float
    tstop: float
    carry_over: bool


@dataclass
class ScenarioIR:
    params: dict[str, ParamEntry]
    order: list[str]
    measures: dict[str, BoundMeasure]
    models: dict[str, OptModelDecl]
    stages: list[Stage]
    elements: list[ElementCard]
    geometry_decl: StriplineGeometryDecl | None
    simulate_only: bool

    def resolve(self, overrides: Mapping[str, float] | None = None) -> dict[str, float]:
        """Re-evaluate the parameter table with new fixed/OPT values.

        Derived parameters are recomputed in declaration order, so a new
        ``linewidth`` propagates to ``scale_factor``, ``pitch`` and so on.
        """
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise LinkError(f"unknown parameter(s) {sorted(unknown)}", sorted(unknown)[0])
        env: dict[str, float] = {}
        for name in self.order:
            p = self.params[name]
            if p.kind == "derived":
                env[name] = float(ex.eval_expr(p.expr, env))
            else:
                env[name] = float(overrides.get(name, p.value))
        return env

    def variables(self, group: str, env: Mapping[str, float] | None = None):
        from .optimize import OptVariable

        env = env or {}
        out = []
        for name in self.order:
            p = self.params[name]
            if p.kind == "opt" and p.group == group:
                cur = float(env.get(name, p.value))
                out.append(OptVariable(name, cur, p.min, p.max))
        return out

    def geometry_at(self, env: Mapping[str, float]):
        from .channel import StriplineGeometry

        g = self.geometry_decl
        if g is None:
            raise DeckError("deck declares no stripline geometry")

        def val(e, what):
            try:
                return float(ex.eval_expr(e, env))
            except ex.ExprError as exc:
                raise LinkError(f"geometry {what}: {exc}", what) from None

        return StriplineGeometry(
            linewidth=val(g.linewidth, "linewidth"),
            metal_thickness=val(g.metal_thickness, "metal_thickness"),
            dielectric_t=val(g.dielectric_t, "dielectric_t"),
            pitch=val(g.pitch, "pitch"),
            er=val(g.er, "er"),
            loss_tangent=val(g.loss_tangent, "loss_tangent"),
            conductivity=val(g.conductivity, "conductivity"),
        )

    def source_waveforms(self, env: Mapping[str, float], t: np.ndarray):
        """Waveforms of grounded V-source nodes (mask and window generators)."""
        from .sources import Dc, Pulse, Pwl, eval_source
        from .waveform import Waveform

        out = {}
        for e in self.elements:
            if e.kind != "V" or e.nodes[1] not in ("0", "gnd", "GND"):
                continue
            args = [float(ex.eval_expr(a, env)) for a in e.source.args]
            if e.source.kind == "pulse":
                kind = Pulse(*args)
            elif e.source.kind == "pwl":
                kind = Pwl(tuple(args[0::2]), tuple(args[1::2]))
            else:
                kind = Dc(args[0])
            dt = t[1] - t[0]
            out[e.nodes[0]] = Waveform(float(t[0]), float(dt), eval_source(kind, t))
        return out


def lower_to_ir(deck: Deck) -> ScenarioIR:
    """Resolve a linked deck into an executable :class:`ScenarioIR`."""
    env: dict[str, float] = {}
    params: dict[str, ParamEntry] = {}

    def value(e, owner):
        try:
            return float(ex.eval_expr(e, env))
        except ex.ExprError as exc:
            raise LinkError(f"parameter {owner!r}: {exc}", owner) from None

    for p in deck.params.values():
        if p.kind == "opt":
            init, lo, hi = value(p.init, p.name), value(p.min, p.name), value(p.max, p.name)
            if not lo < hi:
                raise DeckError(f"{p.name}: OPT bounds need min < max", p.line)
            if not lo <= init <= hi:
                raise DeckError(f"{p.name}: initial value outside [min, max]", p.line)
            params[p.name] = ParamEntry(p.name, "opt", init, lo, hi, p.opt_group)
            env[p.name] = init
        elif p.kind == "fixed":
            params[p.name] = ParamEntry(p.name, "fixed", value(p.value, p.name))
            env[p.name] = params[p.name].value
        else:
            params[p.name] = ParamEntry(p.name, "derived", value(p.value, p.name),
                                        expr=p.value)
            env[p.name] = params[p.name].value

    measures = {}
    for m in deck.measures.values():
        if m.reducer is None or m.expr is None:
            raise DeckError(f"measure {m.name!r} needs a reducer and an expression", m.line)
        for ref in ex.references(m.expr):
            if ref not in env:
                raise LinkError(f"measure {m.name!r} references unknown parameter {ref!r}",
                                ref, m.line)
        goal = value(m.goal, m.name) if m.goal is not None else None
        t_from = value(m.t_from, m.name) if m.t_from is not None else None
        t_to = value(m.t_to, m.name) if m.t_to is not None else None
        measures[m.name] = BoundMeasure(m.name, m.reducer, m.expr, goal, t_from, t_to,
                                        frozenset(ex.nodes(m.expr)))

    groups = deck.opt_groups()
    stages = []
    for a in deck.analyses:
        if a.optimize_group is None:
            continue
        tstep, tstop = value(a.tstep, ".TRAN"), value(a.tstop, ".TRAN")
        if tstep <= 0 or tstop <= tstep:
            raise DeckError(".TRAN needs 0 < tstep < tstop", a.line)
        stages.append(Stage(len(stages), a.optimize_group, tuple(groups[a.optimize_group]),
                            a.results_measure, a.model, tstep, tstop,
                            carry_over=len(stages) > 0))

    ir = ScenarioIR(params, list(params), measures, dict(deck.opt_models), stages,
                    list(deck.elements), None, simulate_only=not stages)
    if deck.w_models:
        ir.geometry_decl = deck.geometry
        ir.geometry_at(env)  # surface unresolved references now
    for e in deck.elements:
        exprs = [e.value] if e.value is not None else []
        if e.source is not None:
            exprs.extend(e.source.args)
        exprs.extend(v for _, v in e.options)
        for x in exprs:
            for ref in ex.references(x):
                if ref not in env:
                    raise LinkError(f"element {e.name} references unknown parameter {ref!r}",
                                    ref, e.line)
    return ir


def dump_ir(ir: ScenarioIR) -> str:
    """Human-readable IR listing for ``si-opt parse --dump-ir``."""
    lines = ["# parameters"]
    for name in ir.order:
        p = ir.params[name]
        if p.kind == "opt":
            lines.append(f"{name} opt {p.group} init={p.value!r} min={p.min!r} max={p.max!r}")
        elif p.kind == "derived":
            lines.append(f"{name} derived {ex.render_expr(p.expr)} = {p.value!r}")
        else:
            lines.append(f"{name} fixed {p.value!r}")
    lines.append("# measures")
    for m in ir.measures.values():
        lines.append(f"{m.name} {m.reducer} {ex.render_expr(m.expr)} goal={m.goal!r}"
                     f" from={m.t_from!r} to={m.t_to!r} nodes={sorted(m.nodes)}")
    lines.append("# stages")
    if ir.simulate_only:
        lines.append("(simulate only)")
    for s in ir.stages:
        lines.append(f"{s.index}: optimize {s.group} {list(s.variables)} results={s.measure}"
                     f" model={s.model} tstep={s.tstep!r} tstop={s.tstop!r}"
                     f" carry_over={s.carry_over}")
    if ir.geometry_decl is not None:
        g = ir.geometry_at(ir.resolve())
        lines.append("# geometry")
        lines.append(repr(g))
    return "\n".join(lines) + "\n"
