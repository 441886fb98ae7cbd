"""SPICE-flavoured netlist parser.

Grammar, one card per logical line:

    * comment                      (a leading comment line becomes the title)
    R1 a 0 50                      ; inline comment
    C2 in out {cr/4}
    V1 g 0 SIN(0 1u 1g)
    +  ...                         continuation of the previous card
    QSEB1 g r alphaG=0.9 alphaR=0.1 gamma=0.5g temp=0.1
    QDQD1 g1 g2 a11=0.5 a22=0.5 tc=5g gcr=0.5g gphi=0 temp=0.1
    .param cr=400f
    .tran 1p 20n
    .end

Keywords, names and nodes are case-insensitive and normalised to lower case.
Numbers accept the engineering suffixes f p n u m k meg g t; trailing unit
letters are ignored, so ``1m`` is 1e-3 and ``1meg`` is 1e6.

The parser only checks syntax. Values are kept as normalised source text in
the AST and evaluated by :func:`qcosim.circuit.elaborate`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

_SUFFIX = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
    "g": 1e9,
    "t": 1e12,
}
_NUMBER_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkgt])?([a-z]*)$"
)
_NAME_RE = re.compile(r"^[a-z_][a-z0-9_]*$")

ELEMENT_KINDS = ("r", "c", "l", "v", "i", "qseb", "qdqd")
DIRECTIVES = (
    "param",
    "tran",
    "acq",
    "sweep",
    "harm",
    "print",
    "probe",
    "options",
    "title",
    "end",
)
QSEB_KEYS = ("alphag", "alphar", "gamma", "temp")
QDQD_KEYS = ("a11", "a12", "a21", "a22", "tc", "gcr", "gphi", "temp")


class NetlistError(Exception):
    """User-facing netlist problem, optionally tied to a source position."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        if line is not None:
            loc = f"line {line}" + (f", column {column}" if column is not None else "")
            super().__init__(f"{loc}: {message}")
        else:
            super().__init__(message)


class NetlistSyntaxError(NetlistError):
    pass


# ---------------------------------------------------------------------------
# Numbers and expressions
# ---------------------------------------------------------------------------


def parse_number(text: str) -> float:
    """Parse a SPICE number such as ``400f``, ``1meg`` or ``2.5e-3``."""
    m = _NUMBER_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"malformed number {text!r}")
    value = float(m.group(1))
    if m.group(2):
        value *= _SUFFIX[m.group(2)]
    return value


def is_number(text: str) -> bool:
    return bool(_NUMBER_RE.match(text.strip().lower()))


_EXPR_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?[a-z]*)|(?P<name>[a-z_][a-z0-9_]*)|(?P<op>[-+*/^(),]))"
)
_FUNCTIONS = {"sqrt": math.sqrt, "abs": abs, "exp": math.exp, "log": math.log}
_CONSTANTS = {"pi": math.pi}


@dataclass(frozen=True)
class Expr:
    """Parsed compile-time expression tree (tuples of op and operands)."""

    text: str
    tree: tuple

    def names(self) -> set:
        out = set()

        def walk(node):
            if node[0] == "name":
                out.add(node[1])
            elif node[0] in ("call",):
                for arg in node[2]:
                    walk(arg)
            elif node[0] != "num":
                for arg in node[1:]:
                    walk(arg)

        walk(self.tree)
        return out

    def evaluate(self, lookup) -> float:
        def ev(node):
            op = node[0]
            if op == "num":
                return node[1]
            if op == "name":
                return lookup(node[1])
            if op == "neg":
                return -ev(node[1])
            if op == "call":
                return _FUNCTIONS[node[1]](*(ev(a) for a in node[2]))
            a, b = ev(node[1]), ev(node[2])
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if op == "/":
                if b == 0:
                    raise ZeroDivisionError(f"division by zero in {{{self.text}}}")
                return a / b
            return a**b

        return float(ev(self.tree))


def parse_expression(text: str) -> Expr:
    """Parse ``text`` (without braces) into an :class:`Expr`.

    Raises ValueError with a character offset on syntax errors.
    """
    src = text.lower()
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _EXPR_TOKEN_RE.match(src, pos)
        if not m:
            raise ValueError(f"unexpected character {src[pos:].lstrip()[:1]!r}", pos)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    i = 0

    def peek():
        return tokens[i]

    def take():
        nonlocal i
        tok = tokens[i]
        i += 1
        return tok

    def expect(value):
        tok = take()
        if tok[1] != value:
            raise ValueError(f"expected {value!r}", tok[2])

    def expr():
        node = term()
        while peek()[1] in ("+", "-") and peek()[0] == "op":
            op = take()[1]
            node = (op, node, term())
        return node

    def term():
        node = factor()
        while peek()[1] in ("*", "/") and peek()[0] == "op":
            op = take()[1]
            node = (op, node, factor())
        return node

    def factor():
        if peek()[0] == "op" and peek()[1] in ("+", "-"):
            op = take()[1]
            inner = factor()
            return ("neg", inner) if op == "-" else inner
        node = primary()
        if peek()[0] == "op" and peek()[1] == "^":
            take()
            node = ("^", node, factor())
        return node

    def primary():
        kind, value, offset = take()
        if kind == "num":
            try:
                return ("num", parse_number(value))
            except ValueError:
                raise ValueError(f"malformed number {value!r}", offset) from None
        if kind == "name":
            if peek()[1] == "(" and peek()[0] == "op":
                if value not in _FUNCTIONS:
                    raise ValueError(f"unknown function {value!r}", offset)
                take()
                args = [expr()]
                while peek()[1] == ",":
                    take()
                    args.append(expr())
                expect(")")
                return ("call", value, tuple(args))
            if value in _CONSTANTS:
                return ("num", _CONSTANTS[value])
            return ("name", value)
        if value == "(":
            node = expr()
            expect(")")
            return node
        raise ValueError("unexpected end of expression" if kind == "end" else f"unexpected {value!r}", offset)

    tree = expr()
    if peek()[0] != "end":
        raise ValueError(f"unexpected {peek()[1]!r}", peek()[2])
    return Expr(re.sub(r"\s+", "", src), tree)


def value_expression(token: str) -> Expr:
    """Expression for a value token: number, parameter name or ``{expr}``."""
    if token.startswith("{"):
        return parse_expression(token[1:-1])
    if is_number(token):
        return Expr(token, ("num", parse_number(token)))
    if _NAME_RE.match(token):
        return Expr(token, ("name", token))
    raise ValueError(f"malformed number {token!r}", 0)


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Position:
    line: int
    column: int


@dataclass(frozen=True)
class SourceSpec:
    kind: str  # "dc" | "sin" | "pulse"
    args: tuple


@dataclass(frozen=True)
class ElementCard:
    name: str
    kind: str
    nodes: tuple
    value: str | None = None
    source: SourceSpec | None = None
    params: tuple = ()
    pos: Position | None = field(default=None, compare=False)


@dataclass(frozen=True)
class DirectiveCard:
    name: str
    args: tuple = ()
    params: tuple = ()
    pos: Position | None = field(default=None, compare=False)


@dataclass(frozen=True)
class NetlistAst:
    title: str
    elements: tuple
    directives: tuple

    def element(self, name: str) -> ElementCard:
        for card in self.elements:
            if card.name == name:
                return card
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Tok:
    text: str
    line: int
    col: int


def _tokenize_line(text: str, lineno: int, offset: int = 0) -> list:
    toks = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace() or ch == ",":
            i += 1
        elif ch in "()=":
            toks.append(_Tok(ch, lineno, offset + i + 1))
            i += 1
        elif ch == "{":
            depth = 0
            j = i
            while j < n:
                if text[j] == "{":
                    depth += 1
                elif text[j] == "}":
                    depth -= 1
                    if depth == 0:
                        break
                j += 1
            if j >= n:
                raise NetlistSyntaxError("unterminated '{' expression", lineno, offset + i + 1)
            body = re.sub(r"\s+", "", text[i + 1 : j]).lower()
            toks.append(_Tok("{" + body + "}", lineno, offset + i + 1))
            i = j + 1
        elif ch == "}":
            raise NetlistSyntaxError("unmatched '}'", lineno, offset + i + 1)
        else:
            j = i
            while j < n and not (text[j].isspace() or text[j] in "(),={}"):
                j += 1
            toks.append(_Tok(text[i:j].lower(), lineno, offset + i + 1))
            i = j
    return toks


def _logical_cards(text: str):
    """Yield (tokens, raw_first_line) per card and the title (if any)."""
    cards: list = []
    title = ""
    seen_card = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0]
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("*"):
            if not seen_card and not title:
                title = stripped.lstrip("*").strip()
            continue
        offset = len(line) - len(line.lstrip())
        if stripped.startswith("+"):
            if not cards:
                raise NetlistSyntaxError("continuation line without a card", lineno, offset + 1)
            cards[-1][0].extend(_tokenize_line(stripped[1:], lineno, offset + 1))
            continue
        seen_card = True
        cards.append((_tokenize_line(stripped, lineno, offset), stripped))
    return title, cards


# ---------------------------------------------------------------------------
# Card parsers
# ---------------------------------------------------------------------------


def _err(tok: _Tok, message: str) -> NetlistSyntaxError:
    return NetlistSyntaxError(message, tok.line, tok.col)


def _check_value(tok: _Tok) -> str:
    try:
        value_expression(tok.text)
    except ValueError as exc:
        msg = exc.args[0]
        col = tok.col + (exc.args[1] + 1 if len(exc.args) > 1 and tok.text.startswith("{") else 0)
        raise NetlistSyntaxError(msg, tok.line, col) from None
    return tok.text


def _check_node(tok: _Tok) -> str:
    if tok.text in "()={}" or tok.text.startswith("{"):
        raise _err(tok, f"invalid node name {tok.text!r}")
    return tok.text


def _element_kind(name: str) -> str | None:
    for kind in ("qseb", "qdqd"):
        if name.startswith(kind):
            return kind
    if name[0] in "rclvi":
        return name[0]
    return None


def _parse_keyvals(toks, start: int, allowed, card: str):
    params = []
    seen = set()
    i = start
    while i < len(toks):
        key = toks[i]
        if i + 2 >= len(toks) + 0 and (i + 1 >= len(toks) or toks[i + 1].text != "="):
            raise _err(key, f"expected key=value in {card}")
        if i + 1 >= len(toks) or toks[i + 1].text != "=":
            raise _err(key, f"expected key=value in {card}")
        if i + 2 >= len(toks):
            raise _err(toks[i + 1], f"missing value for {key.text!r}")
        if allowed is not None and key.text not in allowed:
            raise _err(key, f"unknown parameter {key.text!r} for {card}")
        if not _NAME_RE.match(key.text):
            raise _err(key, f"invalid parameter name {key.text!r}")
        if key.text in seen:
            raise _err(key, f"duplicate parameter {key.text!r}")
        seen.add(key.text)
        params.append((key.text, _check_value(toks[i + 2])))
        i += 3
    return tuple(params)


_SOURCE_ARITY = {"sin": (3, 4), "pulse": (7, 7)}


def _parse_source(toks, name: str) -> SourceSpec:
    head = toks[0]
    kind = head.text
    if kind in _SOURCE_ARITY:
        if len(toks) < 2 or toks[1].text != "(":
            raise _err(head, f"expected '(' after {kind.upper()}")
        if toks[-1].text != ")":
            raise _err(toks[-1], f"expected ')' to close {kind.upper()}")
        args = toks[2:-1]
        lo, hi = _SOURCE_ARITY[kind]
        if not lo <= len(args) <= hi:
            raise _err(head, f"{kind.upper()} takes {lo if lo == hi else f'{lo} to {hi}'} arguments, got {len(args)}")
        return SourceSpec(kind, tuple(_check_value(t) for t in args))
    if kind == "dc":
        toks = toks[1:]
        if not toks:
            raise _err(head, "missing DC value")
    if len(toks) != 1:
        raise _err(toks[min(1, len(toks) - 1)], f"unexpected token {toks[-1].text!r} in source {name}")
    return SourceSpec("dc", (_check_value(toks[0]),))


def _parse_element(toks) -> ElementCard:
    head = toks[0]
    name = head.text
    kind = _element_kind(name)
    if kind is None:
        raise _err(head, f"unknown card type {name!r}")
    if not re.match(r"^[a-z0-9_]+$", name):
        raise _err(head, f"invalid element name {name!r}")
    pos = Position(head.line, head.col)
    if len(toks) < 3:
        raise _err(head, f"{name}: expected two nodes")
    nodes = (_check_node(toks[1]), _check_node(toks[2]))
    rest = toks[3:]
    if kind in ("r", "c", "l"):
        if not rest:
            raise _err(head, f"{name}: missing value")
        if len(rest) > 1:
            raise _err(rest[1], f"{name}: unexpected token {rest[1].text!r}")
        return ElementCard(name, kind, nodes, value=_check_value(rest[0]), pos=pos)
    if kind in ("v", "i"):
        if not rest:
            raise _err(head, f"{name}: missing source value")
        return ElementCard(name, kind, nodes, source=_parse_source(rest, name), pos=pos)
    allowed = QSEB_KEYS if kind == "qseb" else QDQD_KEYS
    return ElementCard(name, kind, nodes, params=_parse_keyvals(toks, 3, allowed, name), pos=pos)


def _parse_directive(toks, raw: str) -> DirectiveCard:
    head = toks[0]
    name = head.text[1:]
    pos = Position(head.line, head.col)
    if name not in DIRECTIVES:
        raise _err(head, f"unknown card type {head.text!r}")
    body = toks[1:]
    if name == "title":
        return DirectiveCard(name, (raw.split(None, 1)[1] if " " in raw.strip() else "",), pos=pos)
    if name in ("param", "options"):
        if name == "param" and not body:
            raise _err(head, ".param needs at least one name=value")
        return DirectiveCard(name, (), _parse_keyvals(body, 0, None, "." + name), pos=pos)
    args = []
    params = []
    i = 0
    while i < len(body):
        tok = body[i]
        if i + 1 < len(body) and body[i + 1].text == "=":
            if i + 2 >= len(body):
                raise _err(body[i + 1], f"missing value for {tok.text!r}")
            params.append((tok.text, _check_value(body[i + 2])))
            i += 3
            continue
        if tok.text in "()=":
            raise _err(tok, f"unexpected {tok.text!r}")
        args.append(tok.text)
        i += 1
    _check_directive(name, args, body, head)
    return DirectiveCard(name, tuple(args), tuple(params), pos=pos)


def _check_directive(name: str, args: list, body, head: _Tok):
    def numeric(indices):
        for k in indices:
            tok = next(t for t in body if t.text == args[k])
            _check_value(tok)

    if name == "tran":
        if len(args) not in (2, 3):
            raise _err(head, ".tran expects tstep tstop [tstart]")
        numeric(range(len(args)))
    elif name == "acq":
        if len(args) != 4 or args[3] not in ("dec", "lin"):
            raise _err(head, ".acq expects fstart fstop npoints dec|lin")
        numeric(range(3))
    elif name == "harm":
        if len(args) != 3:
            raise _err(head, ".harm expects f0 nharm ncycles")
        numeric(range(3))
    elif name == "sweep":
        if not args or len(args) % 4:
            raise _err(head, ".sweep expects groups of: name start stop npoints")
        if len(args) > 8:
            raise _err(head, ".sweep supports at most two axes")
        for g in range(0, len(args), 4):
            if not _NAME_RE.match(args[g]):
                raise _err(head, f"invalid sweep variable {args[g]!r}")
            numeric(range(g + 1, g + 4))
    elif name == "print":
        targets = args[1:] if args and args[0] in ("tran", "acq", "harm") else args
        if not targets:
            raise _err(head, ".print needs at least one target")
        for t in targets:
            if t.count(".") != 1 or not all(t.split(".")):
                raise _err(head, f"print target {t!r} must look like name.quantity")
    elif name == "probe":
        if not args:
            raise _err(head, ".probe needs at least one node")


def parse(text: str) -> NetlistAst:
    """Parse netlist text into a :class:`NetlistAst`.

    Raises
    ------
    NetlistSyntaxError
        With the line and column of the offending token.
    """
    title, cards = _logical_cards(text)
    elements = []
    directives = []
    names = {}
    for toks, raw in cards:
        if not toks:
            continue  # separators only
        head = toks[0]
        if head.text.startswith("."):
            card = _parse_directive(toks, raw)
            if card.name == "end":
                break
            if card.name == "title":
                title = card.args[0]
                continue
            directives.append(card)
        else:
            card = _parse_element(toks)
            if card.name in names:
                raise _err(head, f"duplicate element name {card.name!r} (first defined on line {names[card.name]})")
            names[card.name] = head.line
            elements.append(card)
    return NetlistAst(title, tuple(elements), tuple(directives))


def parse_file(path) -> NetlistAst:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------


def _format_card(card) -> str:
    if isinstance(card, ElementCard):
        parts = [card.name.upper(), *card.nodes]
        if card.value is not None:
            parts.append(card.value)
        if card.source is not None:
            if card.source.kind == "dc":
                parts.append(card.source.args[0])
            else:
                parts.append(f"{card.source.kind.upper()}({' '.join(card.source.args)})")
        parts.extend(f"{k}={v}" for k, v in card.params)
        return " ".join(parts)
    parts = ["." + card.name, *card.args]
    parts.extend(f"{k}={v}" for k, v in card.params)
    return " ".join(parts)


def format_netlist(ast: NetlistAst) -> str:
    """Render an AST back to netlist text that parses to an equal AST."""
    lines = []
    if ast.title:
        lines.append(f".title {ast.title}")
    lines.extend(_format_card(c) for c in ast.elements)
    lines.extend(_format_card(c) for c in ast.directives)
    lines.append(".end")
    return "\n".join(lines) + "\n"
