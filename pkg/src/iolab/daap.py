"""Disjoint Array Access Program (DAAP) IR, parser and validator.

A program is a tree of half-open ``loop v in lo..hi { ... }`` blocks whose
leaves are statements of the form ``S: A[i,j] = f(B[i,k], C[k,j])``.  The
function body is opaque; only the access vectors matter for the analyses.

Example::

    param N
    loop k in 0..N {
      loop i in k+1..N {
        S1: A[i,k] = f(A[i,k], A[k,k]) @outdeg1(A)
      }
    }
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import sympy


class DaapError(ValueError):
    """Base class for program construction errors."""


class DaapSyntaxError(DaapError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class DaapValidationError(DaapError):
    pass


class DisjointAccessError(DaapValidationError):
    def __init__(self, violations: list["DisjointViolation"]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass(frozen=True)
class Affine:
    """``base + offset`` where base is a variable/parameter name or None."""

    base: str | None
    offset: int = 0

    def evaluate(self, env: Mapping[str, int]) -> int:
        if self.base is None:
            return self.offset
        try:
            return env[self.base] + self.offset
        except KeyError:
            raise DaapError(f"unbound name {self.base!r}") from None

    def to_sympy(self, symbols: Mapping[str, sympy.Symbol]) -> sympy.Expr:
        if self.base is None:
            return sympy.Integer(self.offset)
        return symbols[self.base] + self.offset

    def __str__(self) -> str:
        if self.base is None:
            return str(self.offset)
        if self.offset == 0:
            return self.base
        sign = "+" if self.offset > 0 else "-"
        return f"{self.base}{sign}{abs(self.offset)}"


@dataclass(frozen=True)
class IterVar:
    name: str
    level: int


@dataclass(frozen=True)
class RangeExpr:
    lower: Affine
    upper: Affine

    def __str__(self) -> str:
        return f"{self.lower}..{self.upper}"


@dataclass(frozen=True)
class Loop:
    var: IterVar
    range: RangeExpr


@dataclass(frozen=True)
class AccessVector:
    array: str
    components: tuple[str, ...]

    @property
    def variables(self) -> tuple[str, ...]:
        """Distinct iteration variables, in first-appearance order."""
        return tuple(dict.fromkeys(self.components))

    @property
    def access_dim(self) -> int:
        return len(self.variables)

    def __str__(self) -> str:
        return f"{self.array}[{','.join(self.components)}]"


@dataclass(frozen=True)
class Statement:
    id: str
    loop_nest: tuple[Loop, ...]
    output: AccessVector
    inputs: tuple[AccessVector, ...]
    outdeg1: tuple[str, ...] = ()
    function: str = "f"

    @property
    def depth(self) -> int:
        return len(self.loop_nest)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(lp.var.name for lp in self.loop_nest)

    def __str__(self) -> str:
        args = ", ".join(str(a) for a in self.inputs)
        text = f"{self.id}: {self.output} = {self.function}({args})"
        for name in self.outdeg1:
            text += f" @outdeg1({name})"
        return text


@dataclass(frozen=True)
class LoopNode:
    """A loop block in the program tree; body holds LoopNodes and statement ids."""

    loop: Loop
    body: tuple["LoopNode | str", ...]


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    array: str


@dataclass(frozen=True)
class Program:
    parameters: tuple[str, ...]
    statements: tuple[Statement, ...]
    body: tuple[LoopNode | str, ...] = ()
    producer_consumer: tuple[Edge, ...] = field(default=())

    def statement(self, sid: str) -> Statement:
        for s in self.statements:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def producers_of(self, array: str) -> list[Statement]:
        return [s for s in self.statements if s.output.array == array]

    def readers_of(self, array: str) -> list[tuple[Statement, AccessVector]]:
        return [(s, a) for s in self.statements for a in s.inputs if a.array == array]

    def is_pure_input(self, array: str) -> bool:
        return not self.producers_of(array)


# --------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<range>\.\.)
  | (?P<at>@outdeg1)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<sym>[{}\[\](),:=+\-])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"param", "loop", "in"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DaapSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("ident",) and m.group() in _KEYWORDS:
            toks.append(_Tok("kw", m.group(), line, col))
        elif kind == "sym":
            toks.append(_Tok(m.group(), m.group(), line, col))
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.params: list[str] = []
        self.statements: list[Statement] = []
        self.arrays: dict[str, int] = {}

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            got = tok.text or tok.kind
            raise DaapSyntaxError(f"expected {want!r}, got {got!r}", tok.line, tok.col)
        return tok

    def error(self, message: str, tok: _Tok):
        raise DaapValidationError(f"{message} (line {tok.line}, column {tok.col})")

    def parse(self) -> Program:
        body: list[LoopNode | str] = []
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.kind == "kw" and tok.text == "param":
                self.next()
                name = self.expect("ident")
                if name.text in self.params:
                    self.error(f"duplicate parameter {name.text!r}", name)
                self.params.append(name.text)
            elif tok.kind == "kw" and tok.text == "loop":
                body.append(self.loop_block(()))
            else:
                raise DaapSyntaxError(
                    f"expected 'param' or 'loop', got {tok.text or tok.kind!r}", tok.line, tok.col
                )
        return Program(tuple(self.params), tuple(self.statements), tuple(body))

    def affine(self, scope: Sequence[str]) -> Affine:
        base: str | None = None
        offset = 0
        sign = 1
        first = True
        while True:
            tok = self.next()
            if tok.kind == "int":
                offset += sign * int(tok.text)
            elif tok.kind == "ident":
                if base is not None or sign < 0:
                    raise DaapSyntaxError("bound is not of the form name +/- constant", tok.line, tok.col)
                if tok.text not in scope and tok.text not in self.params:
                    self.error(f"undeclared variable {tok.text!r} in loop bound", tok)
                base = tok.text
            elif first and tok.kind == "-":
                sign = -1
                continue
            else:
                raise DaapSyntaxError(f"bad bound token {tok.text or tok.kind!r}", tok.line, tok.col)
            first = False
            if self.peek().kind in ("+", "-"):
                sign = 1 if self.next().kind == "+" else -1
                continue
            return Affine(base, offset)

    def loop_block(self, outer: tuple[Loop, ...]) -> LoopNode:
        self.expect("kw", "loop")
        name = self.expect("ident")
        scope = [lp.var.name for lp in outer]
        if name.text in scope:
            self.error(f"iteration variable {name.text!r} shadows an outer loop", name)
        if name.text in self.params:
            self.error(f"iteration variable {name.text!r} shadows a parameter", name)
        self.expect("kw", "in")
        lo = self.affine(scope)
        self.expect("range")
        hi = self.affine(scope)
        loop = Loop(IterVar(name.text, len(outer) + 1), RangeExpr(lo, hi))
        nest = outer + (loop,)
        self.expect("{")
        body: list[LoopNode | str] = []
        while self.peek().kind != "}":
            tok = self.peek()
            if tok.kind == "eof":
                raise DaapSyntaxError("unterminated loop block", tok.line, tok.col)
            if tok.kind == "kw" and tok.text == "loop":
                body.append(self.loop_block(nest))
            else:
                body.append(self.statement(nest))
        self.expect("}")
        return LoopNode(loop, tuple(body))

    def access(self, nest: tuple[Loop, ...]) -> AccessVector:
        arr = self.expect("ident")
        self.expect("[")
        comps = [self.expect("ident")]
        while self.peek().kind == ",":
            self.next()
            comps.append(self.expect("ident"))
        self.expect("]")
        names = {lp.var.name for lp in nest}
        for c in comps:
            if c.text not in names:
                self.error(f"undeclared variable {c.text!r} in access to {arr.text}", c)
        dim = self.arrays.setdefault(arr.text, len(comps))
        if dim != len(comps):
            self.error(
                f"dimensionality mismatch for array {arr.text!r}: {len(comps)} vs {dim}", arr
            )
        return AccessVector(arr.text, tuple(c.text for c in comps))

    def statement(self, nest: tuple[Loop, ...]) -> str:
        sid = self.expect("ident")
        if any(s.id == sid.text for s in self.statements):
            self.error(f"duplicate statement id {sid.text!r}", sid)
        self.expect(":")
        out = self.access(nest)
        self.expect("=")
        fn = self.expect("ident")
        self.expect("(")
        inputs: list[AccessVector] = []
        if self.peek().kind != ")":
            inputs.append(self.access(nest))
            while self.peek().kind == ",":
                self.next()
                inputs.append(self.access(nest))
        self.expect(")")
        flags: list[str] = []
        while self.peek().kind == "at":
            self.next()
            self.expect("(")
            flags.append(self.expect("ident").text)
            self.expect(")")
        for name in flags:
            if name not in {a.array for a in inputs}:
                self.error(f"@outdeg1({name}) names no input array", sid)
        self.statements.append(
            Statement(sid.text, nest, out, tuple(inputs), tuple(flags), fn.text)
        )
        return sid.text


def derive_edges(statements: Sequence[Statement]) -> tuple[Edge, ...]:
    """Producer-consumer edges: S precedes T in program order and T reads S's output array."""
    edges = []
    for a, s in enumerate(statements):
        for t in statements[a + 1:]:
            if any(inp.array == s.output.array for inp in t.inputs):
                edges.append(Edge(s.id, t.id, s.output.array))
    return tuple(edges)


def parse_program(text: str, *, check_disjoint: bool = True) -> Program:
    """Parse DSL source into a validated :class:`Program`."""
    prog = _Parser(text).parse()
    prog = Program(prog.parameters, prog.statements, prog.body, derive_edges(prog.statements))
    if check_disjoint:
        violations = validate_disjoint_access(prog)
        if violations:
            raise DisjointAccessError(violations)
    return prog


def format_program(program: Program) -> str:
    lines = [f"param {p}" for p in program.parameters]
    by_id = {s.id: s for s in program.statements}

    def emit(node: LoopNode | str, indent: int):
        pad = "  " * indent
        if isinstance(node, str):
            lines.append(pad + str(by_id[node]))
            return
        lines.append(f"{pad}loop {node.loop.var.name} in {node.loop.range} {{")
        for child in node.body:
            emit(child, indent + 1)
        lines.append(pad + "}")

    for node in program.body:
        emit(node, 0)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# disjoint access

@dataclass(frozen=True)
class DisjointViolation:
    statement: str
    first: AccessVector
    second: AccessVector

    def __str__(self) -> str:
        return (
            f"statement {self.statement}: accesses {self.first} and {self.second} "
            "may reference the same element version"
        )


def _feasible(statement: Statement, params: Sequence[str], equalities: Sequence[tuple[str, str]]) -> bool:
    """Bellman-Ford on the difference-constraint system of the iteration domain.

    Bounds are ``name + c`` so every constraint is ``x - y <= w``; parameters
    are constrained to be >= 1.  Difference systems with integer weights have
    integer solutions whenever they are feasible, so this is exact.
    """
    zero = "__0__"
    nodes = [zero, *params, *statement.variables]
    edges: list[tuple[str, str, int]] = []  # (u, v, w): v - u <= w

    def le(x: str, y: str, w: int):  # x - y <= w
        edges.append((y, x, w))

    for p in params:
        le(zero, p, -1)
    for lp in statement.loop_nest:
        x = lp.var.name
        lo, hi = lp.range.lower, lp.range.upper
        le(lo.base or zero, x, -lo.offset)      # x >= lo
        le(x, hi.base or zero, hi.offset - 1)   # x <= hi - 1
    for a, b in equalities:
        le(a, b, 0)
        le(b, a, 0)
    dist = {n: 0 for n in nodes}
    for _ in range(len(nodes)):
        changed = False
        for u, v, w in edges:
            if dist[u] + w < dist[v]:
                dist[v] = dist[u] + w
                changed = True
        if not changed:
            return True
    return False


def validate_disjoint_access(program: Program) -> list[DisjointViolation]:
    """Report input access pairs of one array that can alias at one iteration point.

    The output may repeat an input vector: it denotes a newer version of the element.
    """
    found = []
    for s in program.statements:
        for a, b in itertools.combinations(s.inputs, 2):
            if a.array != b.array:
                continue
            eqs = [(x, y) for x, y in zip(a.components, b.components) if x != y]
            if _feasible(s, program.parameters, eqs):
                found.append(DisjointViolation(s.id, a, b))
    return found


# --------------------------------------------------------------------------
# iteration domains

def _check_params(program_params: Sequence[str], params: Mapping[str, int]):
    for p in program_params:
        if p not in params:
            raise DaapError(f"unbound parameter {p!r}")
        if int(params[p]) < 1:
            raise DaapError(f"parameter {p!r} must be a positive integer")


def _enumerate_count(nest: Sequence[Loop], env: dict[str, int]) -> int:
    if not nest:
        return 1
    if len(nest) == 1:
        lp = nest[0]
        return max(0, lp.range.upper.evaluate(env) - lp.range.lower.evaluate(env))
    if len(nest) == 2:
        outer, inner = nest
        lo, hi = outer.range.lower.evaluate(env), outer.range.upper.evaluate(env)
        if hi <= lo:
            return 0
        vals = np.arange(lo, hi, dtype=np.int64)

        def ev(a: Affine):
            if a.base == outer.var.name:
                return vals + a.offset
            return a.evaluate(env)

        ext = ev(inner.range.upper) - ev(inner.range.lower)
        return int(np.clip(ext, 0, None).sum()) if np.ndim(ext) else max(0, int(ext)) * len(vals)
    lp = nest[0]
    total = 0
    for x in range(lp.range.lower.evaluate(env), lp.range.upper.evaluate(env)):
        env[lp.var.name] = x
        total += _enumerate_count(nest[1:], env)
    env.pop(lp.var.name, None)
    return total


def volume_expr(statement: Statement, parameters: Sequence[str]) -> sympy.Expr:
    """Closed-form |V_S| as a polynomial in the parameters.

    Exact only when no loop range has negative extent inside the domain;
    :func:`iteration_count` cross-checks it against enumeration.
    """
    syms = {p: sympy.Symbol(p, positive=True, integer=True) for p in parameters}
    for lp in statement.loop_nest:
        syms[lp.var.name] = sympy.Symbol(lp.var.name, integer=True)
    expr: sympy.Expr = sympy.Integer(1)
    for lp in reversed(statement.loop_nest):
        v = syms[lp.var.name]
        lo, hi = lp.range.lower.to_sympy(syms), lp.range.upper.to_sympy(syms)
        expr = sympy.summation(expr, (v, lo, hi - 1))
    return sympy.expand(expr)


def iteration_count(
    statement: Statement,
    params: Mapping[str, int],
    *,
    parameters: Sequence[str] | None = None,
    method: str = "auto",
    threshold: int = 4_000_000,
) -> int:
    """Exact number of iteration vectors |V_S| of ``statement``."""
    names = parameters if parameters is not None else _referenced_params(statement)
    _check_params(names, params)
    env = {p: int(params[p]) for p in names}
    if method == "auto":
        # outer levels are walked in Python; the innermost two are vectorized
        work = 1
        for _ in statement.loop_nest[:-2]:
            work *= max(env.values(), default=1) + 1
        method = "enumerate" if work <= threshold else "symbolic"
    if method == "enumerate":
        return _enumerate_count(statement.loop_nest, dict(env))
    if method == "symbolic":
        expr = volume_expr(statement, names)
        return int(expr.subs({sympy.Symbol(p, positive=True, integer=True): v for p, v in env.items()}))
    raise ValueError(f"unknown method {method!r}")


def _referenced_params(statement: Statement) -> list[str]:
    loop_vars = set(statement.variables)
    out = []
    for lp in statement.loop_nest:
        for a in (lp.range.lower, lp.range.upper):
            if a.base and a.base not in loop_vars and a.base not in out:
                out.append(a.base)
    return out


def executions(program: Program, params: Mapping[str, int]) -> Iterator[tuple[Statement, dict[str, int]]]:
    """Yield (statement, iteration vector) in program execution order."""
    _check_params(program.parameters, params)
    by_id = {s.id: s for s in program.statements}
    env = {p: int(params[p]) for p in program.parameters}

    def walk(nodes):
        for node in nodes:
            if isinstance(node, str):
                s = by_id[node]
                yield s, {v: env[v] for v in s.variables}
                continue
            name = node.loop.var.name
            lo = node.loop.range.lower.evaluate(env)
            hi = node.loop.range.upper.evaluate(env)
            for x in range(lo, hi):
                env[name] = x
                yield from walk(node.body)
            env.pop(name, None)

    yield from walk(program.body)


# --------------------------------------------------------------------------
# canonical JSON

def _affine_json(a: Affine) -> dict:
    return {"base": a.base, "offset": a.offset}


def _access_json(a: AccessVector) -> dict:
    return {"array": a.array, "components": list(a.components)}


def program_to_dict(program: Program) -> dict:
    def node(n):
        if isinstance(n, str):
            return {"statement": n}
        return {
            "loop": n.loop.var.name,
            "lower": _affine_json(n.loop.range.lower),
            "upper": _affine_json(n.loop.range.upper),
            "body": [node(c) for c in n.body],
        }

    return {
        "parameters": list(program.parameters),
        "statements": [
            {
                "id": s.id,
                "loops": [
                    {"var": lp.var.name, "level": lp.var.level,
                     "lower": _affine_json(lp.range.lower), "upper": _affine_json(lp.range.upper)}
                    for lp in s.loop_nest
                ],
                "output": _access_json(s.output),
                "inputs": [_access_json(a) for a in s.inputs],
                "access_dims": [a.access_dim for a in s.inputs],
                "outdeg1": list(s.outdeg1),
                "function": s.function,
            }
            for s in program.statements
        ],
        "body": [node(n) for n in program.body],
        "producer_consumer": [
            {"producer": e.producer, "consumer": e.consumer, "array": e.array}
            for e in program.producer_consumer
        ],
    }


def program_to_json(program: Program) -> str:
    return json.dumps(program_to_dict(program), indent=2, sort_keys=True)


def program_from_dict(data: dict) -> Program:
    def aff(d):
        return Affine(d["base"], int(d["offset"]))

    def acc(d):
        return AccessVector(d["array"], tuple(d["components"]))

    stmts = []
    loops_by_key: dict[tuple, Loop] = {}
    for sd in data["statements"]:
        nest = []
        for ld in sd["loops"]:
            loop = Loop(IterVar(ld["var"], int(ld["level"])), RangeExpr(aff(ld["lower"]), aff(ld["upper"])))
            nest.append(loops_by_key.setdefault((len(nest), loop), loop))
        stmts.append(Statement(sd["id"], tuple(nest), acc(sd["output"]),
                               tuple(acc(a) for a in sd["inputs"]), tuple(sd.get("outdeg1", ())),
                               sd.get("function", "f")))

    def node(d, depth):
        if "statement" in d:
            return d["statement"]
        loop = Loop(IterVar(d["loop"], depth + 1), RangeExpr(aff(d["lower"]), aff(d["upper"])))
        return LoopNode(loop, tuple(node(c, depth + 1) for c in d["body"]))

    edges = tuple(Edge(e["producer"], e["consumer"], e["array"]) for e in data.get("producer_consumer", ()))
    return Program(tuple(data["parameters"]), tuple(stmts), tuple(node(n, 0) for n in data["body"]), edges)
