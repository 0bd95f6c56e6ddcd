"""Input DSL, emitters (pseudocode / records / tree), and the CLI driver.

Input files have an ``equation:`` section (infix expressions over ``+ - *``
with ``inv(.)``, ``trans(.)`` or postfix ``'``, the identity literal ``I``
and numeric literals), an ``operands:`` section
(``name : kind(dims), Prop, Prop``), and optional ``sequence:`` and
``config:`` sections.  ``#`` starts a line comment.

Declarative extension files use the same expression grammar with every
identifier read as a pattern variable::

    rule inv_orth: inv(Q) | orthogonal(Q) -> trans(Q)
    kernel waxpby prec=2 cost=3*rows(x): alpha*x + beta*y | scalar(alpha), ...
    infer inv_spd: inv(A) | spd(A) => SPD
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import sympy as sp

from .ir import (
    CompileError,
    Dim,
    Equation,
    EquationSet,
    Expression,
    IDENTITY_NAME,
    Inverse,
    Kind,
    Minus,
    Operand,
    OperandInfo,
    PatVar,
    Plus,
    Prop,
    ScalarLiteral,
    Times,
    Transpose,
    UndeclaredOperand,
    WILD,
    identity_operand,
    make_operand,
    normalize,
    operand,
    positions,
)
from .kernels import KernelDescriptor, default_registry, make_declarative_kernel
from .knowledge import InferenceRule
from .rewrite import RewriteRule, builtin_rules
from .search import (
    Algorithm,
    DerivationTree,
    FactorStatement,
    GenerationResult,
    KernelStatement,
    SearchConfig,
    generate,
)
from .sequences import IndexSpace, LoopNest, hoist, propagate_subscripts, sequence_cost_symbolic
from .verify import RandomModel, certify_equivalence


class ParseError(CompileError):
    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}:{col}: {message}")
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# lexer


@dataclass(frozen=True)
class Token:
    kind: str  # name, number, op
    text: str
    line: int
    col: int


_OPS = ("..", ":=", "=>", "->", "+", "-", "*", "/", "(", ")", "'", ",", ":", "=", "[", "]", "|")


def tokenize(text: str, line_no: int) -> list[Token]:
    out: list[Token] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "#":
            break
        if ch.isspace():
            i += 1
            continue
        matched = False
        for op in _OPS:
            if text.startswith(op, i):
                out.append(Token("op", op, line_no, i + 1))
                i += len(op)
                matched = True
                break
        if matched:
            continue
        if ch.isdigit():
            j = i
            while j < len(text) and (text[j].isdigit() or text[j] in ".eE"):
                if text[j] == "." and text.startswith("..", j):
                    break
                j += 1
            out.append(Token("number", text[i:j], line_no, i + 1))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(Token("name", text[i:j], line_no, i + 1))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", line_no, i + 1)
    return out


class TokenStream:
    def __init__(self, tokens: list[Token], line_no: int):
        self.tokens = tokens
        self.pos = 0
        self.line_no = line_no

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of line", self.line_no, 99)
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, got {tok.text!r}", tok.line, tok.col)
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.text == text

    def done(self) -> bool:
        return self.pos >= len(self.tokens)


# ---------------------------------------------------------------------------
# expression parsing


class ExprParser:
    """Recursive-descent parser for the infix expression grammar."""

    def __init__(self, stream: TokenStream, lookup, pattern_mode: bool = False):
        self.s = stream
        self.lookup = lookup  # name -> Expression (raises on undeclared)
        self.pattern_mode = pattern_mode

    def parse(self) -> Expression:
        return self._sum()

    def _sum(self) -> Expression:
        terms = [self._term()]
        while self.s.at("+") or self.s.at("-"):
            op = self.s.next().text
            t = self._term()
            terms.append(Minus(t) if op == "-" else t)
        return terms[0] if len(terms) == 1 else Plus(terms)

    def _term(self) -> Expression:
        factors = [self._factor()]
        while self.s.at("*"):
            self.s.next()
            factors.append(self._factor())
        return factors[0] if len(factors) == 1 else Times(factors)

    def _factor(self) -> Expression:
        if self.s.at("-"):
            self.s.next()
            return Minus(self._factor())
        return self._postfix()

    def _postfix(self) -> Expression:
        e = self._atom()
        while self.s.at("'"):
            self.s.next()
            e = Transpose(e)
        return e

    def _atom(self) -> Expression:
        tok = self.s.next()
        if tok.kind == "number":
            value = Fraction(tok.text) if "." in tok.text or "e" in tok.text.lower() else Fraction(int(tok.text))
            if self.s.at("/"):
                self.s.next()
                den = self.s.next()
                if den.kind != "number":
                    raise ParseError("expected a number after '/'", den.line, den.col)
                value = value / Fraction(int(den.text))
            return ScalarLiteral(value)
        if tok.text == "(":
            e = self.parse()
            self.s.expect(")")
            return e
        if tok.kind == "name":
            if tok.text in ("inv", "trans") and self.s.at("("):
                self.s.next()
                inner = self.parse()
                self.s.expect(")")
                return Inverse(inner) if tok.text == "inv" else Transpose(inner)
            if tok.text == IDENTITY_NAME:
                return operand(identity_operand())
            if self.pattern_mode:
                return PatVar(tok.text)
            try:
                return self.lookup(tok.text)
            except KeyError:
                raise ParseError(f"undeclared operand {tok.text!r}", tok.line, tok.col)
        raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col)


# ---------------------------------------------------------------------------
# source documents


_PROP_ALIASES = {p.value.lower(): p for p in Prop}
_PROP_ALIASES.update(
    {
        "columnpanel": Prop.COLUMN_PANEL,
        "rowpanel": Prop.ROW_PANEL,
        "fullrank": Prop.FULL_RANK,
        "rankdeficient": Prop.RANK_DEFICIENT,
        "lowertriangular": Prop.LOWER_TRIANGULAR,
        "uppertriangular": Prop.UPPER_TRIANGULAR,
        "orthogonalcolumns": Prop.ORTHOGONAL_COLUMNS,
        "spd": Prop.SPD,
    }
)


def _prop_from(text: str, line: int, col: int) -> Prop:
    key = text.replace("_", "").lower()
    if key not in _PROP_ALIASES:
        raise ParseError(f"unknown property {text!r}", line, col)
    return _PROP_ALIASES[key]


@dataclass
class SourceDocument:
    """Raw section lines with provenance, before semantic analysis."""

    sections: dict[str, list[tuple[int, str]]]

    @staticmethod
    def from_text(text: str) -> "SourceDocument":
        sections: dict[str, list[tuple[int, str]]] = {}
        current: str | None = None
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            head = line.strip()
            if head.endswith(":") and head[:-1] in ("equation", "operands", "sequence", "config"):
                current = head[:-1]
                if current in sections:
                    raise ParseError(f"duplicate section {current!r}", no)
                sections[current] = []
                continue
            if current is None:
                raise ParseError("content before any section header", no)
            sections[current].append((no, line.strip()))
        for required in ("equation", "operands"):
            if required not in sections:
                raise ParseError(f"missing required section {required!r}", 1)
        return SourceDocument(sections)


@dataclass
class ParsedInput:
    equations: EquationSet
    index_space: IndexSpace | None
    config: dict[str, int]


def _parse_dim(tok: Token) -> Dim:
    if tok.kind == "number":
        return Dim(int(tok.text))
    return Dim(tok.text)


def _parse_operand_line(no: int, line: str) -> OperandInfo:
    s = TokenStream(tokenize(line, no), no)
    name = s.next()
    if name.kind != "name":
        raise ParseError("expected an operand name", name.line, name.col)
    if name.text == IDENTITY_NAME:
        raise ParseError("'I' is reserved for the identity matrix", name.line, name.col)
    s.expect(":")
    props: set[Prop] = set()
    kind_tok = s.next()
    kind_name = kind_tok.text.lower()
    if kind_name == "output":
        props.add(Prop.OUTPUT)
        kind_tok = s.next()
        kind_name = kind_tok.text.lower()
    if kind_name not in ("matrix", "vector", "scalar"):
        raise ParseError(f"unknown kind {kind_tok.text!r}", kind_tok.line, kind_tok.col)
    kind = Kind(kind_name)
    rows = cols = None
    if kind is not Kind.SCALAR:
        s.expect("(")
        rows = _parse_dim(s.next())
        if kind is Kind.MATRIX:
            s.expect(",")
            cols = _parse_dim(s.next())
        s.expect(")")
    while s.at(","):
        s.next()
        ptok = s.next()
        props.add(_prop_from(ptok.text, ptok.line, ptok.col))
    if not s.done():
        tok = s.next()
        raise ParseError(f"unexpected trailing token {tok.text!r}", tok.line, tok.col)
    if Prop.OUTPUT not in props:
        props.add(Prop.INPUT)
    return make_operand(name.text, kind, rows, cols, props)


def parse(text: str) -> ParsedInput:
    """Parse a source document into equations, index space and config."""
    doc = SourceDocument.from_text(text)

    operands: dict[str, OperandInfo] = {}
    for no, line in doc.sections["operands"]:
        info = _parse_operand_line(no, line)
        if info.name in operands:
            raise ParseError(f"operand {info.name} declared twice", no)
        operands[info.name] = info

    def lookup(name: str) -> Expression:
        if name not in operands:
            raise KeyError(name)
        return operand(operands[name])

    equations: list[Equation] = []
    for no, line in doc.sections["equation"]:
        s = TokenStream(tokenize(line, no), no)
        lhs_tok = s.next()
        if lhs_tok.kind != "name":
            raise ParseError("expected a target name", lhs_tok.line, lhs_tok.col)
        if not (s.at("=") or s.at(":=")):
            raise ParseError("expected '=' after the target", no, lhs_tok.col)
        s.next()
        rhs = ExprParser(s, lookup).parse()
        if not s.done():
            tok = s.next()
            raise ParseError(f"unexpected trailing token {tok.text!r}", tok.line, tok.col)
        if lhs_tok.text not in operands:
            raise ParseError(f"undeclared operand {lhs_tok.text!r}", lhs_tok.line, lhs_tok.col)
        equations.append(Equation(operands[lhs_tok.text], normalize(rhs)))

    if not any(eq.lhs.has(Prop.OUTPUT) for eq in equations) and equations:
        first = equations[0]
        info = first.lhs
        upgraded = make_operand(
            info.name, info.kind, info.rows, info.cols,
            (info.properties - {Prop.INPUT}) | {Prop.OUTPUT}, info.subscripts,
        )
        operands[info.name] = upgraded
        equations[0] = Equation(upgraded, first.rhs)

    deps: dict[str, tuple[str, ...]] = {}
    index_order: list[str] = []
    bounds: dict[str, str | int] = {}
    for no, line in doc.sections.get("sequence", []):
        s = TokenStream(tokenize(line, no), no)
        head = s.next()
        if s.at("["):
            s.next()
            indices = []
            while True:
                tok = s.next()
                if tok.kind != "name":
                    raise ParseError("expected an index name", tok.line, tok.col)
                indices.append(tok.text)
                if s.at(","):
                    s.next()
                    continue
                break
            s.expect("]")
            if head.text not in operands:
                raise ParseError(f"undeclared operand {head.text!r}", head.line, head.col)
            deps[head.text] = tuple(indices)
            for ix in indices:
                if ix not in index_order:
                    index_order.append(ix)
        elif s.at("in"):
            s.next()
            lo = s.next()
            s.expect("..")
            hi = s.next()
            if lo.text != "1":
                raise ParseError("index ranges start at 1", lo.line, lo.col)
            bounds[head.text] = int(hi.text) if hi.kind == "number" else hi.text
            if head.text not in index_order:
                index_order.append(head.text)
        else:
            raise ParseError("expected 'name[indices]' or 'index in 1..bound'", no)

    config: dict[str, int] = {}
    for no, line in doc.sections.get("config", []):
        s = TokenStream(tokenize(line, no), no)
        key = s.next()
        s.expect("=")
        val = s.next()
        if val.kind != "number":
            raise ParseError("config values must be numbers", val.line, val.col)
        config[key.text] = int(float(val.text))

    index_space = None
    if index_order:
        for ix in index_order:
            bounds.setdefault(ix, ix + "_count")
        index_space = IndexSpace(tuple(index_order), bounds)

    eqset = EquationSet(equations, operands, deps)
    return ParsedInput(eqset, index_space, config)


def parse_file(path: str | Path) -> ParsedInput:
    return parse(Path(path).read_text())


# ---------------------------------------------------------------------------
# expression and statement printing


def print_expr(e: Expression, parent: str = "sum") -> str:
    if isinstance(e, Operand):
        return e.info.name
    if isinstance(e, PatVar):
        return e.name
    if isinstance(e, ScalarLiteral):
        v = e.value
        if v.denominator == 1:
            text = str(v.numerator)
        else:
            text = f"{v.numerator}/{v.denominator}"
        return f"({text})" if v < 0 and parent != "sum" else text
    if isinstance(e, Plus):
        parts = []
        for i, c in enumerate(e.children):
            if isinstance(c, Minus):
                parts.append(("- " if i else "-") + print_expr(c.child, "term"))
            else:
                parts.append(("+ " if i else "") + print_expr(c, "term"))
        body = " ".join(parts)
        return f"({body})" if parent in ("term", "unary") else body
    if isinstance(e, Times):
        body = " * ".join(print_expr(c, "term") for c in e.children)
        return f"({body})" if parent == "unary" else body
    if isinstance(e, Minus):
        inner = print_expr(e.child, "unary")
        out = f"-{inner}"
        return f"({out})" if parent in ("term", "unary") else out
    if isinstance(e, Transpose):
        inner = print_expr(e.child, "unary")
        if not isinstance(e.child, (Operand, PatVar)):
            inner = f"({inner})"
        return inner + "'"
    if isinstance(e, Inverse):
        return f"inv({print_expr(e.child, 'sum')})"
    raise CompileError(f"cannot print {e!r}")


def _print_names(alg: Algorithm) -> dict[str, str]:
    """In-place display names: a fresh target borrows the name of a dead,
    same-shaped argument (so solves print as ``y := inv(L) * y``)."""
    last_use: dict[str, int] = {}
    for i, stmt in enumerate(alg.statements):
        names = (
            {stmt.operand.name}
            if isinstance(stmt, FactorStatement)
            else {n.info.name for _, n in positions(stmt.rhs) if isinstance(n, Operand)}
        )
        for n in names:
            last_use[n] = i
    mapping: dict[str, str] = {}
    for i, stmt in enumerate(alg.statements):
        if isinstance(stmt, FactorStatement):
            continue
        t = stmt.target
        if t.name in alg.outputs or t.kind is not Kind.VECTOR:
            continue
        shape = (t.rows, t.cols)
        for _, node in positions(stmt.rhs):
            if not isinstance(node, Operand):
                continue
            arg = node.info
            if arg.kind is not Kind.VECTOR or (arg.rows, arg.cols) != shape:
                continue
            if last_use.get(arg.name) == i:
                mapping[t.name] = mapping.get(arg.name, arg.name)
                break
    return mapping


def format_statement(stmt, names: Mapping[str, str] | None = None) -> str:
    return _render_statement(stmt, names or {})


def emit_pseudocode(
    algorithms: Sequence[Algorithm | LoopNest],
    dims: Mapping[str, int] | None = None,
) -> str:
    """One listing per algorithm: statements one per line, factorizations as
    ``L * L' = M``, loops as ``for i in 1..m`` with two-space indentation."""
    if not algorithms:
        return "# no algorithms generated\n"
    blocks = []
    for k, alg in enumerate(algorithms, start=1):
        if isinstance(alg, LoopNest):
            blocks.append(_emit_nest(alg, k, dims))
        else:
            blocks.append(_emit_algorithm(alg, k, dims))
    return "\n".join(blocks)


def _stmt_lines(statements, names) -> list[str]:
    out = []
    for stmt in statements:
        kernel = stmt.kernel if isinstance(stmt, KernelStatement) else stmt.factorization
        rendered = _render_statement(stmt, names)
        out.append(f"{rendered:<40s} # {kernel}")
    return out


def _render_statement(stmt, names) -> str:
    if isinstance(stmt, FactorStatement):
        return f"{print_expr(stmt.recomposition)} = {names.get(stmt.operand.name, stmt.operand.name)}"
    rhs = stmt.rhs
    rhs_text = print_expr(_rename(rhs, names))
    target = names.get(stmt.target.name, stmt.target.name)
    return f"{target} := {rhs_text}"


def _rename(e: Expression, names: Mapping[str, str]) -> Expression:
    if not names:
        return e
    if isinstance(e, Operand) and e.info.name in names:
        info = e.info
        return operand(
            OperandInfo(
                names[info.name], info.kind, info.rows, info.cols, info.properties, info.subscripts
            )
        )
    if not e.children:
        return e
    kids = [_rename(c, names) for c in e.children]
    if isinstance(e, Plus):
        return Plus(kids)
    if isinstance(e, Times):
        return Times(kids)
    if isinstance(e, Minus):
        return Minus(kids[0])
    if isinstance(e, Transpose):
        return Transpose(kids[0])
    return Inverse(kids[0])


def _emit_algorithm(alg: Algorithm, k: int, dims) -> str:
    names = _print_names(alg)
    cost = alg.symbolic_cost
    header = f"# algorithm {k}: cost = {sp.nsimplify(cost)}"
    if dims:
        try:
            header += f"  ({alg.cost_at(dims):.4g} flops)"
        except CompileError:
            pass
    lines = [header]
    lines += _stmt_lines(alg.statements, names)
    return "\n".join(lines) + "\n"


def _emit_nest(nest: LoopNest, k: int, dims) -> str:
    flat = list(nest.all_statements())
    pseudo_alg = Algorithm(flat, (), nest.outputs)
    names = _print_names(pseudo_alg)
    cost = sequence_cost_symbolic(nest)
    header = f"# algorithm {k} (sequence): cost = {sp.nsimplify(cost)}"
    lines = [header]
    lines += _stmt_lines(nest.preheader, names)

    def emit_loop(loop, depth):
        pad = "  " * depth
        bound = nest.space.bounds[loop.index]
        lines.append(f"{pad}for {loop.index} in 1..{bound}")
        for s in loop.body:
            kernel = s.kernel if isinstance(s, KernelStatement) else s.factorization
            lines.append(f"{pad}  {_render_statement(s, names):<38s} # {kernel}")
        for sub in loop.nested:
            emit_loop(sub, depth + 1)

    for loop in nest.loops:
        emit_loop(loop, 0)
    return "\n".join(lines) + "\n"


def emit_source(eqset: EquationSet, index_space: IndexSpace | None = None) -> str:
    """Render an EquationSet back to input syntax (parse . emit = identity
    up to whitespace)."""
    lines = ["equation:"]
    for eq in eqset.equations:
        lines.append(f"  {eq.lhs.name} = {print_expr(eq.rhs)}")
    lines.append("operands:")
    order = [
        Prop.OUTPUT, Prop.SQUARE, Prop.COLUMN_PANEL, Prop.ROW_PANEL, Prop.SPD,
        Prop.SYMMETRIC, Prop.DIAGONAL, Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR,
        Prop.ORTHOGONAL, Prop.ORTHOGONAL_COLUMNS, Prop.FULL_RANK, Prop.RANK_DEFICIENT,
        Prop.IDENTITY,
    ]
    for name, info in eqset.operands.items():
        if name == IDENTITY_NAME:
            continue
        if info.kind is Kind.SCALAR:
            kind = "scalar"
        elif info.kind is Kind.VECTOR:
            kind = f"vector({info.rows})"
        else:
            kind = f"matrix({info.rows},{info.cols})"
        props = [p.value for p in order if p in info.properties and p is not Prop.OUTPUT]
        if info.has(Prop.OUTPUT):
            props.insert(0, "Output")
        tail = ", " + ", ".join(props) if props else ""
        lines.append(f"  {name} : {kind}{tail}")
    if index_space or eqset.dependencies:
        lines.append("sequence:")
        for name, ix in eqset.dependencies.items():
            if ix:
                lines.append(f"  {name}[{','.join(ix)}]")
        if index_space:
            for ix in index_space.indices:
                lines.append(f"  {ix} in 1..{index_space.bounds[ix]}")
    return "\n".join(lines) + "\n"


def emit_tree(tree: DerivationTree) -> str:
    """Plain node/edge list for graph tooling; phase-1 and phase-2 nodes are
    tagged so renderers can distinguish them."""
    lines = []
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        label = " ; ".join(
            (f"{it.target.name} := {print_expr(it.rhs)}" if hasattr(it, "rhs") else str(it.statement))
            for it in node.items
        )
        if len(label) > 120:
            label = label[:117] + "..."
        lines.append(f'node {node.id} phase={node.phase} label="{label}"')
    for parent, children in sorted(tree.children.items()):
        for child in children:
            edge = tree.nodes[child].edge
            lines.append(f'edge {parent} {child} label="{edge}"')
    if tree.truncated:
        lines.append("# truncated: node budget reached")
    return "\n".join(lines) + "\n"


def emit_records(
    algorithms: Sequence[Algorithm],
    dims: Mapping[str, int] | None,
    certifications: Mapping[int, object] | None = None,
) -> str:
    """Line-delimited JSON records, one per algorithm; each record carries
    enough to regenerate its pseudocode byte-identically."""
    out = []
    for k, alg in enumerate(algorithms, start=1):
        names = _print_names(alg)
        rec = {
            "algorithm": k,
            "statements": [_render_statement(s, names) for s in alg.statements],
            "kernels": alg.kernel_names(),
            "symbolic_cost": str(sp.nsimplify(alg.symbolic_cost)),
            "cost": None,
            "certified": None,
            "max_rel_err": None,
        }
        if dims:
            try:
                rec["cost"] = alg.cost_at(dims)
            except CompileError:
                pass
        if certifications and k in certifications:
            report = certifications[k]
            rec["certified"] = bool(report.passed)
            rec["max_rel_err"] = report.max_rel_err
        out.append(json.dumps(rec))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# pseudocode round-trip


def parse_pseudocode(text: str) -> list[list[tuple[str, str, Expression | None, str]]]:
    """Parse emitted listings back into statement tuples.

    Returns one list per algorithm of (kind, target-or-factorization,
    rhs-or-recomposition, kernel) tuples sufficient for statement-level
    equivalence checking.
    """
    algos: list[list] = []
    current: list | None = None
    known: dict[str, OperandInfo] = {}

    def lookup(name: str) -> Expression:
        info = known.get(name)
        if info is None:
            info = make_operand(name, Kind.MATRIX, WILD, WILD)
            known[name] = info
        return operand(info)

    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#") and "algorithm" in line:
            current = []
            algos.append(current)
            continue
        code = raw.split("#", 1)[0].strip()
        kernel = raw.split("#", 1)[1].strip() if "#" in raw else ""
        if not code or code.startswith("for "):
            continue
        if current is None:
            current = []
            algos.append(current)
        s = TokenStream(tokenize(code, no), no)
        if ":=" in code:
            target = s.next().text
            s.expect(":=")
            rhs = ExprParser(s, lookup).parse()
            current.append(("kernel", target, normalize(rhs), kernel))
        else:
            recomposition = ExprParser(s, lookup).parse()
            s.expect("=")
            src = s.next().text
            current.append(("factor", src, normalize(recomposition), kernel))
    return algos


# ---------------------------------------------------------------------------
# declarative rule / kernel / inference files


def _parse_pattern_and_guards(s: TokenStream):
    pattern = ExprParser(s, lambda n: (_ for _ in ()).throw(KeyError(n)), pattern_mode=True).parse()
    guards: list[tuple[str, str]] = []
    if s.at("|"):
        s.next()
        while True:
            gname = s.next().text
            s.expect("(")
            gvars = [s.next().text]
            while s.at(","):
                s.next()
                gvars.append(s.next().text)
            s.expect(")")
            for v in gvars:
                guards.append((gname, v))
            if s.at(","):
                s.next()
                continue
            break
    return normalize(pattern), tuple(guards)


def load_rule_file(path: str | Path) -> list[RewriteRule]:
    """``rule <name>: <pattern> | <guards> -> <replacement>`` lines."""
    rules = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not line.startswith("rule "):
            raise ParseError("expected a 'rule' line", no)
        head, _, rest = line.partition(":")
        name = head.split()[1]
        s = TokenStream(tokenize(rest, no), no)
        pattern, guards = _parse_pattern_and_guards(s)
        s.expect("->")
        replacement = normalize(
            ExprParser(s, lambda n: (_ for _ in ()).throw(KeyError(n)), pattern_mode=True).parse()
        )
        pat_vars = {n.name for _, n in positions(pattern) if isinstance(n, PatVar)}
        rep_vars = {n.name for _, n in positions(replacement) if isinstance(n, PatVar)}
        if not rep_vars <= pat_vars:
            raise ParseError(f"replacement variables {rep_vars - pat_vars} unbound", no)
        rules.append(
            RewriteRule(name, "one-way", pattern=pattern, guards=guards, replacement=replacement)
        )
    return rules


def load_kernel_file(path: str | Path) -> list[KernelDescriptor]:
    """``kernel <name> prec=<k> cost=<formula>: <pattern> | <guards>`` lines."""
    out = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not line.startswith("kernel "):
            raise ParseError("expected a 'kernel' line", no)
        head, _, rest = line.partition(":")
        parts = head.split()
        name = parts[1]
        prec = None
        cost_formula = None
        for p in parts[2:]:
            if p.startswith("prec="):
                prec = int(p[5:])
            elif p.startswith("cost="):
                cost_formula = p[5:]
        if prec is None or cost_formula is None:
            raise ParseError("kernel needs prec= and cost=", no)
        s = TokenStream(tokenize(rest, no), no)
        pattern, guards = _parse_pattern_and_guards(s)
        out.append(make_declarative_kernel(name, prec, pattern, guards, cost_formula))
    return out


def load_inference_file(path: str | Path) -> list[InferenceRule]:
    """``infer <name>: <pattern> | <guards> => Prop, Prop`` lines."""
    out = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not line.startswith("infer "):
            raise ParseError("expected an 'infer' line", no)
        head, _, rest = line.partition(":")
        name = head.split()[1]
        s = TokenStream(tokenize(rest, no), no)
        pattern, guards = _parse_pattern_and_guards(s)
        s.expect("=>")
        props = set()
        while not s.done():
            tok = s.next()
            if tok.text == ",":
                continue
            props.add(_prop_from(tok.text, tok.line, tok.col))
        out.append(InferenceRule(name, pattern, guards, frozenset(props)))
    return out


# ---------------------------------------------------------------------------
# CLI


def _parse_dims(text: str | None) -> dict[str, int]:
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, val = part.partition("=")
        out[key.strip()] = int(float(val))
    return out


def _make_config(parsed: ParsedInput, args) -> SearchConfig:
    cfg = dict(parsed.config)
    if getattr(args, "max_nodes", None):
        cfg["max_nodes"] = args.max_nodes
    if getattr(args, "branch_cap", None):
        cfg["branch_cap"] = args.branch_cap
    allowed = {"max_nodes", "max_algorithms", "branch_cap", "variant_cap", "variant_depth", "max_ledger"}
    cfg = {k: v for k, v in cfg.items() if k in allowed}
    return SearchConfig(dims=_parse_dims(getattr(args, "dims", None)) or None, **cfg)


def _sequence_nests(parsed: ParsedInput, algorithms: Sequence[Algorithm]):
    nests = []
    for alg in algorithms:
        ann = propagate_subscripts(alg, parsed.equations.dependencies)
        nests.append(hoist(ann, parsed.index_space))
    return nests


def _rank_with_sequences(parsed: ParsedInput, result: GenerationResult, dims):
    algorithms = result.algorithms
    full_dims = dict(dims)
    if parsed.index_space:
        nests = _sequence_nests(parsed, algorithms)
        costs = []
        for nest in nests:
            c = sequence_cost_symbolic(nest)
            for s in c.free_symbols:
                full_dims.setdefault(str(s), 100)
            costs.append(float(c.subs({sp.Symbol(k, positive=True, integer=True): v for k, v in full_dims.items()})))
        order = sorted(range(len(algorithms)), key=lambda i: (costs[i], i))
        return [algorithms[i] for i in order], [nests[i] for i in order]
    for alg in algorithms:
        for s in alg.symbolic_cost.free_symbols:
            full_dims.setdefault(str(s), 100)
    order = sorted(range(len(algorithms)), key=lambda i: (algorithms[i].cost_at(full_dims), i))
    return [algorithms[i] for i in order], None


def cmd_compile(args) -> int:
    try:
        parsed = parse_file(args.file)
        cfg = _make_config(parsed, args)
        result = generate(parsed.equations, cfg)
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not result.algorithms:
        print("error: no complete algorithm within the search budget", file=sys.stderr)
        return 3 if result.truncated else 1
    dims = _parse_dims(args.dims)
    ranked, nests = _rank_with_sequences(parsed, result, dims)
    top = args.top or len(ranked)
    ranked = ranked[:top]
    if nests:
        nests = nests[:top]
    if args.emit == "pseudo":
        body = emit_pseudocode(nests if nests else ranked, dims or None)
    elif args.emit == "records":
        body = emit_records(ranked, dims or None)
    else:
        body = emit_tree(result.tree)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        suffix = {"pseudo": "algorithms.txt", "records": "records.jsonl", "tree": "tree.txt"}
        (outdir / suffix[args.emit]).write_text(body)
    else:
        print(body, end="")
    return 0


def cmd_verify(args) -> int:
    try:
        parsed = parse_file(args.file)
        cfg = _make_config(parsed, args)
        result = generate(parsed.equations, cfg)
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not result.algorithms:
        print("error: nothing to verify", file=sys.stderr)
        return 3 if result.truncated else 1
    lo, _, hi = (args.dims_range or "3..12").partition("..")
    model = RandomModel(seed=args.seed)
    all_ok = True
    for k, alg in enumerate(result.algorithms, start=1):
        report = certify_equivalence(
            parsed.equations, alg, trials=args.trials, model=model,
            tol=args.tol, dims_range=(int(lo), int(hi)),
        )
        status = "pass" if report.passed else "FAIL"
        print(
            f"algorithm {k}: {status}  max rel err {report.max_rel_err:.3e} "
            f"(tol {report.tolerance:.1e}, {report.trials} trials)"
        )
        for f in report.failures[:4]:
            print(f"  {f}")
        all_ok = all_ok and report.passed
    return 0 if all_ok else 2


def cmd_explain(args) -> int:
    try:
        parsed = parse_file(args.file)
        cfg = _make_config(parsed, args)
        result = generate(parsed.equations, cfg)
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    k = args.algorithm
    if not (1 <= k <= len(result.algorithms)):
        print(f"error: algorithm {k} out of range 1..{len(result.algorithms)}", file=sys.stderr)
        return 1
    alg = result.algorithms[k - 1]
    leaf_id = alg.node_path[0] if alg.node_path else 0
    print(f"derivation of algorithm {k}:")
    for node in result.tree.path_to(leaf_id):
        print(f"  [{node.id}] {node.edge}")
    print("kernel mapping:")
    names = _print_names(alg)
    for stmt in alg.statements:
        kernel = stmt.kernel if isinstance(stmt, KernelStatement) else stmt.factorization
        print(f"  {_render_statement(stmt, names)}    ({kernel})")
    return 0


def build_argparser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meqc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="generate ranked algorithms")
    c.add_argument("file")
    c.add_argument("--top", type=int, default=0)
    c.add_argument("--dims", default="")
    c.add_argument("--emit", choices=("pseudo", "records", "tree"), default="pseudo")
    c.add_argument("--max-nodes", type=int, default=0)
    c.add_argument("--branch-cap", type=int, default=0)
    c.add_argument("--out", default="")
    c.set_defaults(func=cmd_compile)

    v = sub.add_parser("verify", help="certify generated algorithms numerically")
    v.add_argument("file")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=7)
    v.add_argument("--tol", type=float, default=None)
    v.add_argument("--dims-range", default="3..12")
    v.add_argument("--max-nodes", type=int, default=0)
    v.add_argument("--branch-cap", type=int, default=0)
    v.add_argument("--dims", default="")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("explain", help="print the derivation path of one algorithm")
    e.add_argument("file")
    e.add_argument("--algorithm", type=int, default=1)
    e.add_argument("--dims", default="")
    e.add_argument("--max-nodes", type=int, default=0)
    e.add_argument("--branch-cap", type=int, default=0)
    e.set_defaults(func=cmd_explain)
    return ap


def cli_main(argv: Sequence[str] | None = None) -> int:
    args = build_argparser().parse_args(argv)
    try:
        return args.func(args)
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
