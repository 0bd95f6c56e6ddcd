"""Static linear-algebra knowledge: factorizations and property inference.

Two ingredients live here.  First, the table mapping matrix properties to
the factorizations that are worth trying (symmetric -> LDL/QR/eig, SPD ->
Cholesky/QR/eig, full-rank column panel -> QR, and so on), together with
the property sets inferred for the produced factors.  Second, an inference
engine that derives properties of compound expressions from those of their
operands, e.g. that W = inv(L)*X is a full-rank column panel whenever L is
square full rank and X is one, or that W'*W is SPD.

The inference engine is a growing database: the structural core below is
always active and declarative rules can be added at runtime (see
``frontend.load_inference_file``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .ir import (
    CompileError,
    Dim,
    Expression,
    Inverse,
    Kind,
    Minus,
    Namer,
    Operand,
    OperandInfo,
    Plus,
    Prop,
    ScalarLiteral,
    Times,
    Transpose,
    close_properties,
    make_operand,
    normalize,
    operand,
    substitute,
    transpose_of,
)


class NotAMatrix(CompileError):
    pass


class GuardViolated(CompileError):
    pass


# ---------------------------------------------------------------------------
# factorizations


@dataclass(frozen=True)
class FactorizationDescriptor:
    """One factorization: guard, factor templates and recomposition builder."""

    name: str
    factor_bases: tuple[str, ...]
    guard: Callable[[OperandInfo], bool]
    build: Callable[[OperandInfo, Namer], tuple[tuple[OperandInfo, ...], Expression]]


def _tri(extra: Iterable[Prop], full_rank: bool) -> frozenset[Prop]:
    props = set(extra)
    if full_rank:
        props.add(Prop.FULL_RANK)
    return frozenset(props)


def _build_cholesky(m: OperandInfo, namer: Namer):
    l = make_operand(
        namer.fresh("L"), Kind.MATRIX, m.rows, m.rows,
        {Prop.LOWER_TRIANGULAR, Prop.SQUARE, Prop.FULL_RANK},
    )
    return (l,), Times([operand(l), Transpose(operand(l))])


def _build_ldl(m: OperandInfo, namer: Namer):
    fr = m.has(Prop.FULL_RANK)
    l = make_operand(
        namer.fresh("L"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.LOWER_TRIANGULAR, Prop.SQUARE}, True),
    )
    d = make_operand(
        namer.fresh("D"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.DIAGONAL, Prop.SQUARE}, fr),
    )
    return (l, d), Times([operand(l), operand(d), Transpose(operand(l))])


def _build_qr(m: OperandInfo, namer: Namer):
    fr = m.has(Prop.FULL_RANK)
    if m.has(Prop.SQUARE):
        q_props = {Prop.ORTHOGONAL, Prop.SQUARE}
    else:
        q_props = {Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL, Prop.FULL_RANK}
    q = make_operand(namer.fresh("Q"), Kind.MATRIX, m.rows, m.cols, q_props)
    r = make_operand(
        namer.fresh("R"), Kind.MATRIX, m.cols, m.cols,
        _tri({Prop.UPPER_TRIANGULAR, Prop.SQUARE}, fr),
    )
    return (q, r), Times([operand(q), operand(r)])


def _build_lq(m: OperandInfo, namer: Namer):
    # row panel A = L * Q with Q'Q = I; Q is stored column-orthonormal as Qt'
    fr = m.has(Prop.FULL_RANK)
    l = make_operand(
        namer.fresh("L"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.LOWER_TRIANGULAR, Prop.SQUARE}, fr),
    )
    q = make_operand(
        namer.fresh("Q"), Kind.MATRIX, m.cols, m.rows,
        {Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL, Prop.FULL_RANK},
    )
    return (l, q), Times([operand(l), Transpose(operand(q))])


def _build_lu(m: OperandInfo, namer: Namer):
    fr = m.has(Prop.FULL_RANK)
    l = make_operand(
        namer.fresh("L"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.LOWER_TRIANGULAR, Prop.SQUARE}, True),
    )
    u = make_operand(
        namer.fresh("U"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.UPPER_TRIANGULAR, Prop.SQUARE}, fr),
    )
    return (l, u), Times([operand(l), operand(u)])


def _build_eig(m: OperandInfo, namer: Namer):
    z = make_operand(
        namer.fresh("Z"), Kind.MATRIX, m.rows, m.rows, {Prop.ORTHOGONAL, Prop.SQUARE}
    )
    w = make_operand(
        namer.fresh("W"), Kind.MATRIX, m.rows, m.rows,
        _tri({Prop.DIAGONAL, Prop.SQUARE}, m.has(Prop.FULL_RANK)),
    )
    return (z, w), Times([operand(z), operand(w), Transpose(operand(z))])


def _build_svd(m: OperandInfo, namer: Namer):
    inner = m.cols if m.kind is Kind.MATRIX else m.rows
    if m.has(Prop.ROW_PANEL):
        inner = m.rows
    u_props = (
        {Prop.ORTHOGONAL, Prop.SQUARE}
        if m.rows == inner
        else {Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL, Prop.FULL_RANK}
    )
    u = make_operand(namer.fresh("U"), Kind.MATRIX, m.rows, inner, u_props)
    s = make_operand(
        namer.fresh("S"), Kind.MATRIX, inner, inner,
        _tri({Prop.DIAGONAL, Prop.SQUARE}, m.has(Prop.FULL_RANK)),
    )
    v_props = (
        {Prop.ORTHOGONAL, Prop.SQUARE}
        if m.cols == inner
        else {Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL, Prop.FULL_RANK}
    )
    v = make_operand(namer.fresh("V"), Kind.MATRIX, m.cols, inner, v_props)
    return (u, s, v), Times([operand(u), operand(s), Transpose(operand(v))])


CHOLESKY = FactorizationDescriptor(
    "cholesky", ("L",), lambda m: m.has(Prop.SPD), _build_cholesky
)
LDL = FactorizationDescriptor("ldl", ("L", "D"), lambda m: m.has(Prop.SYMMETRIC), _build_ldl)
QR = FactorizationDescriptor(
    "qr",
    ("Q", "R"),
    lambda m: m.has(Prop.SYMMETRIC)
    or (m.has(Prop.COLUMN_PANEL) and m.has(Prop.FULL_RANK))
    or m.has(Prop.SQUARE),
    _build_qr,
)
LQ = FactorizationDescriptor(
    "lq", ("L", "Q"), lambda m: m.has(Prop.ROW_PANEL) and m.has(Prop.FULL_RANK), _build_lq
)
LU = FactorizationDescriptor("lu", ("L", "U"), lambda m: m.has(Prop.SQUARE), _build_lu)
EIG = FactorizationDescriptor("eig", ("Z", "W"), lambda m: m.has(Prop.SYMMETRIC), _build_eig)
SVD = FactorizationDescriptor("svd", ("U", "S", "V"), lambda m: m.kind is Kind.MATRIX, _build_svd)

ALL_FACTORIZATIONS = (CHOLESKY, LDL, QR, LQ, LU, EIG, SVD)


def applicable_factorizations(m: OperandInfo) -> list[FactorizationDescriptor]:
    """Table-driven choice; the most specific property decides the row.

    Matrices already in factored form (triangular, diagonal, orthogonal,
    identity) get an empty list: there is nothing left to factor.
    """
    if m.kind is not Kind.MATRIX:
        raise NotAMatrix(f"{m.name} is not a matrix")
    if m.is_factored_form:
        return []
    if m.has(Prop.SPD):
        return [CHOLESKY, QR, EIG]
    if m.has(Prop.SYMMETRIC):
        return [LDL, QR, EIG]
    if m.has(Prop.COLUMN_PANEL):
        return [QR] if m.has(Prop.FULL_RANK) else [SVD]
    if m.has(Prop.ROW_PANEL):
        return [LQ] if m.has(Prop.FULL_RANK) else [SVD]
    if m.has(Prop.SQUARE):
        return [LU, SVD]
    return [SVD]


def factor(
    m: OperandInfo, descriptor: FactorizationDescriptor, namer: Namer
) -> tuple[tuple[OperandInfo, ...], Expression]:
    """Create fresh factor operands and the recomposition expression."""
    if not descriptor.guard(m):
        raise GuardViolated(f"{descriptor.name} does not apply to {m.name}")
    factors, recomposition = descriptor.build(m, namer)
    return factors, normalize(recomposition)


# ---------------------------------------------------------------------------
# property inference


@dataclass(frozen=True)
class InferenceRule:
    """Declarative addition to the inference database: pattern -> properties."""

    name: str
    pattern: Expression
    guards: tuple[tuple[str, str], ...]  # (guard name, variable name)
    conclusion: frozenset[Prop]


_PRESERVED_BY_MINUS = {
    Prop.SYMMETRIC,
    Prop.DIAGONAL,
    Prop.LOWER_TRIANGULAR,
    Prop.UPPER_TRIANGULAR,
    Prop.SQUARE,
    Prop.FULL_RANK,
    Prop.COLUMN_PANEL,
    Prop.ROW_PANEL,
    Prop.ORTHOGONAL,
    Prop.ORTHOGONAL_COLUMNS,
}

_PRESERVED_BY_INVERSE = {
    Prop.SYMMETRIC,
    Prop.SPD,
    Prop.DIAGONAL,
    Prop.LOWER_TRIANGULAR,
    Prop.UPPER_TRIANGULAR,
    Prop.SQUARE,
    Prop.FULL_RANK,
    Prop.ORTHOGONAL,
    Prop.IDENTITY,
}


def _infer_transpose(inner: frozenset[Prop]) -> set[Prop]:
    out: set[Prop] = set()
    keep = {
        Prop.SYMMETRIC,
        Prop.SPD,
        Prop.DIAGONAL,
        Prop.SQUARE,
        Prop.FULL_RANK,
        Prop.ORTHOGONAL,
        Prop.IDENTITY,
    }
    out |= inner & keep
    if Prop.LOWER_TRIANGULAR in inner:
        out.add(Prop.UPPER_TRIANGULAR)
    if Prop.UPPER_TRIANGULAR in inner:
        out.add(Prop.LOWER_TRIANGULAR)
    if Prop.COLUMN_PANEL in inner:
        out.add(Prop.ROW_PANEL)
    if Prop.ROW_PANEL in inner:
        out.add(Prop.COLUMN_PANEL)
    return out


def _term_parts(term: Expression) -> tuple[bool, list[Expression], list[Expression]]:
    """Split a normalized sum term into (negated, scalar factors, core factors)."""
    neg = False
    if isinstance(term, Minus):
        neg = True
        term = term.child
    if isinstance(term, Times):
        scalars = [c for c in term.children if c.is_scalar_shaped]
        cores = [c for c in term.children if not c.is_scalar_shaped]
    elif term.is_scalar_shaped:
        scalars, cores = [term], []
    else:
        scalars, cores = [], [term]
    return neg, scalars, cores


def _positive_known(scalars: Sequence[Expression]) -> bool:
    """True when every scalar factor is a positive literal (named scalars have
    unknown sign, so they never certify positivity)."""
    return all(isinstance(s, ScalarLiteral) and s.value > 0 for s in scalars)


class _InferCtx:
    def __init__(self, definitions: Mapping[str, Expression] | None, extra):
        self.definitions = dict(definitions or {})
        self.extra = tuple(extra)
        self.cache: dict[str, frozenset[Prop]] = {}
        # operand properties are embedded in the expression, so inference
        # without definitions/extra rules is a pure function of the key
        self.shared = _GLOBAL_INFER_CACHE if not self.extra else None


_GLOBAL_INFER_CACHE: dict[str, frozenset[Prop]] = {}


def infer_properties(
    e: Expression,
    definitions: Mapping[str, Expression] | None = None,
    extra_rules: Sequence[InferenceRule] = (),
) -> frozenset[Prop]:
    """Fixed-point property inference for a normalized expression.

    ``definitions`` maps intermediate operand names to their defining
    expressions; inference also runs on the fully expanded expression so
    that, e.g., A = (K*inv(D))*K' is recognized as symmetric even though
    the intermediate hides the sandwich structure.  Monotone: more input
    properties never yield fewer output properties.
    """
    ctx = _InferCtx(definitions, extra_rules)
    props = set(_infer(e, ctx))
    if ctx.definitions:
        expanded = e
        for _ in range(len(ctx.definitions) + 1):
            new = normalize(substitute(expanded, ctx.definitions))
            if new.key == expanded.key:
                break
            expanded = new
        if expanded.key != e.key:
            props |= _infer(expanded, ctx)
    return close_properties(props)


def _infer(e: Expression, ctx: _InferCtx) -> frozenset[Prop]:
    hit = ctx.cache.get(e.key)
    if hit is not None:
        return hit
    if ctx.shared is not None:
        hit = ctx.shared.get(e.key)
        if hit is not None:
            return hit
    props = set(_infer_core(e, ctx))
    for rule in ctx.extra:
        from .rewrite import match_pattern, check_guards  # local import, no cycle

        binding = match_pattern(rule.pattern, e)
        if binding is not None and check_guards(rule.guards, binding, ctx.definitions):
            props |= rule.conclusion
    if e.is_scalar_shaped:
        props.add(Prop.SCALAR)
    elif e.kind is Kind.VECTOR:
        props.add(Prop.VECTOR)
    else:
        props.add(Prop.MATRIX)
        if not e.rows.is_wild and e.rows == e.cols:
            props.add(Prop.SQUARE)
    try:
        closed = close_properties(props)
    except Exception:
        closed = frozenset(props)
    ctx.cache[e.key] = closed
    if ctx.shared is not None and len(ctx.shared) < 400_000:
        ctx.shared[e.key] = closed
    return closed


def _infer_core(e: Expression, ctx: _InferCtx) -> set[Prop]:
    if isinstance(e, Operand):
        return set(e.info.properties)
    if isinstance(e, ScalarLiteral):
        return {Prop.SCALAR}
    if isinstance(e, Transpose):
        return _infer_transpose(_infer(e.child, ctx))
    if isinstance(e, Minus):
        return set(_infer(e.child, ctx) & _PRESERVED_BY_MINUS)
    if isinstance(e, Inverse):
        return set(_infer(e.child, ctx) & _PRESERVED_BY_INVERSE)
    if isinstance(e, Plus):
        return _infer_plus(e, ctx)
    if isinstance(e, Times):
        return _infer_times(e, ctx)
    return set()


def _infer_plus(e: Expression, ctx: _InferCtx) -> set[Prop]:
    out: set[Prop] = set()
    termsets = []
    spd_ok = True
    for term in e.children:
        neg, scalars, cores = _term_parts(term)
        core_props = (
            _infer(Times(cores) if len(cores) > 1 else cores[0], ctx)
            if cores
            else frozenset({Prop.SCALAR})
        )
        termsets.append(core_props)
        if neg or not _positive_known(scalars) or Prop.SPD not in core_props:
            spd_ok = False
    for prop in (
        Prop.SYMMETRIC,
        Prop.DIAGONAL,
        Prop.LOWER_TRIANGULAR,
        Prop.UPPER_TRIANGULAR,
        Prop.SQUARE,
    ):
        if all(prop in ts for ts in termsets):
            out.add(prop)
    if spd_ok and termsets:
        out.add(Prop.SPD)
    return out


def _full_column_rank(props: frozenset[Prop]) -> bool:
    return Prop.FULL_RANK in props and (
        Prop.SQUARE in props or Prop.COLUMN_PANEL in props
    )


def _infer_times(e: Expression, ctx: _InferCtx) -> set[Prop]:
    out: set[Prop] = set()
    scalars = [c for c in e.children if c.is_scalar_shaped]
    cores = [c for c in e.children if not c.is_scalar_shaped]
    if not cores:
        return {Prop.SCALAR}
    core_props = [_infer(c, ctx) for c in cores]

    if all(Prop.DIAGONAL in p for p in core_props):
        out.add(Prop.DIAGONAL)
    if all(Prop.LOWER_TRIANGULAR in p for p in core_props):
        out.add(Prop.LOWER_TRIANGULAR)
    if all(Prop.UPPER_TRIANGULAR in p for p in core_props):
        out.add(Prop.UPPER_TRIANGULAR)
    if not scalars and all(Prop.ORTHOGONAL_COLUMNS in p for p in core_props):
        if all(Prop.ORTHOGONAL in p for p in core_props):
            out.add(Prop.ORTHOGONAL)
        else:
            out.add(Prop.ORTHOGONAL_COLUMNS)

    # full rank / panel propagation: square full-rank factors around at most
    # one full-rank panel factor
    panels = [p for p in core_props if Prop.COLUMN_PANEL in p or Prop.ROW_PANEL in p]
    others = [p for p in core_props if Prop.COLUMN_PANEL not in p and Prop.ROW_PANEL not in p]
    if all(Prop.FULL_RANK in p and Prop.SQUARE in p for p in others):
        if not panels:
            out.add(Prop.FULL_RANK)
        elif len(panels) == 1 and Prop.FULL_RANK in panels[0]:
            out.add(Prop.FULL_RANK)
            if Prop.COLUMN_PANEL in panels[0]:
                out.add(Prop.COLUMN_PANEL)
            else:
                out.add(Prop.ROW_PANEL)

    sandwich = _sandwich_props(cores, core_props, ctx)
    if sandwich is not None:
        out.add(Prop.SYMMETRIC)
        if Prop.SPD in sandwich and _positive_known(scalars):
            out.add(Prop.SPD)
    return out


def _sandwich_props(
    cores: list[Expression], core_props: list[frozenset[Prop]], ctx: _InferCtx
) -> frozenset[Prop] | None:
    """Detect palindromic products E1*...*M*...*E1' with a symmetric middle.

    Returns the middle's properties (with SPD kept only if every stripped
    wing has full column rank), or None if the product is not a sandwich.
    """
    lo, hi = 0, len(cores) - 1
    wings_full_rank = True
    while lo < hi:
        left, right = cores[lo], cores[hi]
        if transpose_of(right).key != left.key:
            break
        if not _full_column_rank(_infer(right, ctx)):
            wings_full_rank = False
        lo += 1
        hi -= 1
    if lo == 0:
        return None
    if lo > hi:
        middle: frozenset[Prop] = frozenset({Prop.SPD, Prop.SYMMETRIC})
    elif lo == hi:
        middle = _infer(cores[lo], ctx)
    else:
        inner = _sandwich_props(cores[lo : hi + 1], core_props[lo : hi + 1], ctx)
        if inner is None:
            mid_props = _infer(Times(cores[lo : hi + 1]), ctx)
            inner = mid_props
        middle = inner
    if Prop.SYMMETRIC not in middle:
        return None
    if not wings_full_rank:
        middle = middle - {Prop.SPD}
    return middle
