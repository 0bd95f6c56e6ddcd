"""Building-block registry: guarded kernel patterns, precedences, flop costs.

Kernels are classified by the dimensionality of their output relative to
their inputs: inner products first, then matrix-vector work, then
matrix-matrix work, then outer products, and explicit inversion of a
triangular matrix last (it is only taken when nothing else matches).
Scalar arithmetic is class 0 and essentially free.

Costs are the standard dense flop counts, kept symbolic (sympy) in the
declared dimension symbols so that ranking and the sequence cost model can
evaluate or compare them exactly.

The registry is data: new kernels can be appended at runtime from
descriptor files (see ``frontend.load_kernel_file``) without touching the
matching engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import sympy as sp

from . import knowledge
from .ir import (
    CompileError,
    Dim,
    Expression,
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
    positions,
    transpose_of,
)
from .rewrite import Binding, check_guards, match_pattern


class UnassignedDimension(CompileError):
    pass


_SYMBOLS: dict[str, sp.Symbol] = {}


def dim_expr(d: Dim) -> sp.Expr:
    if isinstance(d.value, int):
        return sp.Integer(d.value)
    if d.is_wild:
        raise UnassignedDimension("wildcard dimension has no size")
    sym = _SYMBOLS.get(d.value)
    if sym is None:
        sym = sp.Symbol(d.value, positive=True, integer=True)
        _SYMBOLS[d.value] = sym
    return sym


def elems(e: Expression) -> sp.Expr:
    return dim_expr(e.rows) * dim_expr(e.cols)


def evaluate_cost(expr: sp.Expr, dims: Mapping[str, int]) -> float:
    subs = {sp.Symbol(k, positive=True, integer=True): v for k, v in dims.items()}
    val = sp.simplify(expr.subs(subs))
    if val.free_symbols:
        missing = sorted(str(s) for s in val.free_symbols)
        raise UnassignedDimension(f"unassigned dimensions: {missing}")
    return float(val)


# ---------------------------------------------------------------------------
# views


def atom_view(e: Expression) -> tuple[OperandInfo, bool, bool] | None:
    """(core operand, transposed, inverted) for op / T(op) / inv(op) / T(inv(op))."""
    t = inv = False
    x = e
    if isinstance(x, Transpose):
        t = True
        x = x.child
    if isinstance(x, Inverse):
        inv = True
        x = x.child
    if isinstance(x, Operand):
        return x.info, t, inv
    return None


def _is_vector(e: Expression) -> bool:
    return e.kind is Kind.VECTOR


def _is_row(e: Expression) -> bool:
    return e.rows == Dim(1) and e.cols != Dim(1)


def _is_matrix(e: Expression) -> bool:
    return e.kind is Kind.MATRIX and not _is_row(e)


def _core_props(e: Expression) -> frozenset[Prop]:
    v = atom_view(e)
    return v[0].properties if v else frozenset()


def _is_tri_not_diag(info: OperandInfo) -> bool:
    return (
        bool(info.properties & {Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR})
        and Prop.DIAGONAL not in info.properties
    )


def _is_diag(info: OperandInfo) -> bool:
    return Prop.DIAGONAL in info.properties


# ---------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class KernelDescriptor:
    """A guarded pattern with a precedence class and a symbolic cost."""

    name: str
    precedence: int
    match_pair: Callable[[Expression, Expression], sp.Expr | None] | None = field(
        default=None, compare=False
    )
    match_whole: Callable[[Expression], sp.Expr | None] | None = field(
        default=None, compare=False
    )
    # declarative descriptors
    pattern: Expression | None = None
    guards: tuple[tuple[str, str], ...] = ()
    cost_formula: str | None = None

    def whole(self, e: Expression) -> sp.Expr | None:
        if self.pattern is not None:
            binding = match_pattern(self.pattern, e)
            if binding is None or not check_guards(self.guards, binding):
                return None
            return _eval_cost_formula(self.cost_formula or "0", binding)
        if self.match_whole is not None:
            return self.match_whole(e)
        return None


@dataclass(frozen=True)
class KernelMatch:
    """A descriptor applied at a position, with the instantiated cost.

    ``definition`` is the column-oriented computation for the fresh operand;
    when the matched window is the transpose of that definition the
    replacement has to be transposed.
    """

    descriptor: KernelDescriptor
    path: tuple[int, ...]
    span: tuple[int, int] | None
    expr: Expression
    definition: Expression
    transposed: bool
    cost_expr: sp.Expr
    binding: tuple[tuple[str, str], ...] = ()


def cost(match: KernelMatch, dims: Mapping[str, int]) -> float:
    """Numeric flop count of a match under a dimension assignment."""
    return evaluate_cost(match.cost_expr, dims)


# --- pair matchers -----------------------------------------------------------


def _pm_dot(a: Expression, b: Expression) -> sp.Expr | None:
    if _is_row(a) and _is_vector(b):
        va, vb = atom_view(a), atom_view(b)
        if va and vb and not va[2] and not vb[2]:
            return 2 * dim_expr(b.rows)
    return None


def _pm_gemv(a: Expression, b: Expression) -> sp.Expr | None:
    va = atom_view(a)
    if va is None:
        return None
    info, _, inv = va
    if inv or _is_diag(info):
        return None
    if _is_matrix(a) and _is_vector(b) and atom_view(b):
        return 2 * dim_expr(a.rows) * dim_expr(a.cols)
    return None


def _pm_gemv_row(a: Expression, b: Expression) -> sp.Expr | None:
    vb = atom_view(b)
    if vb is None or vb[2] or _is_diag(vb[0]):
        return None
    if _is_row(a) and _is_matrix(b) and atom_view(a):
        return 2 * dim_expr(b.rows) * dim_expr(b.cols)
    return None


def _pm_trsv(a: Expression, b: Expression) -> sp.Expr | None:
    va = atom_view(a)
    if va and va[2] and _is_tri_not_diag(va[0]) and _is_vector(b) and atom_view(b):
        return dim_expr(a.rows) ** 2
    return None


def _pm_trsv_row(a: Expression, b: Expression) -> sp.Expr | None:
    vb = atom_view(b)
    if vb and vb[2] and _is_tri_not_diag(vb[0]) and _is_row(a) and atom_view(a):
        return dim_expr(b.rows) ** 2
    return None


def _pm_diag_solve(a: Expression, b: Expression) -> sp.Expr | None:
    va = atom_view(a)
    if va and va[2] and _is_diag(va[0]) and _is_vector(b) and atom_view(b):
        return dim_expr(b.rows)
    return None


def _pm_diag_mv(a: Expression, b: Expression) -> sp.Expr | None:
    va = atom_view(a)
    if va and not va[2] and _is_diag(va[0]) and _is_vector(b) and atom_view(b):
        return dim_expr(b.rows)
    return None


def _pm_diag_row(a: Expression, b: Expression) -> sp.Expr | None:
    vb = atom_view(b)
    if vb and _is_diag(vb[0]) and _is_row(a) and atom_view(a):
        return dim_expr(b.rows)
    return None


def _pm_syrk(a: Expression, b: Expression) -> sp.Expr | None:
    if not (_is_matrix(a) and _is_matrix(b) and atom_view(a) and atom_view(b)):
        return None
    if transpose_of(a).key == b.key:
        return dim_expr(a.cols) * dim_expr(a.rows) ** 2
    return None


def _pm_trsm(a: Expression, b: Expression) -> sp.Expr | None:
    va, vb = atom_view(a), atom_view(b)
    if not (va and vb and _is_matrix(a) and _is_matrix(b)):
        return None
    if va[2] and _is_tri_not_diag(va[0]) and not vb[2]:
        return dim_expr(a.rows) ** 2 * dim_expr(b.cols)
    if vb[2] and _is_tri_not_diag(vb[0]) and not va[2]:
        return dim_expr(b.rows) ** 2 * dim_expr(a.rows)
    return None


def _pm_diag_scale(a: Expression, b: Expression) -> sp.Expr | None:
    va, vb = atom_view(a), atom_view(b)
    if not (va and vb and _is_matrix(a) and _is_matrix(b)):
        return None
    if _is_diag(va[0]) and not _is_diag(vb[0]):
        return elems(b)
    if _is_diag(vb[0]) and not _is_diag(va[0]):
        return elems(a)
    if _is_diag(va[0]) and _is_diag(vb[0]):
        return dim_expr(a.rows)
    return None


def _pm_gemm(a: Expression, b: Expression) -> sp.Expr | None:
    va, vb = atom_view(a), atom_view(b)
    if not (va and vb and _is_matrix(a) and _is_matrix(b)):
        return None
    if va[2] or vb[2] or _is_diag(va[0]) or _is_diag(vb[0]):
        return None
    return 2 * dim_expr(a.rows) * dim_expr(a.cols) * dim_expr(b.cols)


def _pm_outer(a: Expression, b: Expression) -> sp.Expr | None:
    if _is_vector(a) and _is_row(b) and atom_view(a) and atom_view(b):
        return dim_expr(a.rows) * dim_expr(b.cols)
    return None


# --- whole-node matchers -----------------------------------------------------


def _scalar_atom(e: Expression) -> bool:
    if isinstance(e, Minus):
        e = e.child
    if isinstance(e, (Operand, ScalarLiteral)):
        return e.is_scalar_shaped
    return False


def _wm_scalar(e: Expression) -> sp.Expr | None:
    if not e.is_scalar_shaped:
        return None
    if isinstance(e, (Times, Plus)) and len(e.children) >= 2:
        if all(_scalar_atom(c) for c in e.children):
            return sp.Integer(len(e.children) - 1)
    if isinstance(e, Inverse) and _scalar_atom(e.child):
        return sp.Integer(1)
    return None


def _term_split(term: Expression):
    neg = isinstance(term, Minus)
    t = term.child if neg else term
    if isinstance(t, Times):
        scalars = [c for c in t.children if c.is_scalar_shaped]
        cores = [c for c in t.children if not c.is_scalar_shaped]
    elif t.is_scalar_shaped:
        scalars, cores = [t], []
    else:
        scalars, cores = [], [t]
    return neg, scalars, cores


def _scalar_coeff_ok(scalars: Sequence[Expression]) -> bool:
    return all(
        isinstance(s, (Operand, ScalarLiteral)) or _wm_scalar(s) is not None
        or (isinstance(s, Plus) and all(_scalar_atom(c) for c in s.children))
        for s in scalars
    )


def _wm_axpy(e: Expression) -> sp.Expr | None:
    if not isinstance(e, Plus) or e.kind is not Kind.VECTOR:
        return None
    for term in e.children:
        neg, scalars, cores = _term_split(term)
        if len(cores) != 1 or atom_view(cores[0]) is None or not _is_vector(cores[0]):
            return None
        if atom_view(cores[0])[2] or not _scalar_coeff_ok(scalars):
            return None
    k = len(e.children)
    return (2 * k - 1) * dim_expr(e.rows)


def _wm_gemv_full(e: Expression) -> sp.Expr | None:
    if not isinstance(e, Plus) or len(e.children) != 2 or e.kind is not Kind.VECTOR:
        return None
    for first, second in (e.children, tuple(reversed(e.children))):
        negm, sm, cm = _term_split(first)
        negv, sv, cv = _term_split(second)
        if len(cm) != 2 or len(cv) != 1:
            continue
        mat, vec = cm
        if not (_is_matrix(mat) and _is_vector(vec) and _is_vector(cv[0])):
            continue
        views = [atom_view(x) for x in (mat, vec, cv[0])]
        if any(v is None for v in views):
            continue
        if views[0][2] or views[1][2] or views[2][2]:
            continue
        if not (_scalar_coeff_ok(sm) and _scalar_coeff_ok(sv)):
            continue
        return 2 * dim_expr(mat.rows) * dim_expr(mat.cols) + 2 * dim_expr(mat.rows)
    return None


def _wm_madd(e: Expression) -> sp.Expr | None:
    if not isinstance(e, Plus) or e.kind is not Kind.MATRIX:
        return None
    all_diag = True
    for term in e.children:
        neg, scalars, cores = _term_split(term)
        if len(cores) != 1:
            return None
        v = atom_view(cores[0])
        if v is None or v[2] or not _scalar_coeff_ok(scalars):
            return None
        if not _is_diag(v[0]):
            all_diag = False
    k = len(e.children)
    if all_diag:
        return (2 * k - 1) * dim_expr(e.rows)
    return (2 * k - 1) * elems(e)


def _wm_scal(e: Expression) -> sp.Expr | None:
    if not isinstance(e, Times):
        return None
    scalars = [c for c in e.children if c.is_scalar_shaped]
    cores = [c for c in e.children if not c.is_scalar_shaped]
    if not scalars or len(cores) != 1 or atom_view(cores[0]) is None:
        return None
    if atom_view(cores[0])[2] or not _scalar_coeff_ok(scalars):
        return None
    return elems(cores[0])


def _wm_trinv(e: Expression) -> sp.Expr | None:
    v = atom_view(e)
    if v and v[2] and _is_tri_not_diag(v[0]):
        return dim_expr(e.rows) ** 3 / 3
    return None


def _wm_diag_inv(e: Expression) -> sp.Expr | None:
    v = atom_view(e)
    if v and v[2] and _is_diag(v[0]):
        return dim_expr(e.rows)
    return None


def _wm_copy(e: Expression) -> sp.Expr | None:
    v = atom_view(e)
    if v and not v[2]:
        return elems(e)
    if isinstance(e, Minus):
        v = atom_view(e.child)
        if v and not v[2]:
            return elems(e)
    return None


def default_registry() -> list[KernelDescriptor]:
    """The built-in kernel set, most specific first within each class."""
    return [
        KernelDescriptor("scalar", 0, match_whole=_wm_scalar),
        KernelDescriptor("dot", 1, match_pair=_pm_dot),
        KernelDescriptor("gemv", 2, match_whole=_wm_gemv_full),
        KernelDescriptor("axpy", 2, match_whole=_wm_axpy),
        KernelDescriptor("trsv", 2, match_pair=_pm_trsv),
        KernelDescriptor("trsv", 2, match_pair=_pm_trsv_row),
        KernelDescriptor("diagsv", 2, match_pair=_pm_diag_solve),
        KernelDescriptor("diagmv", 2, match_pair=_pm_diag_mv),
        KernelDescriptor("diagmv", 2, match_pair=_pm_diag_row),
        KernelDescriptor("gemv", 2, match_pair=_pm_gemv),
        KernelDescriptor("gemv", 2, match_pair=_pm_gemv_row),
        KernelDescriptor("syrk", 3, match_pair=_pm_syrk),
        KernelDescriptor("trsm", 3, match_pair=_pm_trsm),
        KernelDescriptor("diagmm", 3, match_pair=_pm_diag_scale),
        KernelDescriptor("madd", 3, match_whole=_wm_madd),
        KernelDescriptor("scal", 3, match_whole=_wm_scal),
        KernelDescriptor("gemm", 3, match_pair=_pm_gemm),
        KernelDescriptor("outer", 4, match_pair=_pm_outer),
        KernelDescriptor("diaginv", 5, match_whole=_wm_diag_inv),
        KernelDescriptor("trinv", 5, match_whole=_wm_trinv),
    ]


COPY = KernelDescriptor("copy", 2, match_whole=_wm_copy)


# ---------------------------------------------------------------------------
# matching driver


def _mk_match(
    descriptor: KernelDescriptor,
    path: tuple[int, ...],
    span: tuple[int, int] | None,
    expr: Expression,
    cost_expr: sp.Expr,
    binding: Binding | None = None,
) -> KernelMatch:
    definition = expr
    transposed = False
    if _is_row(expr):
        definition = transpose_of(expr)
        transposed = True
    bind = tuple(sorted((k, v.key) for k, v in (binding or {}).items()))
    return KernelMatch(descriptor, path, span, expr, definition, transposed, cost_expr, bind)


def match_kernels(
    e: Expression,
    registry: Sequence[KernelDescriptor] | None = None,
    definitions: Mapping[str, Expression] | None = None,
) -> list[list[KernelMatch]]:
    """All kernel matches at all positions, grouped by precedence class.

    Groups come back best-precedence-first; inside a group matches are
    ordered innermost-first and left-to-right, and matches strictly
    contained in another match of the same group are dropped (the wider
    kernel subsumes them, e.g. ``w := b - A*y`` as a single gemv).
    """
    if registry is None:
        registry = default_registry()
    found: list[tuple[int, int, KernelMatch]] = []
    order = 0
    for path, node in positions(e):
        for d in registry:
            c = d.whole(node)
            if c is not None:
                binding = None
                if d.pattern is not None:
                    binding = match_pattern(d.pattern, node)
                found.append((d.precedence, order, _mk_match(d, path, None, node, c, binding)))
                order += 1
        if isinstance(node, Times):
            kids = node.children
            n_scalar = sum(1 for k in kids if k.is_scalar_shaped)
            for i in range(len(kids) - 1):
                a, b = kids[i], kids[i + 1]
                if a.is_scalar_shaped or b.is_scalar_shaped:
                    continue
                seen_span: set[str] = set()
                for d in registry:
                    if d.match_pair is None:
                        continue
                    c = d.match_pair(a, b)
                    if c is None:
                        continue
                    key = f"{i}"
                    if key in seen_span:
                        continue  # first (most specific) descriptor wins the span
                    seen_span.add(key)
                    if len(kids) - n_scalar == 2:
                        # the pair is the whole matrix part: absorb the scalars
                        m = _mk_match(d, path, None, node, c)
                    else:
                        m = _mk_match(d, path, (i, i + 2), Times([a, b]), c)
                    found.append((d.precedence, order, m))
                    order += 1

    by_prec: dict[int, list[tuple[int, KernelMatch]]] = {}
    for prec, ord_, m in found:
        by_prec.setdefault(prec, []).append((ord_, m))
    groups: list[list[KernelMatch]] = []
    # class 0 is "free choice": scalar work never preempts a real kernel,
    # it is simply taken when nothing else matches
    for prec in sorted(by_prec, key=lambda p: p if p != 0 else 99):
        ms = by_prec[prec]
        ms.sort(key=lambda t: (-len(t[1].path), t[1].path, t[1].span or (-1, -1), t[0]))
        pruned = _prune_contained([m for _, m in ms])
        groups.append(pruned)
    return groups


def _covers(a: KernelMatch, b: KernelMatch) -> bool:
    """True when match a strictly contains match b."""
    if a.path == b.path and a.span == b.span:
        return False
    if b.path[: len(a.path)] != a.path:
        return False
    if a.span is None:
        return True
    if len(b.path) == len(a.path):
        return False
    child = b.path[len(a.path)]
    return a.span[0] <= child < a.span[1]


def _prune_contained(ms: list[KernelMatch]) -> list[KernelMatch]:
    out = []
    for m in ms:
        if any(_covers(other, m) for other in ms if other is not m):
            continue
        out.append(m)
    return out


# ---------------------------------------------------------------------------
# factorization costs


def factorization_cost(name: str, m_rows: Dim, m_cols: Dim) -> sp.Expr:
    r, c = dim_expr(m_rows), dim_expr(m_cols)
    if name == "cholesky":
        return r**3 / 3
    if name == "ldl":
        return r**3 / 3
    if name == "qr":
        return 2 * r * c**2 - sp.Rational(2, 3) * c**3
    if name == "lq":
        return 2 * c * r**2 - sp.Rational(2, 3) * r**3
    if name == "lu":
        return sp.Rational(2, 3) * r**3
    if name == "eig":
        return 9 * r**3
    if name == "svd":
        return 14 * r * c**2
    raise CompileError(f"unknown factorization {name}")


# ---------------------------------------------------------------------------
# declarative descriptors


def _eval_cost_formula(formula: str, binding: Binding) -> sp.Expr:
    """Evaluate a cost formula over rows(x)/cols(x) of the bound variables."""
    env: dict[str, object] = {}
    for name, expr in binding.items():
        env[f"rows_{name}"] = dim_expr(expr.rows)
        env[f"cols_{name}"] = dim_expr(expr.cols)
    text = formula.replace("rows(", "rows_").replace("cols(", "cols_")
    text = text.replace(")", "") if "(" not in formula.translate(
        str.maketrans("", "", "rowscols")
    ) else text
    # rows(x) -> rows_x: strip the matching close paren
    import re

    text = re.sub(r"(rows|cols)\((\w+)\)", r"\1_\2", formula)
    try:
        return sp.sympify(text, locals=env)
    except Exception as exc:
        raise CompileError(f"bad cost formula {formula!r}: {exc}") from exc


def make_declarative_kernel(
    name: str,
    precedence: int,
    pattern: Expression,
    guards: Sequence[tuple[str, str]],
    cost_formula: str,
) -> KernelDescriptor:
    return KernelDescriptor(
        name,
        precedence,
        pattern=pattern,
        guards=tuple(guards),
        cost_formula=cost_formula,
    )
