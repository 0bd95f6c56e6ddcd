"""Expression IR: operands with properties, symbolic dimensions, normal form.

Expressions are immutable trees over declared operands and the operators
+, * (n-ary, flattened), unary -, transpose and inverse.  Every node
precomputes its structural key and symbolic shape at construction time;
equality and hashing go through the key, which makes deduplication of
search states cheap.

Normal form (produced by :func:`normalize`):
  * ``Plus``/``Times`` are flattened,
  * scalar factors of a product are hoisted to the front (source order),
  * signs are pushed to the outermost position of each product term,
  * ``T(T(e)) = e``, ``inv(inv(e)) = e`` and ``inv(T(e)) = T(inv(e))``,
  * identity operands pick up their dimension from the context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Mapping, Sequence


class CompileError(Exception):
    """Base class for all errors raised by the compiler."""


class DimensionMismatch(CompileError):
    pass


class NonSquareInverse(CompileError):
    pass


class PropertyConflict(CompileError):
    pass


class UndeclaredOperand(CompileError):
    pass


# ---------------------------------------------------------------------------
# properties


class Kind(str, Enum):
    SCALAR = "scalar"
    VECTOR = "vector"
    MATRIX = "matrix"


class Prop(str, Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    SCALAR = "Scalar"
    VECTOR = "Vector"
    MATRIX = "Matrix"
    SQUARE = "Square"
    COLUMN_PANEL = "ColumnPanel"
    ROW_PANEL = "RowPanel"
    SYMMETRIC = "Symmetric"
    SPD = "SPD"
    DIAGONAL = "Diagonal"
    LOWER_TRIANGULAR = "LowerTriangular"
    UPPER_TRIANGULAR = "UpperTriangular"
    ORTHOGONAL = "Orthogonal"
    ORTHOGONAL_COLUMNS = "OrthogonalColumns"
    FULL_RANK = "FullRank"
    RANK_DEFICIENT = "RankDeficient"
    IDENTITY = "Identity"


# Diagonal matrices are square by convention here (they only ever arise as
# eigenvalue/pivot matrices), which also makes them symmetric.
_IMPLICATIONS: dict[Prop, frozenset[Prop]] = {
    Prop.SPD: frozenset({Prop.SYMMETRIC, Prop.SQUARE, Prop.FULL_RANK}),
    Prop.DIAGONAL: frozenset(
        {Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR, Prop.SQUARE, Prop.SYMMETRIC}
    ),
    Prop.IDENTITY: frozenset({Prop.DIAGONAL, Prop.ORTHOGONAL, Prop.SPD}),
    Prop.ORTHOGONAL: frozenset(
        {Prop.SQUARE, Prop.FULL_RANK, Prop.ORTHOGONAL_COLUMNS}
    ),
    Prop.ORTHOGONAL_COLUMNS: frozenset({Prop.FULL_RANK}),
}

_EXCLUSIVE: tuple[frozenset[Prop], ...] = (
    frozenset({Prop.COLUMN_PANEL, Prop.ROW_PANEL, Prop.SQUARE}),
    frozenset({Prop.FULL_RANK, Prop.RANK_DEFICIENT}),
)


def close_properties(props: Iterable[Prop]) -> frozenset[Prop]:
    """Close a property set under the implication rules (a fixed point)."""
    out = set(props)
    frontier = list(out)
    while frontier:
        p = frontier.pop()
        for q in _IMPLICATIONS.get(p, ()):
            if q not in out:
                out.add(q)
                frontier.append(q)
    # lower+upper triangular jointly mean diagonal
    if Prop.LOWER_TRIANGULAR in out and Prop.UPPER_TRIANGULAR in out:
        if Prop.DIAGONAL not in out:
            out.add(Prop.DIAGONAL)
            return close_properties(out)
    for group in _EXCLUSIVE:
        hit = group & out
        if len(hit) > 1:
            raise PropertyConflict(f"mutually exclusive properties: {sorted(x.value for x in hit)}")
    return frozenset(out)


# ---------------------------------------------------------------------------
# dimensions


WILD_VALUE = "*"


@dataclass(frozen=True)
class Dim:
    """A symbolic dimension: a name, a positive integer, or a wildcard."""

    value: str | int

    def __post_init__(self) -> None:
        if isinstance(self.value, int) and self.value < 1:
            raise DimensionMismatch(f"literal dimension must be >= 1, got {self.value}")

    @property
    def is_wild(self) -> bool:
        return self.value == WILD_VALUE

    def conforms(self, other: "Dim") -> bool:
        return self.is_wild or other.is_wild or self.value == other.value

    def __str__(self) -> str:
        return str(self.value)


ONE = Dim(1)
WILD = Dim(WILD_VALUE)


def unify(a: Dim, b: Dim) -> Dim:
    if not a.conforms(b):
        raise DimensionMismatch(f"dimensions {a} and {b} do not conform")
    return b if a.is_wild else a


# ---------------------------------------------------------------------------
# operands


@dataclass(frozen=True)
class OperandInfo:
    """A declared or derived operand: name, kind, shape, properties, subscripts."""

    name: str
    kind: Kind
    rows: Dim
    cols: Dim
    properties: frozenset[Prop] = frozenset()
    subscripts: tuple[str, ...] = ()

    def has(self, prop: Prop) -> bool:
        return prop in self.properties

    @property
    def is_factored_form(self) -> bool:
        """Triangular, diagonal, orthogonal or identity: needs no factorization."""
        return bool(
            self.properties
            & {
                Prop.LOWER_TRIANGULAR,
                Prop.UPPER_TRIANGULAR,
                Prop.DIAGONAL,
                Prop.ORTHOGONAL,
                Prop.ORTHOGONAL_COLUMNS,
                Prop.IDENTITY,
            }
        )


def make_operand(
    name: str,
    kind: Kind,
    rows: Dim | None = None,
    cols: Dim | None = None,
    properties: Iterable[Prop] = (),
    subscripts: Sequence[str] = (),
) -> OperandInfo:
    """Validate and close an operand declaration."""
    props = set(properties)
    if kind is Kind.SCALAR:
        rows, cols = ONE, ONE
        props.add(Prop.SCALAR)
    elif kind is Kind.VECTOR:
        if rows is None:
            raise DimensionMismatch(f"vector {name} needs a length")
        cols = ONE
        props.add(Prop.VECTOR)
    else:
        if rows is None or cols is None:
            raise DimensionMismatch(f"matrix {name} needs two dimensions")
        props.add(Prop.MATRIX)
        if not rows.is_wild and not cols.is_wild and rows == cols:
            props.add(Prop.SQUARE)
    closed = close_properties(props)
    if Prop.SQUARE in closed and kind is Kind.MATRIX:
        if not rows.conforms(cols):
            raise PropertyConflict(f"{name} declared square but has shape {rows}x{cols}")
        rows = cols = unify(rows, cols)
    return OperandInfo(name, kind, rows, cols, closed, tuple(subscripts))


IDENTITY_NAME = "I"


def identity_operand(dim: Dim = WILD) -> OperandInfo:
    return make_operand(IDENTITY_NAME, Kind.MATRIX, dim, dim, {Prop.IDENTITY, Prop.INPUT})


class Namer:
    """Fresh-name source that avoids a set of taken names."""

    def __init__(self, taken: Iterable[str] = ()) -> None:
        self.taken = set(taken)
        self.taken.add(IDENTITY_NAME)

    def fresh(self, base: str) -> str:
        if base not in self.taken:
            self.taken.add(base)
            return base
        k = 2
        while f"{base}{k}" in self.taken:
            k += 1
        name = f"{base}{k}"
        self.taken.add(name)
        return name


# ---------------------------------------------------------------------------
# expressions


def _info_digest(info: OperandInfo) -> str:
    import zlib

    blob = "|".join(
        (
            info.name,
            info.kind.value,
            str(info.rows),
            str(info.cols),
            ",".join(sorted(p.value for p in info.properties)),
            ",".join(info.subscripts),
        )
    )
    return format(zlib.crc32(blob.encode()), "08x")


class Expression:
    """Immutable expression node; equality/hash via the structural key.

    ``Plus`` keys are order insensitive (addition commutes), ``Times`` keys
    respect order (matrix products do not).
    """

    __slots__ = ("key", "rows", "cols", "_hash")
    children: tuple["Expression", ...] = ()

    def __init__(self, key: str, rows: Dim, cols: Dim) -> None:
        self.key = key
        self.rows = rows
        self.cols = cols
        self._hash = hash(key)

    @property
    def is_scalar_shaped(self) -> bool:
        return self.rows == ONE and self.cols == ONE

    @property
    def kind(self) -> Kind:
        if self.is_scalar_shaped:
            return Kind.SCALAR
        if self.cols == ONE:
            return Kind.VECTOR
        return Kind.MATRIX

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Expression) and self.key == other.key

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return self.key


class Operand(Expression):
    """An operand leaf.  The key carries a digest of the full OperandInfo so
    that same-named operands from different problems or search branches
    (fresh temporaries, identities of different size) never alias in the
    key-indexed caches."""

    __slots__ = ("info",)

    def __init__(self, info: OperandInfo) -> None:
        if info.name == IDENTITY_NAME:
            key = f"I[{info.rows}]"
        else:
            key = f"{info.name}#{_info_digest(info)}"
        super().__init__(key, info.rows, info.cols)
        self.info = info

    @property
    def name(self) -> str:
        return self.info.name


class ScalarLiteral(Expression):
    __slots__ = ("value",)

    def __init__(self, value: Fraction | int) -> None:
        v = Fraction(value)
        super().__init__(f"q{v}", ONE, ONE)
        self.value = v


class PatVar(Expression):
    """Pattern variable; only appears in rule/kernel patterns, never in programs."""

    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        super().__init__(f"?{name}", WILD, WILD)
        self.name = name


class Plus(Expression):
    __slots__ = ("children",)

    def __init__(self, children: Sequence[Expression]) -> None:
        kids = tuple(children)
        if not kids:
            raise CompileError("empty sum")
        rows, cols = WILD, WILD
        for ch in kids:
            rows = unify(rows, ch.rows)
            cols = unify(cols, ch.cols)
        key = "(+ " + " ".join(sorted(ch.key for ch in kids)) + ")"
        super().__init__(key, rows, cols)
        self.children = kids


class Times(Expression):
    __slots__ = ("children",)

    def __init__(self, children: Sequence[Expression]) -> None:
        kids = tuple(children)
        if not kids:
            raise CompileError("empty product")
        rows, cols = ONE, ONE
        started = False
        for ch in kids:
            if ch.is_scalar_shaped:
                continue
            if not started:
                rows, cols = ch.rows, ch.cols
                started = True
            else:
                if not cols.conforms(ch.rows):
                    raise DimensionMismatch(
                        f"product does not conform: ...x{cols} times {ch.rows}x..."
                    )
                cols = ch.cols
        key = "(* " + " ".join(ch.key for ch in kids) + ")"
        super().__init__(key, rows, cols)
        self.children = kids


class _Unary(Expression):
    __slots__ = ("children",)
    _tag = "?"

    def __init__(self, child: Expression, rows: Dim, cols: Dim) -> None:
        super().__init__(f"({self._tag} {child.key})", rows, cols)
        self.children = (child,)

    @property
    def child(self) -> Expression:
        return self.children[0]


class Minus(_Unary):
    __slots__ = ()
    _tag = "-"

    def __init__(self, child: Expression) -> None:
        super().__init__(child, child.rows, child.cols)


class Transpose(_Unary):
    __slots__ = ()
    _tag = "T"

    def __init__(self, child: Expression) -> None:
        super().__init__(child, child.cols, child.rows)


class Inverse(_Unary):
    __slots__ = ()
    _tag = "~"

    def __init__(self, child: Expression) -> None:
        if not child.rows.conforms(child.cols):
            raise NonSquareInverse(f"inverse of non-square expression {child.key}")
        d = unify(child.rows, child.cols)
        super().__init__(child, d, d)


def operand(info: OperandInfo) -> Operand:
    return Operand(info)


# ---------------------------------------------------------------------------
# normalization


def _strip_sign_and_flatten(kids: Iterable[Expression]) -> tuple[bool, list[Expression]]:
    """Strip Minus wrappers and splice nested products; returns (negate, children)."""
    sign = False
    out: list[Expression] = []
    stack = list(reversed(list(kids)))
    while stack:
        ch = stack.pop()
        if isinstance(ch, Minus):
            sign = not sign
            stack.append(ch.child)
        elif isinstance(ch, Times):
            stack.extend(reversed(ch.children))
        else:
            out.append(ch)
    return sign, out


_NORM_CACHE: dict[str, Expression] = {}


def normalize(e: Expression) -> Expression:
    """Return the unique normal form of ``e``; idempotent and value preserving."""
    hit = _NORM_CACHE.get(e.key)
    if hit is not None:
        return hit
    out = _normalize(e)
    if len(_NORM_CACHE) < 400_000:
        _NORM_CACHE[e.key] = out
        _NORM_CACHE.setdefault(out.key, out)
    return out


def _normalize(e: Expression) -> Expression:
    if isinstance(e, (Operand, ScalarLiteral, PatVar)):
        return e

    if isinstance(e, Transpose):
        c = normalize(e.child)
        if c.is_scalar_shaped:
            return c
        if isinstance(c, Transpose):
            return c.child
        if isinstance(c, Minus):
            return normalize(Minus(Transpose(c.child)))
        return Transpose(c)

    if isinstance(e, Inverse):
        c = normalize(e.child)
        if isinstance(c, ScalarLiteral):
            if c.value == 0:
                raise CompileError("inverse of literal zero")
            return ScalarLiteral(1 / c.value)
        if isinstance(c, Inverse):
            return c.child
        if isinstance(c, Minus):
            return normalize(Minus(Inverse(c.child)))
        if isinstance(c, Transpose):
            return normalize(Transpose(Inverse(c.child)))
        return Inverse(c)

    if isinstance(e, Minus):
        c = normalize(e.child)
        if isinstance(c, Minus):
            return c.child
        if isinstance(c, ScalarLiteral):
            return ScalarLiteral(-c.value)
        if isinstance(c, Plus):
            return normalize(Plus(tuple(Minus(t) for t in c.children)))
        return Minus(c)

    if isinstance(e, Plus):
        flat: list[Expression] = []
        for ch in e.children:
            ch = normalize(ch)
            if isinstance(ch, Plus):
                flat.extend(ch.children)
            else:
                flat.append(ch)
        flat = _resolve_identities(flat, mode="plus")
        if len(flat) == 1:
            return flat[0]
        return Plus(flat)

    if isinstance(e, Times):
        sign, flat = _strip_sign_and_flatten(normalize(ch) for ch in e.children)
        scalars: list[Expression] = []
        rest: list[Expression] = []
        lit = Fraction(1)
        for ch in flat:
            if isinstance(ch, ScalarLiteral):
                lit *= ch.value
            elif ch.is_scalar_shaped:
                scalars.append(ch)
            else:
                rest.append(ch)
        if lit < 0:
            sign = not sign
            lit = -lit
        if lit != 1:
            scalars.insert(0, ScalarLiteral(lit))
        rest = _resolve_identities(rest, mode="times")
        kids = scalars + rest
        if not kids:
            out: Expression = ScalarLiteral(1)
        elif len(kids) == 1:
            out = kids[0]
        else:
            out = Times(kids)
        return Minus(out) if sign else out

    raise CompileError(f"unknown expression node {e!r}")


def _fix_wild_identity(e: Expression, dim: Dim) -> Expression:
    """Rebuild ``e`` with any directly-reachable wildcard identity given
    ``dim`` (sees through Minus wrappers and scalar products)."""
    if isinstance(e, Operand) and e.info.name == IDENTITY_NAME and e.rows.is_wild:
        return Operand(identity_operand(dim))
    if isinstance(e, Minus):
        return Minus(_fix_wild_identity(e.child, dim))
    if isinstance(e, Times) and e.rows.is_wild:
        return Times([_fix_wild_identity(c, dim) for c in e.children])
    return e


def _resolve_identities(kids: list[Expression], mode: str) -> list[Expression]:
    """Give wildcard-dimensioned identity operands a concrete dimension."""
    if not any(k.rows.is_wild for k in kids):
        return kids
    out = list(kids)
    if mode == "plus":
        d = next((k.rows for k in out if not k.rows.is_wild), WILD)
        if d.is_wild:
            return out
        return [_fix_wild_identity(k, d) if k.rows.is_wild else k for k in out]
    for i, k in enumerate(out):
        if not k.rows.is_wild:
            continue
        d = WILD
        if i > 0 and not out[i - 1].cols.is_wild:
            d = out[i - 1].cols
        elif i + 1 < len(out) and not out[i + 1].rows.is_wild:
            d = out[i + 1].rows
        if not d.is_wild:
            out[i] = _fix_wild_identity(k, d)
    return out


def structural_key(e: Expression) -> str:
    """Key of a normalized expression; injective on normal forms."""
    return e.key


def infer_shape(e: Expression) -> tuple[Dim, Dim, Kind]:
    """Symbolic shape and kind of an expression (1x1 scalar, nx1 vector)."""
    return e.rows, e.cols, e.kind


# ---------------------------------------------------------------------------
# tree utilities

Path = tuple[int, ...]


def positions(e: Expression) -> list[tuple[Path, Expression]]:
    """All subterm positions in pre-order; the root has the empty path."""
    out: list[tuple[Path, Expression]] = []

    def walk(node: Expression, path: Path) -> None:
        out.append((path, node))
        for i, ch in enumerate(node.children):
            walk(ch, path + (i,))

    walk(e, ())
    return out


def subterm_at(e: Expression, path: Path) -> Expression:
    for i in path:
        e = e.children[i]
    return e


def replace_at(e: Expression, path: Path, new: Expression) -> Expression:
    if not path:
        return new
    i, rest = path[0], path[1:]
    kids = list(e.children)
    kids[i] = replace_at(kids[i], rest, new)
    if isinstance(e, Plus):
        return Plus(kids)
    if isinstance(e, Times):
        return Times(kids)
    if isinstance(e, Minus):
        return Minus(kids[0])
    if isinstance(e, Transpose):
        return Transpose(kids[0])
    if isinstance(e, Inverse):
        return Inverse(kids[0])
    raise CompileError(f"cannot rebuild node {e!r}")


def substitute(e: Expression, mapping: Mapping[str, Expression]) -> Expression:
    """Replace operands by name; result is re-normalized by the caller."""
    if isinstance(e, Operand):
        return mapping.get(e.info.name, e)
    if not e.children:
        return e
    kids = [substitute(ch, mapping) for ch in e.children]
    if isinstance(e, Plus):
        return Plus(kids)
    if isinstance(e, Times):
        return Times(kids)
    if isinstance(e, Minus):
        return Minus(kids[0])
    if isinstance(e, Transpose):
        return Transpose(kids[0])
    if isinstance(e, Inverse):
        return Inverse(kids[0])
    raise CompileError(f"cannot substitute into {e!r}")


def replace_by_key(e: Expression, target_key: str, new: Expression) -> Expression:
    """Replace every subterm whose key equals ``target_key``."""
    if e.key == target_key:
        return new
    if not e.children:
        return e
    kids = [replace_by_key(ch, target_key, new) for ch in e.children]
    if isinstance(e, Plus):
        return Plus(kids)
    if isinstance(e, Times):
        return Times(kids)
    if isinstance(e, Minus):
        return Minus(kids[0])
    if isinstance(e, Transpose):
        return Transpose(kids[0])
    if isinstance(e, Inverse):
        return Inverse(kids[0])
    return e


def operand_names(e: Expression) -> set[str]:
    out: set[str] = set()
    for _, node in positions(e):
        if isinstance(node, Operand):
            out.add(node.info.name)
    return out


def node_count(e: Expression) -> int:
    return 1 + sum(node_count(c) for c in e.children)


# views that see through the inv/transpose canonical order


def as_transpose(e: Expression) -> Expression | None:
    """If ``e`` is the transpose of some x, return x."""
    if isinstance(e, Transpose):
        return e.child
    if isinstance(e, Inverse) and isinstance(e.child, Transpose):
        # not produced by normalize, but cheap to support
        return Inverse(e.child.child)
    return None


def as_inverse(e: Expression) -> Expression | None:
    """If ``e`` is the inverse of some x, return x (e.g. T(inv(L)) -> T(L))."""
    if isinstance(e, Inverse):
        return e.child
    if isinstance(e, Transpose) and isinstance(e.child, Inverse):
        return Transpose(e.child.child)
    return None


_TRANSPOSE_CACHE: dict[str, Expression] = {}


def transpose_of(e: Expression) -> Expression:
    """Normalized transpose of an expression with products distributed."""
    hit = _TRANSPOSE_CACHE.get(e.key)
    if hit is None:
        hit = push_transposes(normalize(Transpose(e)))
        if len(_TRANSPOSE_CACHE) < 200_000:
            _TRANSPOSE_CACHE[e.key] = hit
    return hit


def push_transposes(e: Expression) -> Expression:
    """Distribute transposes over products; used for segment comparison."""
    return normalize(_push_transposes(normalize(e)))


def _push_transposes(e: Expression) -> Expression:
    if isinstance(e, Transpose):
        c = _push_transposes(e.child)
        if isinstance(c, Times):
            return Times([_push_transposes(Transpose(k)) for k in reversed(c.children)])
        if isinstance(c, Plus):
            return Plus([_push_transposes(Transpose(k)) for k in c.children])
        return Transpose(c)
    if not e.children:
        return e
    kids = [_push_transposes(ch) for ch in e.children]
    if isinstance(e, Plus):
        return Plus(kids)
    if isinstance(e, Times):
        return Times(kids)
    if isinstance(e, Minus):
        return Minus(kids[0])
    if isinstance(e, Inverse):
        return Inverse(kids[0])
    return e


# ---------------------------------------------------------------------------
# equation sets


@dataclass(frozen=True)
class Equation:
    lhs: OperandInfo
    rhs: Expression


class EquationSet:
    """Ordered equations plus the operand and dependency tables.

    Exactly one equation defines each output or auxiliary operand, and
    auxiliary definitions (like ``M = h*Phi + (1-h)*I``) can be inlined
    into the equations that use them.
    """

    def __init__(
        self,
        equations: Sequence[Equation],
        operands: Mapping[str, OperandInfo],
        dependencies: Mapping[str, tuple[str, ...]] | None = None,
    ) -> None:
        self.equations = tuple(equations)
        self.operands = dict(operands)
        self.dependencies = {k: tuple(v) for k, v in (dependencies or {}).items()}
        self._validate()

    def _validate(self) -> None:
        if not self.equations:
            raise CompileError("no equations")
        defined: set[str] = set()
        for eq in self.equations:
            if eq.lhs.name not in self.operands:
                raise UndeclaredOperand(f"left-hand side {eq.lhs.name} not declared")
            if eq.lhs.name in defined:
                raise CompileError(f"operand {eq.lhs.name} defined twice")
            defined.add(eq.lhs.name)
            for name in operand_names(eq.rhs):
                if name != IDENTITY_NAME and name not in self.operands:
                    raise UndeclaredOperand(f"operand {name} not declared")
        for name in self.dependencies:
            if name not in self.operands:
                raise UndeclaredOperand(f"dependency on undeclared operand {name}")
        # auxiliary definitions must not be cyclic
        aux = {eq.lhs.name: eq for eq in self.equations if not eq.lhs.has(Prop.OUTPUT)}
        for name in aux:
            seen = {name}
            frontier = operand_names(aux[name].rhs)
            while frontier:
                nxt: set[str] = set()
                for n in frontier:
                    if n in seen and n in aux:
                        raise CompileError(f"cyclic auxiliary definition through {n}")
                    if n in aux:
                        seen.add(n)
                        nxt |= operand_names(aux[n].rhs)
                frontier = nxt

    @property
    def outputs(self) -> list[Equation]:
        outs = [eq for eq in self.equations if eq.lhs.has(Prop.OUTPUT)]
        return outs if outs else [self.equations[0]]

    @property
    def auxiliaries(self) -> list[Equation]:
        out_names = {eq.lhs.name for eq in self.outputs}
        return [eq for eq in self.equations if eq.lhs.name not in out_names]

    def indices_of(self, name: str) -> tuple[str, ...]:
        if name in self.dependencies:
            return self.dependencies[name]
        info = self.operands.get(name)
        return info.subscripts if info else ()

    def inlined_outputs(self) -> list[tuple[OperandInfo, Expression]]:
        """Output equations with every auxiliary definition substituted in."""
        aux = {eq.lhs.name: eq.rhs for eq in self.auxiliaries}
        out = []
        for eq in self.outputs:
            rhs = eq.rhs
            for _ in range(len(aux) + 1):
                new = substitute(rhs, {n: r for n, r in aux.items()})
                if new.key == rhs.key:
                    break
                rhs = new
            out.append((eq.lhs, normalize(rhs)))
        return out

    def auxiliary_keys(self) -> dict[str, OperandInfo]:
        """Map from normalized (inlined) auxiliary rhs key to the declared operand."""
        table: dict[str, OperandInfo] = {}
        aux = {eq.lhs.name: eq.rhs for eq in self.auxiliaries}
        for eq in self.auxiliaries:
            rhs = eq.rhs
            for _ in range(len(aux) + 1):
                new = substitute(rhs, aux)
                if new.key == rhs.key:
                    break
                rhs = new
            table[normalize(rhs).key] = eq.lhs
        return table
