"""Matrix-algebra engine: guarded rewrite rules, variant closure, segments.

The rules are algebraic identities and may apply in both directions, so
there is no canonical form: :func:`close_variants` explores the set of
equivalent representations breadth-first under configurable caps, and
:func:`simplify` picks the variant that is minimal under
(inverses applied to unfactored subterms, node count, key).

Rules come in two flavours.  Built-in structural rules are implemented as
functions on nodes (they need n-ary window matching and identity
completion).  Declarative rules carry a pattern with variables plus named
guards and can be loaded from text files at runtime.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from . import knowledge
from .ir import (
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
    as_inverse,
    as_transpose,
    identity_operand,
    make_operand,
    node_count,
    normalize,
    operand,
    positions,
    push_transposes,
    replace_at,
    structural_key,
    transpose_of,
)

Binding = dict[str, Expression]


# ---------------------------------------------------------------------------
# guards (shared with declarative kernels and inference rules)


def _props(e: Expression, definitions=None) -> frozenset[Prop]:
    return knowledge.infer_properties(e, definitions)


GUARDS: dict[str, Callable[[Expression, Mapping | None], bool]] = {
    "scalar": lambda e, d: e.is_scalar_shaped,
    "not_scalar": lambda e, d: not e.is_scalar_shaped,
    "vector": lambda e, d: e.kind is Kind.VECTOR,
    "matrix": lambda e, d: e.kind is Kind.MATRIX,
    "square": lambda e, d: not e.rows.is_wild and e.rows == e.cols,
    "orthogonal": lambda e, d: Prop.ORTHOGONAL in _props(e, d),
    "orthogonal_columns": lambda e, d: Prop.ORTHOGONAL_COLUMNS in _props(e, d),
    "triangular": lambda e, d: bool(
        _props(e, d) & {Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR}
    ),
    "lower_triangular": lambda e, d: Prop.LOWER_TRIANGULAR in _props(e, d),
    "upper_triangular": lambda e, d: Prop.UPPER_TRIANGULAR in _props(e, d),
    "diagonal": lambda e, d: Prop.DIAGONAL in _props(e, d),
    "symmetric": lambda e, d: Prop.SYMMETRIC in _props(e, d),
    "spd": lambda e, d: Prop.SPD in _props(e, d),
    "full_rank": lambda e, d: Prop.FULL_RANK in _props(e, d),
    "identity": lambda e, d: Prop.IDENTITY in _props(e, d),
}


def check_guards(
    guards: Sequence[tuple[str, str]], binding: Binding, definitions=None
) -> bool:
    for gname, var in guards:
        fn = GUARDS.get(gname)
        if fn is None:
            raise KeyError(f"unknown guard predicate {gname!r}")
        if var not in binding or not fn(binding[var], definitions):
            return False
    return True


# ---------------------------------------------------------------------------
# pattern matching (declarative rules, kernels, inference rules)


def match_pattern(pattern: Expression, e: Expression, binding: Binding | None = None):
    """Structural match with single-subterm pattern variables.

    A Times pattern with k children also matches any contiguous window of a
    longer product (the window is matched as a unit by the caller); a Plus
    pattern with k children matches any k-subset of a longer sum.  Returns
    the binding dict or None.
    """
    b = dict(binding or {})

    def walk(p: Expression, x: Expression) -> bool:
        if isinstance(p, PatVar):
            old = b.get(p.name)
            if old is not None:
                return old.key == x.key
            b[p.name] = x
            return True
        if isinstance(p, Operand):
            return isinstance(x, Operand) and x.info.name == p.info.name
        if isinstance(p, ScalarLiteral):
            return isinstance(x, ScalarLiteral) and x.value == p.value
        if type(p) is not type(x):
            return False
        if isinstance(p, Plus):
            if len(p.children) > len(x.children):
                return False
            if len(p.children) == len(x.children):
                return _match_plus_exact(p.children, x.children)
            return False
        if len(p.children) != len(x.children):
            return False
        return all(walk(pc, xc) for pc, xc in zip(p.children, x.children))

    def _match_plus_exact(pkids, xkids) -> bool:
        # order-insensitive: try permutations of the sum's children
        for perm in itertools.permutations(range(len(xkids))):
            saved = dict(b)
            if all(walk(pk, xkids[i]) for pk, i in zip(pkids, perm)):
                return True
            b.clear()
            b.update(saved)
        return False

    return b if walk(pattern, e) else None


def instantiate(template: Expression, binding: Binding) -> Expression:
    if isinstance(template, PatVar):
        return binding[template.name]
    if not template.children:
        return template
    kids = [instantiate(c, binding) for c in template.children]
    if isinstance(template, Plus):
        return Plus(kids)
    if isinstance(template, Times):
        return Times(kids)
    if isinstance(template, Minus):
        return Minus(kids[0])
    if isinstance(template, Transpose):
        return Transpose(kids[0])
    if isinstance(template, Inverse):
        return Inverse(kids[0])
    raise TypeError(f"cannot instantiate {template!r}")


# ---------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class RewriteRule:
    """A named, guarded, value-preserving rewrite.

    Either ``fn`` (structural builtin) or the pattern/guards/replacement
    triple (declarative) is set.  ``templates`` hold instantiable examples
    used by the numeric soundness suite.
    """

    name: str
    direction: str = "one-way"
    pattern: Expression | None = None
    guards: tuple[tuple[str, str], ...] = ()
    replacement: Expression | None = None
    fn: Callable[[Expression], list[Expression]] | None = field(default=None, compare=False)
    templates: tuple[tuple[Expression, tuple[OperandInfo, ...]], ...] = field(
        default=(), compare=False
    )

    def apply_at(self, e: Expression) -> list[Expression]:
        """All one-step rewrites of this rule applied at node ``e``."""
        if self.fn is not None:
            return self.fn(e)
        out = []
        if isinstance(self.pattern, Times) and isinstance(e, Times):
            k = len(self.pattern.children)
            n = len(e.children)
            for start in range(n - k + 1):
                window = e.children[start : start + k]
                target = Times(window) if k > 1 else window[0]
                binding = match_pattern(self.pattern, target)
                if binding is None or not check_guards(self.guards, binding):
                    continue
                repl = _resolve_identity_dims(
                    instantiate(self.replacement, binding), target
                )
                kids = list(e.children[:start]) + [repl] + list(e.children[start + k :])
                out.append(Times(kids) if len(kids) > 1 else kids[0])
            return out
        binding = match_pattern(self.pattern, e)
        if binding is not None and check_guards(self.guards, binding):
            out.append(_resolve_identity_dims(instantiate(self.replacement, binding), e))
        return out


def _resolve_identity_dims(e: Expression, matched: Expression) -> Expression:
    if isinstance(e, Operand) and e.info.name == "I" and e.rows.is_wild:
        if not matched.rows.is_wild:
            return operand(identity_operand(matched.rows))
    return e


def _identity(d: Dim) -> Expression:
    return operand(identity_operand(d))


# --- builtin structural rules ----------------------------------------------


def _rw_transpose_of_product(e: Expression) -> list[Expression]:
    if isinstance(e, Transpose) and isinstance(e.child, Times):
        return [Times([Transpose(c) for c in reversed(e.child.children)])]
    return []


def _rw_fold_transposes(e: Expression) -> list[Expression]:
    out = []
    if isinstance(e, Times):
        kids = e.children
        for i in range(len(kids) - 1):
            a, b = as_transpose(kids[i]), as_transpose(kids[i + 1])
            if a is not None and b is not None:
                folded = Transpose(Times([b, a]))
                rest = list(kids[:i]) + [folded] + list(kids[i + 2 :])
                out.append(Times(rest) if len(rest) > 1 else rest[0])
    return out


def _all_square(kids: Sequence[Expression]) -> bool:
    return all(
        k.is_scalar_shaped or (not k.rows.is_wild and k.rows == k.cols) for k in kids
    )


def _rw_inverse_of_product(e: Expression) -> list[Expression]:
    if isinstance(e, Inverse) and isinstance(e.child, Times):
        kids = e.child.children
        if len(kids) >= 2 and _all_square(kids):
            return [Times([Inverse(c) for c in reversed(kids)])]
    return []


def _rw_fold_inverses(e: Expression) -> list[Expression]:
    out = []
    if isinstance(e, Times):
        kids = e.children
        for i in range(len(kids) - 1):
            a, b = as_inverse(kids[i]), as_inverse(kids[i + 1])
            if a is not None and b is not None and _all_square((a, b)):
                folded = Inverse(Times([b, a]))
                rest = list(kids[:i]) + [folded] + list(kids[i + 2 :])
                out.append(Times(rest) if len(rest) > 1 else rest[0])
    return out


def _cancel_windows(e: Expression, cancels) -> list[Expression]:
    out = []
    if not isinstance(e, Times):
        return out
    kids = e.children
    for i in range(len(kids) - 1):
        a, b = kids[i], kids[i + 1]
        dim = cancels(a, b)
        if dim is None:
            continue
        rest = list(kids[:i]) + [_identity(dim)] + list(kids[i + 2 :])
        out.append(Times(rest) if len(rest) > 1 else rest[0])
    return out


def _rw_orthogonal_cancel(e: Expression) -> list[Expression]:
    def cancels(a: Expression, b: Expression) -> Dim | None:
        inner = as_transpose(a)
        if inner is not None and inner.key == b.key:
            if Prop.ORTHOGONAL_COLUMNS in _props(b):
                return b.cols  # Q'Q = I (p x p)
        inner = as_transpose(b)
        if inner is not None and inner.key == a.key:
            if Prop.ORTHOGONAL in _props(a):
                return a.rows  # QQ' = I for square orthogonal Q
        return None

    return _cancel_windows(e, cancels)


def _rw_inverse_cancel(e: Expression) -> list[Expression]:
    def cancels(a: Expression, b: Expression) -> Dim | None:
        inner = as_inverse(a)
        if inner is not None and inner.key == b.key:
            p = _props(b)
            if Prop.FULL_RANK in p and not b.rows.is_wild and b.rows == b.cols:
                return b.rows
        inner = as_inverse(b)
        if inner is not None and inner.key == a.key:
            p = _props(a)
            if Prop.FULL_RANK in p and not a.rows.is_wild and a.rows == a.cols:
                return a.rows
        return None

    return _cancel_windows(e, cancels)


def _rw_drop_identity(e: Expression) -> list[Expression]:
    out = []
    if isinstance(e, Times):
        kids = e.children
        has_nonscalar_other = (
            sum(1 for k in kids if not k.is_scalar_shaped) >= 2
        )
        for i, k in enumerate(kids):
            if isinstance(k, Operand) and Prop.IDENTITY in k.info.properties:
                if has_nonscalar_other:
                    rest = list(kids[:i]) + list(kids[i + 1 :])
                    out.append(Times(rest) if len(rest) > 1 else rest[0])
    return out


def _rw_inv_orthogonal(e: Expression) -> list[Expression]:
    if isinstance(e, Inverse) and Prop.ORTHOGONAL in _props(e.child):
        return [Transpose(e.child)]
    return []


def _rw_trans_symmetric(e: Expression) -> list[Expression]:
    if isinstance(e, Transpose) and Prop.SYMMETRIC in _props(e.child):
        return [e.child]
    return []


def _rw_distribute(e: Expression) -> list[Expression]:
    out = []
    if isinstance(e, Times):
        kids = e.children
        for i, k in enumerate(kids):
            if isinstance(k, Plus):
                terms = [
                    Times(list(kids[:i]) + [t] + list(kids[i + 1 :])) for t in k.children
                ]
                out.append(Plus(terms))
    return out


def _rw_push_minus(e: Expression) -> list[Expression]:
    if isinstance(e, Minus) and isinstance(e.child, Plus):
        return [Plus([Minus(t) for t in e.child.children])]
    return []


def _cheap_inverse(x: Expression) -> Expression | None:
    """Inverse of x when a closed form exists (orthogonal -> transpose)."""
    p = _props(x)
    if Prop.IDENTITY in p:
        return x
    if Prop.ORTHOGONAL in p:
        return normalize(Transpose(x))
    return None


def _rw_factor_plus(e: Expression) -> list[Expression]:
    """Reverse distribution: pull a shared first or last factor out of a sum.

    A term that is just scalar*I joins a group when the pulled factor X has
    a closed-form inverse (then scalar*I = X * (scalar*inv(X)) and the
    completion stays cheap); a term equal to the factor itself contributes
    the identity as its remainder.
    """
    if not isinstance(e, Plus) or len(e.children) < 2:
        return []
    out: list[Expression] = []
    parsed = []
    for term in e.children:
        neg = isinstance(term, Minus)
        t = term.child if neg else term
        if isinstance(t, Times):
            scalars = [c for c in t.children if c.is_scalar_shaped]
            cores = [c for c in t.children if not c.is_scalar_shaped]
        elif t.is_scalar_shaped:
            scalars, cores = [t], []
        else:
            scalars, cores = [], [t]
        parsed.append((neg, scalars, cores))

    def rebuild(neg: bool, scalars: list[Expression], cores: list[Expression]) -> Expression:
        kids = scalars + cores
        if not kids:
            body: Expression = ScalarLiteral(1)
        elif len(kids) == 1:
            body = kids[0]
        else:
            body = Times(kids)
        return Minus(body) if neg else body

    for side in ("prefix", "suffix"):
        groups: dict[str, list[int]] = {}
        for idx, (neg, scalars, cores) in enumerate(parsed):
            if not cores:
                continue
            anchor = cores[0] if side == "prefix" else cores[-1]
            if isinstance(anchor, Operand) and Prop.IDENTITY in anchor.info.properties:
                continue
            groups.setdefault(anchor.key, []).append(idx)
        identity_terms = [
            idx
            for idx, (neg, scalars, cores) in enumerate(parsed)
            if len(cores) == 1
            and isinstance(cores[0], Operand)
            and Prop.IDENTITY in cores[0].info.properties
        ]
        for anchor_key, members in sorted(groups.items()):
            anchor = None
            joined = list(members)
            for idx in identity_terms:
                if idx not in joined:
                    joined.append(idx)
            if len(joined) < 2:
                continue
            middles: list[Expression] = []
            ok = True
            for idx in sorted(joined):
                neg, scalars, cores = parsed[idx]
                if idx in members:
                    if anchor is None:
                        anchor = cores[0] if side == "prefix" else cores[-1]
                    rest = cores[1:] if side == "prefix" else cores[:-1]
                    if not rest:
                        dim = anchor.cols if side == "prefix" else anchor.rows
                        rest = [_identity(dim)]
                    middles.append(rebuild(neg, scalars, rest))
                else:
                    # scalar * I term: complete through the anchor's inverse
                    if anchor is None:
                        anchor_idx = members[0]
                        cs = parsed[anchor_idx][2]
                        anchor = cs[0] if side == "prefix" else cs[-1]
                    inv = _cheap_inverse(anchor)
                    if inv is None:
                        ok = False
                        break
                    middles.append(rebuild(neg, scalars, [inv]))
            if not ok or anchor is None:
                continue
            factored = (
                Times([anchor, Plus(middles)])
                if side == "prefix"
                else Times([Plus(middles), anchor])
            )
            rest_terms = [e.children[i] for i in range(len(parsed)) if i not in joined]
            out.append(Plus([factored] + rest_terms) if rest_terms else factored)
    return out


# --- templates for the numeric soundness suite ------------------------------


def _t_op(name: str, kind: Kind, rows, cols, props=()) -> OperandInfo:
    return make_operand(name, kind, Dim(rows), Dim(cols) if cols else None, props)


def _mk(name, kind, rows, cols=None, props=()) -> OperandInfo:
    return make_operand(
        name, kind, Dim(rows) if rows else None, Dim(cols) if cols else None, props
    )


def builtin_rules() -> list[RewriteRule]:
    """The built-in rule set (the Box-4 identities plus negation pushing)."""
    A = _mk("A", Kind.MATRIX, "m", "k")
    B = _mk("B", Kind.MATRIX, "k", "n")
    As = _mk("A", Kind.MATRIX, "n", "n", {Prop.FULL_RANK})
    Bs = _mk("B", Kind.MATRIX, "n", "n", {Prop.FULL_RANK})
    Q = _mk("Q", Kind.MATRIX, "n", "p", {Prop.COLUMN_PANEL, Prop.ORTHOGONAL_COLUMNS})
    Qs = _mk("Q", Kind.MATRIX, "n", "n", {Prop.ORTHOGONAL})
    S = _mk("S", Kind.MATRIX, "n", "n", {Prop.SYMMETRIC})
    D = _mk("D", Kind.MATRIX, "n", "n", {Prop.DIAGONAL, Prop.FULL_RANK})
    x = _mk("x", Kind.VECTOR, "n")
    y = _mk("y", Kind.VECTOR, "n")

    def T(i):
        return Transpose(operand(i))

    def inv(i):
        return Inverse(operand(i))

    rules = [
        RewriteRule(
            "transpose_of_product",
            "bidirectional",
            fn=_rw_transpose_of_product,
            templates=((Transpose(Times([operand(A), operand(B)])), (A, B)),),
        ),
        RewriteRule(
            "product_of_transposes",
            "bidirectional",
            fn=_rw_fold_transposes,
            templates=((Times([T(B), T(A)]), (A, B)),),
        ),
        RewriteRule(
            "inverse_of_product",
            "bidirectional",
            fn=_rw_inverse_of_product,
            templates=((Inverse(Times([operand(As), operand(Bs)])), (As, Bs)),),
        ),
        RewriteRule(
            "product_of_inverses",
            "bidirectional",
            fn=_rw_fold_inverses,
            templates=((Times([inv(Bs), inv(As)]), (As, Bs)),),
        ),
        RewriteRule(
            "orthogonal_cancel",
            "one-way",
            fn=_rw_orthogonal_cancel,
            templates=(
                (Times([T(Q), operand(Q)]), (Q,)),
                (Times([operand(Qs), T(Qs)]), (Qs,)),
            ),
        ),
        RewriteRule(
            "inverse_cancel",
            "one-way",
            fn=_rw_inverse_cancel,
            templates=(
                (Times([inv(As), operand(As)]), (As,)),
                (Times([operand(As), inv(As)]), (As,)),
            ),
        ),
        RewriteRule(
            "drop_identity",
            "one-way",
            fn=_rw_drop_identity,
            templates=((Times([operand(A), _identity(Dim("k"))]), (A,)),),
        ),
        RewriteRule(
            "inverse_of_orthogonal",
            "one-way",
            fn=_rw_inv_orthogonal,
            templates=((inv(Qs), (Qs,)),),
        ),
        RewriteRule(
            "transpose_of_symmetric",
            "one-way",
            fn=_rw_trans_symmetric,
            templates=((T(S), (S,)),),
        ),
        RewriteRule(
            "distribute_product",
            "bidirectional",
            fn=_rw_distribute,
            templates=(
                (Times([operand(As), Plus([operand(Bs), operand(D)])]), (As, Bs, D)),
            ),
        ),
        RewriteRule(
            "factor_common",
            "bidirectional",
            fn=_rw_factor_plus,
            templates=(
                (
                    Plus([
                        Times([operand(Qs), operand(D), T(Qs)]),
                        Times([operand(Qs), T(Qs)]),
                    ]),
                    (Qs, D),
                ),
            ),
        ),
        RewriteRule(
            "push_negation",
            "one-way",
            fn=_rw_push_minus,
            templates=((Minus(Plus([operand(x), operand(y)])), (x, y)),),
        ),
    ]
    return rules


# ---------------------------------------------------------------------------
# variant closure and simplification


@dataclass
class VariantSet:
    """Closure of rule applications around a seed expression."""

    seed: Expression
    variants: dict[str, Expression]
    provenance: dict[str, tuple[str, str]]  # key -> (parent key, rule name)
    truncated: bool = False

    def __contains__(self, e: Expression) -> bool:
        return e.key in self.variants

    def __len__(self) -> int:
        return len(self.variants)

    def chain(self, e: Expression) -> list[str]:
        """Rule names applied from the seed to reach ``e``."""
        out: list[str] = []
        key = e.key
        while key in self.provenance:
            key, rule = self.provenance[key]
            out.append(rule)
        return list(reversed(out))


def close_variants(
    e: Expression,
    rules: Sequence[RewriteRule] | None = None,
    max_variants: int = 512,
    max_depth: int = 8,
) -> VariantSet:
    """Breadth-first closure of rule applications at every subterm.

    Deterministic: variants are produced in (depth, rule index, position,
    FIFO) order and deduplicated by structural key.  Hitting the caps is
    not an error; the result is just flagged as truncated.
    """
    if rules is None:
        rules = builtin_rules()
    seed = normalize(e)
    variants: dict[str, Expression] = {seed.key: seed}
    provenance: dict[str, tuple[str, str]] = {}
    frontier: list[Expression] = [seed]
    truncated = False
    depth = 0
    while frontier and depth < max_depth:
        depth += 1
        next_frontier: list[Expression] = []
        for expr in frontier:
            for path, sub in positions(expr):
                for rule in rules:
                    for candidate in rule.apply_at(sub):
                        try:
                            new = normalize(replace_at(expr, path, candidate))
                        except Exception:
                            continue
                        if new.key in variants:
                            continue
                        if len(variants) >= max_variants:
                            truncated = True
                            break
                        variants[new.key] = new
                        provenance[new.key] = (expr.key, rule.name)
                        next_frontier.append(new)
                    if truncated:
                        break
                if truncated:
                    break
            if truncated:
                break
        if truncated:
            break
        frontier = next_frontier
    if frontier and depth >= max_depth and any(True for _ in frontier):
        pass
    return VariantSet(seed, variants, provenance, truncated)


_OFFENDING_CACHE: dict[str, int] = {}


def offending_inverses(e: Expression) -> int:
    """Inverse nodes applied to subterms that are not in factored form."""
    hit = _OFFENDING_CACHE.get(e.key)
    if hit is not None:
        return hit
    count = 0
    for _, node in positions(e):
        if isinstance(node, Inverse):
            child = node.child
            if child.is_scalar_shaped:
                continue
            props = _props(child)
            if props & {Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR, Prop.DIAGONAL}:
                continue
            count += 1
    if len(_OFFENDING_CACHE) < 400_000:
        _OFFENDING_CACHE[e.key] = count
    return count


def _folded_transposes(e: Expression) -> int:
    return sum(
        1
        for _, n in positions(e)
        if isinstance(n, Transpose) and isinstance(n.child, (Times, Plus))
    )


def _matrix_sum_terms(e: Expression) -> int:
    # distributing a scalar over the identity (h*Phi + (1-h)*I ->
    # h*Phi - h*I + I) shaves a node but adds a term; prefer fewer terms
    total = 0
    for _, n in positions(e):
        if isinstance(n, Plus) and not n.is_scalar_shaped:
            total += len(n.children)
    return total


def _simplify_rank(e: Expression) -> tuple[int, int, int, int, str]:
    # ties on node count go to the representation that keeps transposes on
    # atoms (a folded (A*Z)' hides kernel-matchable windows)
    return (
        offending_inverses(e),
        _matrix_sum_terms(e),
        node_count(e),
        _folded_transposes(e),
        e.key,
    )


_SIMPLIFY_CACHE: dict[tuple[int, str], Expression] = {}


def simplify(
    e: Expression,
    rules: Sequence[RewriteRule] | None = None,
    max_variants: int = 512,
    max_depth: int = 8,
) -> Expression:
    """Minimal member of the variant closure; deterministic.

    Reseeds the closure from the current minimum until a fixed point, so
    long simplification chains survive the per-closure caps.
    """
    if rules is None:
        rules = builtin_rules()
    rules_id = id(rules) if not isinstance(rules, list) else None
    seed = normalize(e)
    cache_key = (id(tuple(r.name for r in rules)), seed.key)
    # cache keyed on the rule-name tuple content instead of object identity
    names = "|".join(r.name for r in rules)
    cache_key = (hash(names), seed.key)
    hit = _SIMPLIFY_CACHE.get(cache_key)
    if hit is not None:
        return hit
    best = seed
    for _ in range(6):
        vs = close_variants(best, rules, max_variants, max_depth)
        new_best = min(vs.variants.values(), key=_simplify_rank)
        if new_best.key == best.key:
            break
        best = new_best
    _SIMPLIFY_CACHE[cache_key] = best
    return best


# ---------------------------------------------------------------------------
# common segments


@dataclass(frozen=True)
class Occurrence:
    expr_index: int  # which expression in the scanned list
    container: tuple[int, ...]  # path of the containing Times node ((), if whole)
    start: int
    length: int
    relation: str  # identical | transpose | negation


@dataclass
class SegmentGroup:
    representative: Expression  # normalized, column-oriented definition
    occurrences: list[Occurrence]

    @property
    def weight(self) -> tuple[int, int]:
        return (len(self.occurrences), node_count(self.representative))


def _canon_for_match(e: Expression) -> Expression:
    """Bounded canonicalization used to equate segments up to transposition.

    Pushes transposes through products and folds transposes of symmetric
    subterms; this is the cheap equivalent of comparing keys after a
    depth-2 rule closure.
    """
    e = push_transposes(e)

    def fold(x: Expression) -> Expression:
        if isinstance(x, Transpose) and Prop.SYMMETRIC in _props(x.child):
            return fold(x.child)
        if not x.children:
            return x
        kids = [fold(c) for c in x.children]
        if isinstance(x, Plus):
            return Plus(kids)
        if isinstance(x, Times):
            return Times(kids)
        if isinstance(x, Minus):
            return Minus(kids[0])
        if isinstance(x, Transpose):
            return Transpose(kids[0])
        if isinstance(x, Inverse):
            return Inverse(kids[0])
        return x

    return normalize(fold(e))


def _window_expr(children: Sequence[Expression]) -> Expression:
    return children[0] if len(children) == 1 else Times(list(children))


def _segment_allowed(e: Expression) -> bool:
    # a segment must be computable without materializing a general inverse,
    # and pure scalar arithmetic is never worth sharing
    inv = as_inverse(e)
    if inv is not None and not e.is_scalar_shaped:
        return False
    if all(
        n.info.kind is Kind.SCALAR
        for _, n in positions(e)
        if isinstance(n, Operand)
    ):
        return False
    return True


def find_common_segments(
    exprs: Expression | Sequence[Expression],
) -> list[SegmentGroup]:
    """Maximal sub-products/sub-sums occurring at least twice, up to
    transposition and negation.

    Occurrences are windows of the flattened products (scalar factors are
    not part of a window).  Groups are ordered most-occurrences first, then
    longest, then by key.
    """
    if isinstance(exprs, Expression):
        exprs = [exprs]
    windows: list[tuple[str, str, Occurrence, Expression]] = []
    for ei, expr in enumerate(exprs):
        for path, node in positions(expr):
            if isinstance(node, Times):
                kids = [c for c in node.children if not c.is_scalar_shaped]
                offset = len(node.children) - len(kids)
                for length in range(2, len(kids) + 1):
                    for start in range(len(kids) - length + 1):
                        win = kids[start : start + length]
                        w = normalize(_window_expr(win))
                        if not _segment_allowed(w):
                            continue
                        k_id = _canon_for_match(w).key
                        k_tr = _canon_for_match(Transpose(w)).key
                        windows.append(
                            (
                                k_id,
                                k_tr,
                                Occurrence(ei, path, offset + start, length, "?"),
                                w,
                            )
                        )
            elif isinstance(node, Plus) and len(positions(node)) > 2:
                w = normalize(node)
                if _segment_allowed(w):
                    k_id = _canon_for_match(w).key
                    k_tr = _canon_for_match(Transpose(w)).key
                    windows.append(
                        (k_id, k_tr, Occurrence(ei, path, 0, 0, "?"), w)
                    )

    groups: dict[str, list[tuple[str, Occurrence, Expression]]] = {}
    for k_id, k_tr, occ, w in windows:
        canon = min(k_id, k_tr)
        rel = "identical" if canon == k_id else "transpose"
        groups.setdefault(canon, []).append((rel, occ, w))

    out: list[SegmentGroup] = []
    for canon, members in groups.items():
        if len(members) < 2:
            continue
        # drop overlapping duplicates inside the same container
        seen_spans: set[tuple[int, tuple[int, ...], int, int]] = set()
        kept: list[tuple[str, Occurrence, Expression]] = []
        for rel, occ, w in members:
            span = (occ.expr_index, occ.container, occ.start, occ.length)
            overlap = any(
                s[0] == span[0]
                and s[1] == span[1]
                and not (span[2] + span[3] <= s[2] or s[2] + s[3] <= span[2])
                for s in seen_spans
            )
            if overlap:
                continue
            seen_spans.add(span)
            kept.append((rel, occ, w))
        if len(kept) < 2:
            continue
        rep = _pick_representative(kept)
        occs = []
        rep_canon = _canon_for_match(rep).key
        for rel, occ, w in kept:
            relation = "identical" if _canon_for_match(w).key == rep_canon else "transpose"
            occs.append(
                Occurrence(occ.expr_index, occ.container, occ.start, occ.length, relation)
            )
        out.append(SegmentGroup(rep, occs))

    out = _drop_dominated(out)
    out.sort(key=lambda g: (-len(g.occurrences), -node_count(g.representative),
                            g.representative.key))
    return out


def _transpose_count(e: Expression) -> int:
    return sum(1 for _, n in positions(e) if isinstance(n, Transpose))


def _pick_representative(members) -> Expression:
    """Column-shaped orientation first, then fewest transposes, then first."""
    candidates = []
    for order, (rel, occ, w) in enumerate(members):
        for expr in (w, transpose_of(w)):
            is_column = expr.cols == Dim(1) or expr.rows != Dim(1)
            candidates.append((not is_column, _transpose_count(expr), order, expr.key, expr))
    candidates.sort(key=lambda t: t[:4])
    return candidates[0][4]


def _drop_dominated(groups: list[SegmentGroup]) -> list[SegmentGroup]:
    """Remove groups strictly inside another group with the same occurrences."""
    kept: list[SegmentGroup] = []
    for g in groups:
        dominated = False
        for h in groups:
            if h is g or len(h.occurrences) != len(g.occurrences):
                continue
            if node_count(h.representative) <= node_count(g.representative):
                continue
            if all(
                any(
                    og.expr_index == oh.expr_index
                    and og.container == oh.container
                    and oh.start <= og.start
                    and og.start + og.length <= oh.start + oh.length
                    for oh in h.occurrences
                )
                for og in g.occurrences
            ):
                dominated = True
                break
        if not dominated:
            kept.append(g)
    return kept


def expose_segment(
    exprs: Sequence[Expression], group: SegmentGroup, fresh: OperandInfo
) -> list[Expression]:
    """Replace every occurrence of the group by the fresh operand.

    Identical occurrences become the operand, transposed ones its
    transpose; results are normalized.
    """
    t = operand(fresh)
    t_tr = Transpose(t)
    out = list(exprs)
    # replace from the right within each container so spans stay valid
    per_container: dict[tuple[int, tuple[int, ...]], list[Occurrence]] = {}
    for occ in group.occurrences:
        per_container.setdefault((occ.expr_index, occ.container), []).append(occ)
    for (ei, container), occs in sorted(per_container.items(), reverse=True):
        expr = out[ei]
        from .ir import subterm_at

        node = subterm_at(expr, container)
        if occs[0].length == 0:
            repl = t if occs[0].relation == "identical" else t_tr
            out[ei] = normalize(replace_at(expr, container, repl))
            continue
        kids = list(node.children)
        for occ in sorted(occs, key=lambda o: -o.start):
            repl = t if occ.relation == "identical" else t_tr
            kids[occ.start : occ.start + occ.length] = [repl]
        new_node = Times(kids) if len(kids) > 1 else kids[0]
        out[ei] = normalize(replace_at(expr, container, new_node))
    return out
