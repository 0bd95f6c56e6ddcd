import pytest
from fractions import Fraction

from hypothesis import given, settings, strategies as st

from meqc.ir import (
    Dim,
    DimensionMismatch,
    EquationSet,
    Equation,
    Inverse,
    Kind,
    Minus,
    NonSquareInverse,
    Plus,
    Prop,
    PropertyConflict,
    ScalarLiteral,
    Times,
    Transpose,
    close_properties,
    identity_operand,
    infer_shape,
    make_operand,
    normalize,
    operand,
    structural_key,
)
from meqc.verify import RandomModel, eval_expression, rel_err

from conftest import mat, vec, scal


A = mat("A", "n", "n")
B = mat("B", "n", "n")
C = mat("C", "n", "n")
x = vec("x", "n")
y = vec("y", "n")


def test_transpose_involution():
    assert normalize(Transpose(Transpose(operand(A)))) == operand(A)


def test_inverse_involution():
    assert normalize(Inverse(Inverse(operand(A)))) == operand(A)


def test_times_flattening():
    e = normalize(Times([Times([operand(A), operand(B)]), operand(C)]))
    assert e.key == Times([operand(A), operand(B), operand(C)]).key


def test_minus_pushed_out_of_product():
    got = normalize(Times([operand(A), Minus(operand(x))]))
    want = Minus(Times([operand(A), operand(x)]))
    assert got.key == normalize(want).key


def test_minus_push_value_preserving():
    # checked numerically against the verify-module oracle
    e1 = Times([operand(A), Minus(operand(B))])
    e2 = normalize(e1)
    model = RandomModel(11)
    env = model.environment({"A": A, "B": B}, {"n": 4})
    assert rel_err(eval_expression(e2, env, {"n": 4}), eval_expression(e1, env, {"n": 4})) <= 1e-12


def test_normalize_idempotent():
    e = Times([Transpose(Times([operand(A), operand(B)])), Minus(operand(x))])
    once = normalize(e)
    assert normalize(once) == once


def test_plus_key_order_insensitive():
    assert structural_key(normalize(Plus([operand(A), operand(B)]))) == structural_key(
        normalize(Plus([operand(B), operand(A)]))
    )


def test_times_key_order_sensitive():
    k1 = structural_key(normalize(Times([operand(A), operand(B)])))
    k2 = structural_key(normalize(Times([operand(B), operand(A)])))
    assert k1 != k2


def test_key_associativity():
    k1 = structural_key(normalize(Times([Times([operand(A), operand(B)]), operand(C)])))
    k2 = structural_key(normalize(Times([operand(A), Times([operand(B), operand(C)])])))
    assert k1 == k2


def test_infer_shape_inner_product():
    e = normalize(Times([Transpose(operand(x)), operand(y)]))
    rows, cols, kind = infer_shape(e)
    assert (rows, cols, kind) == (Dim(1), Dim(1), Kind.SCALAR)


def test_infer_shape_gwas_core():
    X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    M = mat("M", "n", "n", Prop.SPD)
    e = normalize(Times([Transpose(operand(X)), Inverse(operand(M)), operand(X)]))
    rows, cols, kind = infer_shape(e)
    assert (str(rows), str(cols), kind) == ("p", "p", Kind.MATRIX)


def test_infer_shape_outer_product():
    z = vec("z", "n")
    e = normalize(Times([operand(z), Transpose(operand(x))]))
    rows, cols, kind = infer_shape(e)
    assert (str(rows), str(cols), kind) == ("n", "n", Kind.MATRIX)


def test_dimension_mismatch_raises():
    X = mat("X", "n", "p")
    with pytest.raises(DimensionMismatch):
        Times([operand(X), operand(X)])


def test_nonsquare_inverse_raises():
    X = mat("X", "n", "p")
    with pytest.raises(NonSquareInverse):
        normalize(Inverse(operand(X)))


def test_scalar_literal_inverse_folds():
    assert normalize(Inverse(ScalarLiteral(Fraction(2)))) == ScalarLiteral(Fraction(1, 2))


def test_identity_dimension_resolved_in_product():
    e = normalize(Times([operand(identity_operand()), operand(A)]))
    eye = e.children[0]
    assert str(eye.rows) == "n"


def test_identity_dimension_resolved_in_sum():
    h = scal("h")
    e = normalize(
        Plus([Times([operand(h), operand(A)]), Times([operand(h), operand(identity_operand())])])
    )
    keys = {c.key for c in e.children}
    assert any("I[n]" in k for k in keys)


# --- properties --------------------------------------------------------------


def test_spd_implies_symmetric_square_fullrank():
    assert {Prop.SYMMETRIC, Prop.SQUARE, Prop.FULL_RANK} <= close_properties({Prop.SPD})


def test_identity_implications():
    closed = close_properties({Prop.IDENTITY})
    assert {Prop.DIAGONAL, Prop.ORTHOGONAL, Prop.SPD, Prop.SQUARE} <= closed


def test_panel_square_exclusive():
    with pytest.raises(PropertyConflict):
        close_properties({Prop.COLUMN_PANEL, Prop.SQUARE})


SAFE_PROPS = [
    Prop.SYMMETRIC,
    Prop.SPD,
    Prop.DIAGONAL,
    Prop.LOWER_TRIANGULAR,
    Prop.UPPER_TRIANGULAR,
    Prop.ORTHOGONAL,
    Prop.ORTHOGONAL_COLUMNS,
    Prop.FULL_RANK,
    Prop.SQUARE,
]


@given(st.sets(st.sampled_from(SAFE_PROPS)))
def test_closure_is_fixed_point(props):
    try:
        once = close_properties(props)
    except PropertyConflict:
        return
    assert close_properties(once) == once


# --- equation sets -----------------------------------------------------------


def test_equation_set_requires_declared_operands():
    out = vec("x", "n", Prop.OUTPUT)
    eq = Equation(out, normalize(Times([operand(A), operand(y)])))
    with pytest.raises(Exception):
        EquationSet([eq], {"x": out, "A": A})  # y missing


def test_auxiliary_inlining():
    h = scal("h")
    M = mat("M", "n", "n", Prop.SPD)
    out = vec("x", "n", Prop.OUTPUT)
    aux = Equation(M, normalize(Times([operand(h), operand(A)])))
    main = Equation(out, normalize(Times([Inverse(operand(M)), operand(y)])))
    eqs = EquationSet([main, aux], {"x": out, "M": M, "h": h, "A": A, "y": y})
    (lhs, rhs), = eqs.inlined_outputs()
    assert "M" not in {n for n in __import__("meqc.ir", fromlist=["operand_names"]).operand_names(rhs)}


# --- randomized invariants ---------------------------------------------------


def _expr_strategy():
    leaves = st.sampled_from(
        [operand(A), operand(B), operand(x), operand(y), ScalarLiteral(2)]
    )

    def extend(children):
        return st.one_of(
            children.map(Minus),
            children.map(Transpose),
            st.tuples(children, children).map(_combine),
        )

    return st.recursive(leaves, extend, max_leaves=8)


def _combine(pair):
    a, b = pair
    try:
        return Times([a, b])
    except DimensionMismatch:
        try:
            return Plus([a, b])
        except DimensionMismatch:
            return a


@settings(max_examples=60, deadline=None)
@given(_expr_strategy())
def test_normalize_idempotent_and_value_preserving(e):
    n1 = normalize(e)
    assert normalize(n1) == n1
    model = RandomModel(5)
    env = model.environment({"A": A, "B": B, "x": x, "y": y}, {"n": 4})
    before = eval_expression(e, env, {"n": 4})
    after = eval_expression(n1, env, {"n": 4})
    assert rel_err(after, before) <= 1e-12


def _deep_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if hasattr(a, "info"):
        return a.info == b.info
    if isinstance(a, ScalarLiteral):
        return a.value == b.value
    if len(a.children) != len(b.children):
        return False
    ac, bc = a.children, b.children
    if isinstance(a, Plus):
        # addition commutes: the key sorts the children, so compare as
        # (key-sorted) multisets
        ac = sorted(ac, key=lambda e: e.key)
        bc = sorted(bc, key=lambda e: e.key)
    return all(_deep_equal(c, d) for c, d in zip(ac, bc))


def test_key_collision_free_on_corpus():
    """On 10^4+ distinct normalized expressions, equal keys always mean
    structurally identical trees (checked by full comparison on every
    key hit)."""
    import random

    from meqc.rewrite import builtin_rules

    rng = random.Random(20240817)
    Q = mat("Q", "n", "n", Prop.ORTHOGONAL)
    L = mat("L", "n", "n", Prop.LOWER_TRIANGULAR, Prop.FULL_RANK)
    pool = [operand(o) for o in (A, B, C, Q, L, x, y)] + [ScalarLiteral(3)]
    rules = builtin_rules()
    corpus: dict[str, object] = {}
    attempts = 0
    while len(corpus) < 10_000 and attempts < 200_000:
        attempts += 1
        e = rng.choice(pool)
        for _ in range(rng.randint(1, 6)):
            op = rng.randrange(5)
            other = rng.choice(pool)
            try:
                if op == 0:
                    e = Times([e, other])
                elif op == 1:
                    e = Plus([e, other])
                elif op == 2:
                    e = Transpose(e)
                elif op == 3:
                    e = Minus(e)
                else:
                    e = Inverse(e)
            except (DimensionMismatch, NonSquareInverse):
                continue
        try:
            e = normalize(e)
        except (DimensionMismatch, NonSquareInverse):
            continue
        # a few random rewrites deepen the corpus
        for rule in rng.sample(rules, 3):
            for cand in rule.apply_at(e)[:1]:
                try:
                    e2 = normalize(cand)
                except Exception:
                    continue
                if e2.key in corpus:
                    assert _deep_equal(e2, corpus[e2.key])
                else:
                    corpus[e2.key] = e2
        if e.key in corpus:
            assert _deep_equal(e, corpus[e.key])
        else:
            corpus[e.key] = e
    assert len(corpus) >= 10_000
