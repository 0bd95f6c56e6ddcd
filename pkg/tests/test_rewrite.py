import pytest

from meqc.ir import (
    Dim,
    Inverse,
    Minus,
    Plus,
    Prop,
    ScalarLiteral,
    Times,
    Transpose,
    identity_operand,
    normalize,
    operand,
    push_transposes,
    structural_key,
    substitute,
)
from meqc.rewrite import (
    builtin_rules,
    close_variants,
    expose_segment,
    find_common_segments,
    match_pattern,
    offending_inverses,
    simplify,
)
from meqc.verify import RandomModel, eval_expression, rel_err

from conftest import mat, scal, vec


def rule(name):
    for r in builtin_rules():
        if r.name == name:
            return r
    raise KeyError(name)


def test_builtin_rules_present():
    names = {r.name for r in builtin_rules()}
    assert {
        "transpose_of_product",
        "product_of_transposes",
        "inverse_of_product",
        "product_of_inverses",
        "orthogonal_cancel",
        "inverse_cancel",
        "drop_identity",
        "inverse_of_orthogonal",
        "transpose_of_symmetric",
        "distribute_product",
        "factor_common",
        "push_negation",
    } <= names


def test_transpose_distribution():
    A = mat("A", "m", "k")
    B = mat("B", "k", "n")
    e = Transpose(Times([operand(A), operand(B)]))
    out = rule("transpose_of_product").apply_at(e)
    assert len(out) == 1
    want = Times([Transpose(operand(B)), Transpose(operand(A))])
    assert normalize(out[0]) == normalize(want)


def test_orthogonal_cancel_box4():
    Q = mat("Q", "n", "p", Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL)
    e = Times([Transpose(operand(Q)), operand(Q)])
    out = [normalize(c) for c in rule("orthogonal_cancel").apply_at(e)]
    assert any(c.key == "I[p]" for c in out)


def test_inverse_distribution_guarded_square():
    A = mat("A", "n", "n", Prop.FULL_RANK)
    B = mat("B", "n", "n", Prop.FULL_RANK)
    e = Inverse(Times([operand(A), operand(B)]))
    out = [normalize(c) for c in rule("inverse_of_product").apply_at(e)]
    want = normalize(Times([Inverse(operand(B)), Inverse(operand(A))]))
    assert want in out
    # not applied when a factor is rectangular
    X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    e2 = Times([Transpose(operand(X)), operand(X)])
    assert rule("inverse_of_product").apply_at(Inverse(e2)) == []


def test_rule_soundness_all_builtins():
    """Every builtin rule is value preserving on guarded random instances."""
    model = RandomModel(23)
    dims = {"m": 5, "k": 4, "n": 6, "p": 3}
    for r in builtin_rules():
        assert r.templates, f"rule {r.name} has no soundness template"
        for expr, ops in r.templates:
            env = {o.name: model.value_for(o, dims, salt=7) for o in ops}
            base = eval_expression(normalize(expr), env, dims)
            outs = [normalize(c) for c in r.apply_at(expr)]
            assert outs, f"template of {r.name} does not fire"
            for c in outs:
                assert rel_err(eval_expression(c, env, dims), base) <= 1e-10


def _box5_state():
    Q = mat("Q", "n", "p", Prop.ORTHOGONAL_COLUMNS, Prop.COLUMN_PANEL)
    R = mat("R", "p", "p", Prop.UPPER_TRIANGULAR, Prop.FULL_RANK)
    L = mat("L", "n", "n", Prop.LOWER_TRIANGULAR, Prop.FULL_RANK)
    y = vec("y", "n")
    q, r, l, yv = operand(Q), operand(R), operand(L), operand(y)
    qr = Times([q, r])
    seed = normalize(
        Times([Inverse(Times([Transpose(qr), qr])), Transpose(qr), Inverse(l), yv])
    )
    target = normalize(Times([Inverse(r), Transpose(q), Inverse(l), yv]))
    return seed, target, {"Q": Q, "R": R, "L": L, "y": y}


def _box6_state():
    Z = mat("Z", "n", "n", Prop.ORTHOGONAL)
    W = mat("W", "n", "n", Prop.DIAGONAL)
    z, w = operand(Z), operand(W)
    seed = normalize(
        Inverse(Plus([Times([z, w, Transpose(z)]), Times([z, Transpose(z)])]))
    )
    target = normalize(
        Times([z, Inverse(Plus([w, operand(identity_operand(Dim("n")))])), Transpose(z)])
    )
    return seed, target, {"Z": Z, "W": W}


def test_close_variants_contains_box5_end_state():
    seed, target, _ = _box5_state()
    vs = close_variants(seed, max_variants=512, max_depth=8)
    assert target.key in vs.variants
    assert not vs.truncated


def test_close_variants_contains_box6_end_state():
    seed, target, _ = _box6_state()
    vs = close_variants(seed, max_variants=512, max_depth=8)
    assert target.key in vs.variants


def test_close_variants_fixed_point_for_atom():
    A = mat("A", "n", "n")
    vs = close_variants(operand(A))
    assert set(vs.variants) == {operand(A).key}


def test_close_variants_truncation_flag():
    seed, _, _ = _box5_state()
    vs = close_variants(seed, max_variants=5, max_depth=8)
    assert vs.truncated
    assert len(vs.variants) <= 5


def test_close_variants_value_preserving():
    seed, _, ops = _box5_state()
    model = RandomModel(3)
    dims = {"n": 7, "p": 3}
    env = {name: model.value_for(info, dims, salt=1) for name, info in ops.items()}
    base = eval_expression(seed, env, dims)
    vs = close_variants(seed, max_variants=256, max_depth=6)
    for e in vs.variants.values():
        assert rel_err(eval_expression(e, env, dims), base) <= 1e-10


def test_close_variants_deterministic():
    seed, _, _ = _box5_state()
    a = close_variants(seed, max_variants=256, max_depth=6)
    b = close_variants(seed, max_variants=256, max_depth=6)
    assert list(a.variants) == list(b.variants)


def test_simplify_box5():
    seed, target, _ = _box5_state()
    assert simplify(seed).key == target.key


def test_simplify_box6():
    seed, target, _ = _box6_state()
    assert simplify(seed).key == target.key


def test_simplify_drops_identity_factor():
    A = mat("A", "n", "n")
    e = normalize(Times([operand(identity_operand(Dim("n"))), operand(A)]))
    assert simplify(e) == operand(A)


def test_simplify_never_increases_offending_inverses():
    seed, _, _ = _box6_state()
    assert offending_inverses(simplify(seed)) <= offending_inverses(seed)


def test_provenance_chain_names_rules():
    seed, target, _ = _box6_state()
    vs = close_variants(seed)
    chain = vs.chain(vs.variants[simplify(seed).key])
    assert chain, "expected a nonempty rule chain"
    assert all(isinstance(r, str) for r in chain)


# --- common segments ---------------------------------------------------------


def test_segments_identical_dot():
    x = vec("x", "n")
    y = vec("y", "n")
    e = normalize(Times([Transpose(operand(x)), operand(y), Transpose(operand(x)), operand(y)]))
    groups = find_common_segments(e)
    assert groups
    top = groups[0]
    assert len(top.occurrences) == 2
    assert all(o.relation == "identical" for o in top.occurrences)
    assert top.representative.key == normalize(Times([Transpose(operand(x)), operand(y)])).key


def test_segments_transpose_detection():
    X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    L = mat("L", "n", "n", Prop.LOWER_TRIANGULAR, Prop.FULL_RANK)
    e = normalize(
        Times(
            [
                Transpose(operand(X)),
                Transpose(Inverse(operand(L))),
                Inverse(operand(L)),
                operand(X),
            ]
        )
    )
    groups = find_common_segments(e)
    assert groups
    top = groups[0]
    rels = sorted(o.relation for o in top.occurrences)
    assert "transpose" in rels and "identical" in rels
    assert top.representative.key == normalize(Times([Inverse(operand(L)), operand(X)])).key


def test_segments_transpose_pair_in_sum():
    a = scal("alpha")
    be = scal("beta")
    x = vec("x", "n")
    y = vec("y", "n")
    e = normalize(
        Plus(
            [
                Times([operand(a), operand(x), Transpose(operand(x))]),
                Times([operand(be), operand(y), Transpose(operand(x))]),
                Times([operand(be), operand(x), Transpose(operand(y))]),
            ]
        )
    )
    groups = find_common_segments(e)
    hits = [
        g
        for g in groups
        if g.representative.key
        in {
            normalize(Times([operand(y), Transpose(operand(x))])).key,
            normalize(Times([operand(x), Transpose(operand(y))])).key,
        }
    ]
    assert hits
    assert {o.relation for o in hits[0].occurrences} == {"identical", "transpose"}


def test_segment_reinsertion_reproduces_key():
    X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    L = mat("L", "n", "n", Prop.LOWER_TRIANGULAR, Prop.FULL_RANK)
    e = normalize(
        Times(
            [
                Transpose(operand(X)),
                Transpose(Inverse(operand(L))),
                Inverse(operand(L)),
                operand(X),
            ]
        )
    )
    groups = find_common_segments(e)
    top = groups[0]
    W = mat("Wseg", "n", "p")
    (replaced,) = expose_segment([e], top, W)
    reexpanded = push_transposes(
        normalize(substitute(replaced, {"Wseg": top.representative}))
    )
    assert structural_key(reexpanded) == structural_key(push_transposes(e))


def test_segments_ignore_pure_scalar_windows():
    h = scal("h")
    A = mat("A", "n", "n")
    term = Plus([ScalarLiteral(1), Minus(operand(h))])
    e = normalize(
        Plus([Times([term, operand(A)]), Times([term, Transpose(operand(A))])])
    )
    for g in find_common_segments(e):
        assert g.representative.kind.value != "scalar"


def test_pattern_matching_windows():
    from meqc.ir import PatVar

    A = mat("A", "n", "n")
    B = mat("B", "n", "n")
    C = mat("C", "n", "n")
    pattern = Times([PatVar("u"), PatVar("v")])
    target = Times([operand(A), operand(B), operand(C)])
    binding = match_pattern(pattern, Times([operand(A), operand(B)]))
    assert binding and binding["u"].key == operand(A).key
