import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meqc.ir import (
    Dim,
    Inverse,
    Kind,
    Namer,
    Plus,
    Prop,
    ScalarLiteral,
    Times,
    Transpose,
    identity_operand,
    make_operand,
    normalize,
    operand,
)
from meqc.knowledge import (
    CHOLESKY,
    EIG,
    LDL,
    LQ,
    LU,
    QR,
    SVD,
    GuardViolated,
    NotAMatrix,
    applicable_factorizations,
    factor,
    infer_properties,
)
from meqc.verify import RandomModel, eval_expression, rel_err

from conftest import mat, scal, vec


def names(descriptors):
    return [d.name for d in descriptors]


def test_table_spd_row():
    assert names(applicable_factorizations(mat("A", "n", "n", Prop.SPD))) == [
        "cholesky",
        "qr",
        "eig",
    ]


def test_table_symmetric_row():
    assert names(applicable_factorizations(mat("A", "n", "n", Prop.SYMMETRIC))) == [
        "ldl",
        "qr",
        "eig",
    ]


def test_table_column_panel_rows():
    fr = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    rd = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.RANK_DEFICIENT)
    assert names(applicable_factorizations(fr)) == ["qr"]
    assert names(applicable_factorizations(rd)) == ["svd"]


def test_table_row_panel_rows():
    fr = mat("X", "p", "n", Prop.ROW_PANEL, Prop.FULL_RANK)
    rd = mat("X", "p", "n", Prop.ROW_PANEL, Prop.RANK_DEFICIENT)
    assert names(applicable_factorizations(fr)) == ["lq"]
    assert names(applicable_factorizations(rd)) == ["svd"]


def test_table_general_row():
    assert names(applicable_factorizations(mat("A", "n", "n"))) == ["lu", "svd"]


def test_spd_shadows_general():
    # LU and LDL are never offered for an SPD matrix
    got = names(applicable_factorizations(mat("A", "n", "n", Prop.SPD)))
    assert "lu" not in got and "ldl" not in got


def test_factored_forms_need_no_factorization():
    assert applicable_factorizations(mat("L", "n", "n", Prop.LOWER_TRIANGULAR)) == []
    assert applicable_factorizations(mat("D", "n", "n", Prop.DIAGONAL)) == []
    assert applicable_factorizations(mat("Q", "n", "n", Prop.ORTHOGONAL)) == []


def test_not_a_matrix():
    with pytest.raises(NotAMatrix):
        applicable_factorizations(vec("x", "n"))


def test_guard_violated():
    with pytest.raises(GuardViolated):
        factor(mat("A", "n", "n"), CHOLESKY, Namer())


def test_cholesky_factor_properties():
    factors, recomposition = factor(mat("M", "n", "n", Prop.SPD), CHOLESKY, Namer())
    (L,) = factors
    assert {Prop.LOWER_TRIANGULAR, Prop.SQUARE, Prop.FULL_RANK} <= L.properties
    assert recomposition.key == normalize(Times([operand(L), Transpose(operand(L))])).key


def test_eig_factor_properties():
    factors, recomposition = factor(mat("Phi", "n", "n", Prop.SYMMETRIC), EIG, Namer())
    Z, W = factors
    assert {Prop.ORTHOGONAL, Prop.SQUARE} <= Z.properties
    assert {Prop.DIAGONAL, Prop.SQUARE} <= W.properties


def test_qr_of_column_panel():
    X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    factors, _ = factor(X, QR, Namer())
    Q, R = factors
    assert Prop.ORTHOGONAL_COLUMNS in Q.properties
    assert Prop.ORTHOGONAL not in Q.properties
    assert (str(Q.rows), str(Q.cols)) == ("n", "p")
    assert {Prop.UPPER_TRIANGULAR, Prop.SQUARE, Prop.FULL_RANK} <= R.properties
    assert (str(R.rows), str(R.cols)) == ("p", "p")


def test_qr_of_square_gives_full_orthogonal():
    factors, _ = factor(mat("A", "n", "n", Prop.SPD), QR, Namer())
    Q, R = factors
    assert Prop.ORTHOGONAL in Q.properties


MODEL = RandomModel(31)
DIMS = {"n": 8, "p": 4}


@pytest.mark.parametrize(
    "descriptor,info",
    [
        (CHOLESKY, mat("M", "n", "n", Prop.SPD)),
        (LDL, mat("M", "n", "n", Prop.SPD)),  # diagonal-pivot LDL: SPD-adjacent inputs
        (QR, mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)),
        (QR, mat("M", "n", "n", Prop.SPD)),
        (LQ, mat("X", "p", "n", Prop.ROW_PANEL, Prop.FULL_RANK)),
        (LU, mat("A", "n", "n", Prop.SPD)),
        (EIG, mat("A", "n", "n", Prop.SYMMETRIC)),
        (SVD, mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)),
    ],
)
def test_factorization_recomposition_numeric(descriptor, info):
    """recompose(factors) equals the input matrix on 50 guarded instances."""
    from meqc.verify import run_algorithm
    from meqc.search import FactorStatement
    import sympy as sp

    factors, recomposition = factor(info, descriptor, Namer(taken={info.name}))
    stmt = FactorStatement(descriptor.name, factors, info, recomposition, sp.Integer(0))
    worst = 0.0
    for trial in range(50):
        value = MODEL.value_for(info, DIMS, salt=trial)
        alg = type("Alg", (), {"statements": [stmt]})()
        env = run_algorithm(alg, {info.name: value}, DIMS)
        rebuilt = eval_expression(recomposition, env, DIMS)
        worst = max(worst, rel_err(rebuilt, value))
    assert worst <= 1e-9


# --- inference ---------------------------------------------------------------


L = mat("L", "n", "n", Prop.LOWER_TRIANGULAR, Prop.FULL_RANK, Prop.SQUARE)
X = mat("X", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
Q = mat("Q", "n", "n", Prop.ORTHOGONAL)
D = mat("D", "n", "n", Prop.DIAGONAL)
S = mat("S", "n", "n", Prop.SYMMETRIC)
P = mat("P", "n", "n", Prop.SPD)
h = scal("h")


def test_box9_triangular_solve_panel():
    w = normalize(Times([Inverse(operand(L)), operand(X)]))
    props = infer_properties(w)
    assert {Prop.COLUMN_PANEL, Prop.FULL_RANK} <= props


def test_box9_gram_matrix_spd():
    W = mat("W", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    s = normalize(Times([Transpose(operand(W)), operand(W)]))
    props = infer_properties(s)
    assert {Prop.SPD, Prop.SQUARE, Prop.SYMMETRIC} <= props


def test_gram_symmetric_without_rank():
    A = mat("A", "n", "p", Prop.COLUMN_PANEL)
    s = normalize(Times([Transpose(operand(A)), operand(A)]))
    props = infer_properties(s)
    assert Prop.SYMMETRIC in props
    assert Prop.SPD not in props


def test_diagonal_update_is_diagonal():
    from meqc.ir import Minus

    lam = operand(D)
    one_minus_h = Plus([ScalarLiteral(1), Minus(operand(h))])
    e = normalize(
        Plus(
            [
                Times([operand(h), lam]),
                Times([one_minus_h, operand(identity_operand(Dim("n")))]),
            ]
        )
    )
    props = infer_properties(e)
    assert {Prop.DIAGONAL, Prop.SQUARE} <= props


def test_scaled_spd_sum_downgrades_to_symmetric():
    e = normalize(
        Plus([Times([operand(h), operand(P)]), Times([operand(h), operand(P)])])
    )
    props = infer_properties(e)
    assert Prop.SYMMETRIC in props
    assert Prop.SPD not in props


def test_literal_scaled_spd_sum_stays_spd():
    e = normalize(Plus([Times([ScalarLiteral(2), operand(P)]), operand(P)]))
    assert Prop.SPD in infer_properties(e)


def test_product_of_orthogonals_orthogonal():
    Q2 = mat("Q2", "n", "n", Prop.ORTHOGONAL)
    e = normalize(Times([operand(Q), operand(Q2)]))
    assert Prop.ORTHOGONAL in infer_properties(e)


def test_transpose_flips_triangularity():
    e = normalize(Transpose(operand(L)))
    props = infer_properties(e)
    assert Prop.UPPER_TRIANGULAR in props
    assert Prop.LOWER_TRIANGULAR not in props


def test_diagonal_closed_under_ops():
    D2 = mat("D2", "n", "n", Prop.DIAGONAL)
    assert Prop.DIAGONAL in infer_properties(normalize(Plus([operand(D), operand(D2)])))
    assert Prop.DIAGONAL in infer_properties(normalize(Times([operand(h), operand(D)])))
    assert Prop.DIAGONAL in infer_properties(normalize(Inverse(operand(D))))


def test_sandwich_symmetric():
    E = mat("E", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    e = normalize(Times([Transpose(operand(E)), operand(S), operand(E)]))
    assert Prop.SYMMETRIC in infer_properties(e)


def test_inference_sees_through_definitions():
    # A := V*K' with V := K*inv(D) is a symmetric sandwich once expanded
    Kp = mat("K", "p", "n", Prop.ROW_PANEL, Prop.FULL_RANK)
    V = mat("V", "p", "n")
    A = normalize(Times([operand(V), Transpose(operand(Kp))]))
    defs = {"V": normalize(Times([operand(Kp), Inverse(operand(D))]))}
    assert Prop.SYMMETRIC in infer_properties(A, defs)
    assert Prop.SYMMETRIC not in infer_properties(A)


def test_inference_monotone():
    A_plain = mat("A", "n", "p", Prop.COLUMN_PANEL)
    A_more = mat("A", "n", "p", Prop.COLUMN_PANEL, Prop.FULL_RANK)
    weak = infer_properties(normalize(Times([Transpose(operand(A_plain)), operand(A_plain)])))
    strong = infer_properties(normalize(Times([Transpose(operand(A_more)), operand(A_more)])))
    assert weak <= strong


def test_applicable_factorizations_pure():
    a = mat("A", "n", "n", Prop.SPD)
    assert names(applicable_factorizations(a)) == names(applicable_factorizations(a))


# numeric certification of the inference battery (acceptance criterion 5
# exercises the same battery at 50 trials; keep a smaller smoke here)
def test_inferred_props_certify_numerically():
    from test_acceptance import INFERENCE_BATTERY, certify_inference

    for name, expr, ops, must in INFERENCE_BATTERY:
        certify_inference(expr, ops, must, trials=8)
