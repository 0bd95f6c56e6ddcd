"""Shared fixtures: bundled inputs, expression builders, golden algorithms."""

from __future__ import annotations

from pathlib import Path

import pytest
import sympy as sp

from meqc.frontend import parse_file
from meqc.ir import (
    Dim,
    Inverse,
    Kind,
    Minus,
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
from meqc.search import (
    Algorithm,
    FactorStatement,
    KernelStatement,
    SearchConfig,
    canonical_statement_key,
    generate,
)

INPUTS = Path(__file__).resolve().parent.parent / "inputs"

_GENERATE_CACHE: dict = {}


def generate_cached(name: str, **cfg_kwargs):
    """Parse+generate a bundled input once per session."""
    key = (name, tuple(sorted(cfg_kwargs.items())))
    if key not in _GENERATE_CACHE:
        parsed = parse_file(INPUTS / name)
        cfg = SearchConfig(**cfg_kwargs) if cfg_kwargs else SearchConfig(**parsed.config)
        _GENERATE_CACHE[key] = (parsed, generate(parsed.equations, cfg))
    return _GENERATE_CACHE[key]


# --- tiny builders -----------------------------------------------------------


def mat(name, rows, cols, *props):
    return make_operand(name, Kind.MATRIX, Dim(rows), Dim(cols), set(props))


def vec(name, rows, *props):
    return make_operand(name, Kind.VECTOR, Dim(rows), properties=set(props))


def scal(name, *props):
    return make_operand(name, Kind.SCALAR, properties=set(props))


def K(target, rhs):
    return KernelStatement(target, normalize(rhs), "?", sp.Integer(0))


def F(fact, factors, source, recomposition):
    return FactorStatement(fact, tuple(factors), source, normalize(recomposition), sp.Integer(0))


def algo_key(statements, outputs):
    return canonical_statement_key(Algorithm(list(statements), (), tuple(outputs)))


def keys_of(result):
    return {alg.canonical_key() for alg in result.algorithms}


# --- expected golden algorithms ---------------------------------------------


def expected_qtly(ops):
    q, l, y = operand(ops["Q"]), operand(ops["L"]), operand(ops["y"])
    t = vec("t", "n")
    x = vec("x", "n", Prop.OUTPUT)
    return algo_key(
        [K(t, Times([l, y])), K(x, Times([Transpose(q), operand(t)]))], ["x"]
    )


def expected_cse_dot(ops):
    x, y = operand(ops["x"]), operand(ops["y"])
    t = scal("t")
    alpha = scal("alpha", Prop.OUTPUT)
    return algo_key(
        [
            K(t, Times([Transpose(x), y])),
            K(alpha, Times([operand(t), operand(t)])),
        ],
        ["alpha"],
    )


def expected_inner_priority(ops):
    x, y, z = operand(ops["x"]), operand(ops["y"]), operand(ops["z"])
    t1, t2 = scal("t1"), scal("t2")
    alpha = scal("alpha", Prop.OUTPUT)
    return algo_key(
        [
            K(t1, Times([Transpose(x), z])),
            K(t2, Times([Transpose(x), y])),
            K(alpha, Times([operand(t1), operand(t2)])),
        ],
        ["alpha"],
    )


def expected_two_trsv(ops):
    l, v, u = operand(ops["L"]), operand(ops["v"]), operand(ops["u"])
    t1, t2 = vec("t1", "n"), vec("t2", "n")
    beta = scal("beta", Prop.OUTPUT)
    return algo_key(
        [
            K(t1, Times([Transpose(Inverse(l)), v])),
            K(t2, Times([Transpose(Inverse(l)), u])),
            K(beta, Times([Transpose(operand(t1)), operand(t2)])),
        ],
        ["beta"],
    )


def expected_ols_qr(ops):
    a, y = operand(ops["A"]), operand(ops["y"])
    q = mat("Q", "m", "n")
    r = mat("R", "n", "n")
    t = vec("t", "n")
    b = vec("b", "n", Prop.OUTPUT)
    return algo_key(
        [
            F("qr", [q, r], ops["A"], Times([operand(q), operand(r)])),
            K(t, Times([Transpose(operand(q)), y])),
            K(b, Times([Inverse(operand(r)), operand(t)])),
        ],
        ["b"],
    )


def _gwas_m_def(ops):
    h, phi = operand(ops["h"]), operand(ops["Phi"])
    eye = operand(identity_operand(Dim("n")))
    return Plus([Times([h, phi]), Times([Plus([ScalarLiteral(1), Minus(h)]), eye])])


def expected_chol_gwas(ops):
    x, y = operand(ops["X"]), operand(ops["y"])
    L = mat("L", "n", "n")
    W = mat("W", "n", "p")
    S = mat("S", "p", "p")
    G = mat("G", "p", "p")
    y2, b1, b2 = vec("y2", "n"), vec("b1", "p"), vec("b2", "p")
    b = vec("b", "p", Prop.OUTPUT)
    lo, wo, go = operand(L), operand(W), operand(G)
    return algo_key(
        [
            K(ops["M"], _gwas_m_def(ops)),
            F("cholesky", [L], ops["M"], Times([lo, Transpose(lo)])),
            K(W, Times([Inverse(lo), x])),
            K(S, Times([Transpose(wo), wo])),
            F("cholesky", [G], S, Times([go, Transpose(go)])),
            K(y2, Times([Inverse(lo), y])),
            K(b1, Times([Transpose(wo), operand(y2)])),
            K(b2, Times([Inverse(go), operand(b1)])),
            K(b, Times([Transpose(Inverse(go)), operand(b2)])),
        ],
        ["b"],
    )


def expected_qr_gwas(ops):
    x, y = operand(ops["X"]), operand(ops["y"])
    L = mat("L", "n", "n")
    W = mat("W", "n", "p")
    Q = mat("Q", "n", "p")
    R = mat("R", "p", "p")
    y2, b1 = vec("y2", "n"), vec("b1", "p")
    b = vec("b", "p", Prop.OUTPUT)
    lo, wo, qo, ro = operand(L), operand(W), operand(Q), operand(R)
    return algo_key(
        [
            K(ops["M"], _gwas_m_def(ops)),
            F("cholesky", [L], ops["M"], Times([lo, Transpose(lo)])),
            K(W, Times([Inverse(lo), x])),
            F("qr", [Q, R], W, Times([qo, ro])),
            K(y2, Times([Inverse(lo), y])),
            K(b1, Times([Transpose(qo), operand(y2)])),
            K(b, Times([Inverse(ro), operand(b1)])),
        ],
        ["b"],
    )


def expected_eig_gwas(ops):
    x, y, h = operand(ops["X"]), operand(ops["y"]), operand(ops["h"])
    Z = mat("Z", "n", "n")
    Lam = mat("Lam", "n", "n", Prop.DIAGONAL)
    D = mat("D", "n", "n", Prop.DIAGONAL)
    Kk = mat("K", "p", "n")
    V = mat("V", "p", "n")
    A = mat("A", "p", "p")
    Q = mat("Q", "p", "p")
    R = mat("R", "p", "p")
    y2, b1, b2 = vec("y2", "n"), vec("b1", "p"), vec("b2", "p")
    b = vec("b", "p", Prop.OUTPUT)
    eye = operand(identity_operand(Dim("n")))
    zo, lam, do, ko, vo, ao, qo, ro = (
        operand(Z), operand(Lam), operand(D), operand(Kk),
        operand(V), operand(A), operand(Q), operand(R),
    )
    return algo_key(
        [
            F("eig", [Z, Lam], ops["Phi"], Times([zo, lam, Transpose(zo)])),
            K(D, Plus([Times([h, lam]), Times([Plus([ScalarLiteral(1), Minus(h)]), eye])])),
            K(Kk, Times([Transpose(x), zo])),
            K(V, Times([ko, Inverse(do)])),
            K(A, Times([vo, Transpose(ko)])),
            F("qr", [Q, R], A, Times([qo, ro])),
            K(y2, Times([Transpose(zo), y])),
            K(b1, Times([vo, operand(y2)])),
            K(b2, Times([Transpose(qo), operand(b1)])),
            K(b, Times([Inverse(ro), operand(b2)])),
        ],
        ["b"],
    )


def expected_gspd_statements(ops):
    """Single-instance statements of the sensitivity solver (loop body plus
    the hoistable factorization)."""
    a, bb, y = operand(ops["A"]), operand(ops["b"]), operand(ops["y"])
    L = mat("L", "n", "n")
    w, x1 = vec("w", "n"), vec("x1", "n")
    x = vec("x", "n", Prop.OUTPUT)
    lo = operand(L)
    return [
        F("cholesky", [L], ops["C"], Times([lo, Transpose(lo)])),
        K(w, Plus([bb, Minus(Times([a, y]))])),
        K(x1, Times([Inverse(lo), operand(w)])),
        K(x, Times([Transpose(Inverse(lo)), operand(x1)])),
    ]


def expected_gspd(ops):
    return algo_key(expected_gspd_statements(ops), ["x"])


def nest_key(nest):
    """Region-structure key of a loop nest: canonical statements per region."""
    from meqc.search import canonical_statement_lines

    flat = list(nest.all_statements())
    alg = Algorithm(flat, (), tuple(nest.outputs))
    lines = canonical_statement_lines(alg)
    stmt_lines = dict(zip([id(s) for s in flat], lines))
    regions = []
    for region, stmts in nest.regions():
        regions.append(
            (tuple(sorted(region)), tuple(sorted(stmt_lines[id(s)] for s in stmts)))
        )
    return tuple(sorted(r for r in regions if r[1]))
