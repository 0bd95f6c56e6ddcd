"""Numeric oracle: reference dense kernels, expression interpreter, certifier.

Two execution paths are kept deliberately separate so they can check each
other: :func:`eval_expression` interprets the input equations literally
(inverses via an LU solve against the identity), while
:func:`run_algorithm` executes generated statement lists with reference
kernels (triangular solves, right-looking Cholesky, Householder QR, cyclic
Jacobi eigendecomposition, ...).  :func:`certify_equivalence` runs both on
seeded random instantiations and reports the maximum relative error.

Everything is double precision; values are floats, (n,1) column vectors or
(r,c) row-major matrices, and NaN/Inf are rejected on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ir import (
    CompileError,
    Dim,
    EquationSet,
    Expression,
    IDENTITY_NAME,
    Inverse,
    Kind,
    Minus,
    Operand,
    OperandInfo,
    Plus,
    Prop,
    ScalarLiteral,
    Times,
    Transpose,
    positions,
)


class VerifyError(CompileError):
    pass


class SingularMatrix(VerifyError):
    pass


class JacobiNoConvergence(VerifyError):
    pass


class UndefinedOperand(VerifyError):
    pass


DenseValue = "float | np.ndarray"  # scalars are floats, arrays are 2-D


def check_finite(value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise VerifyError("non-finite value")
    return value


# ---------------------------------------------------------------------------
# reference kernels


def forward_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L X = B for lower-triangular L by forward substitution."""
    n = L.shape[0]
    B = np.atleast_2d(np.asarray(B, dtype=float))
    X = np.zeros_like(B)
    for j in range(B.shape[1]):
        for i in range(n):
            piv = L[i, i]
            if abs(piv) < 1e-14:
                raise SingularMatrix("zero pivot in triangular solve")
            X[i, j] = (B[i, j] - L[i, :i] @ X[:i, j]) / piv
    return X


def backward_solve(U: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve U X = B for upper-triangular U by backward substitution."""
    n = U.shape[0]
    B = np.atleast_2d(np.asarray(B, dtype=float))
    X = np.zeros_like(B)
    for j in range(B.shape[1]):
        for i in range(n - 1, -1, -1):
            piv = U[i, i]
            if abs(piv) < 1e-14:
                raise SingularMatrix("zero pivot in triangular solve")
            X[i, j] = (B[i, j] - U[i, i + 1 :] @ X[i + 1 :, j]) / piv
    return X


def tri_solve(T: np.ndarray, B: np.ndarray) -> np.ndarray:
    if np.allclose(T, np.tril(T)):
        return forward_solve(T, B)
    return backward_solve(T, B)


def diag_solve(D: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = np.diag(D)
    if np.any(np.abs(d) < 1e-14):
        raise SingularMatrix("singular diagonal")
    return B / d[:, None]


def cholesky_rl(A: np.ndarray) -> np.ndarray:
    """Right-looking Cholesky; returns lower-triangular L with A = L L'."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.zeros((n, n))
    for k in range(n):
        d = A[k, k]
        if d <= 1e-14:
            raise SingularMatrix("matrix not positive definite")
        L[k, k] = math.sqrt(d)
        L[k + 1 :, k] = A[k + 1 :, k] / L[k, k]
        A[k + 1 :, k + 1 :] -= np.outer(L[k + 1 :, k], L[k + 1 :, k])
    return L


def householder_qr(A: np.ndarray, thin: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Householder QR; thin Q (m,n) for tall A, square Q otherwise."""
    A = np.array(A, dtype=float)
    m, n = A.shape
    Q = np.eye(m)
    R = A
    for k in range(min(m, n)):
        x = R[k:, k]
        normx = np.linalg.norm(x)
        if normx < 1e-300:
            continue
        alpha = -math.copysign(normx, x[0]) if x[0] != 0 else -normx
        v = x.copy()
        v[0] -= alpha
        vnorm = np.linalg.norm(v)
        if vnorm < 1e-300:
            continue
        v = v / vnorm
        R[k:, k:] -= 2.0 * np.outer(v, v @ R[k:, k:])
        Q[:, k:] -= 2.0 * np.outer(Q[:, k:] @ v, v)
    if thin and m > n:
        return Q[:, :n], np.triu(R[:n, :])
    return Q, np.triu(R)


def lu_nopivot(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Doolittle LU without pivoting: A = L U with unit lower L."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.eye(n)
    U = np.zeros((n, n))
    for k in range(n):
        U[k, k:] = A[k, k:] - L[k, :k] @ U[:k, k:]
        piv = U[k, k]
        scale = max(np.max(np.abs(A[k, :])), 1.0)
        if abs(piv) < 1e-12 * scale:
            raise SingularMatrix("tiny pivot in unpivoted LU")
        L[k + 1 :, k] = (A[k + 1 :, k] - L[k + 1 :, :k] @ U[:k, k]) / piv
    return L, U


def lu_pp(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """LU with partial pivoting: P A = L U; returns (perm, L, U)."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    perm = np.arange(n)
    L = np.zeros((n, n))
    U = A
    for k in range(n):
        p = k + int(np.argmax(np.abs(U[k:, k])))
        scale = max(np.max(np.abs(U[k, :])), np.max(np.abs(U[:, k])), 1e-30)
        if abs(U[p, k]) < 1e-12 * scale:
            raise SingularMatrix("singular matrix in LU")
        if p != k:
            U[[k, p], :] = U[[p, k], :]
            L[[k, p], :k] = L[[p, k], :k]
            perm[[k, p]] = perm[[p, k]]
        L[k, k] = 1.0
        L[k + 1 :, k] = U[k + 1 :, k] / U[k, k]
        U[k + 1 :, k:] -= np.outer(L[k + 1 :, k], U[k, k:])
        U[k + 1 :, :k] = 0.0
    return perm, L, np.triu(U)


def solve_dense(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """General solve via partial-pivot LU (the oracle's inverse)."""
    perm, L, U = lu_pp(A)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return backward_solve(U, forward_solve(L, B[perm, :]))


def inverse_dense(A: np.ndarray) -> np.ndarray:
    return solve_dense(A, np.eye(A.shape[0]))


def jacobi_eig(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 30):
    """Cyclic Jacobi for symmetric A; returns (Z, w) with A = Z diag(w) Z'."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    Z = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-30)

    def off_norm(M: np.ndarray) -> float:
        return float(np.linalg.norm(M - np.diag(np.diag(M))))

    skip = 1e-16 * scale
    for _ in range(max_sweeps):
        if off_norm(A) <= tol * scale:
            return Z, np.diag(A).copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(1.0 + theta * theta)
                    )
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # A := J' A J and Z := Z J, touching only rows/columns p, q
                colp, colq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * colp - s * colq
                A[:, q] = s * colp + c * colq
                rowp, rowq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rowp - s * rowq
                A[q, :] = s * rowp + c * rowq
                zp, zq = Z[:, p].copy(), Z[:, q].copy()
                Z[:, p] = c * zp - s * zq
                Z[:, q] = s * zp + c * zq
    if off_norm(A) <= tol * scale * 100:
        return Z, np.diag(A).copy()
    raise JacobiNoConvergence(
        f"off-diagonal norm {off_norm(A):.2e} after {max_sweeps} sweeps"
    )


def ldl_nopivot(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """LDL' with 1x1 diagonal pivots (no pivoting); A symmetric."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.eye(n)
    d = np.zeros(n)
    for k in range(n):
        d[k] = A[k, k] - (L[k, :k] ** 2) @ d[:k]
        scale = max(np.max(np.abs(A)), 1.0)
        if abs(d[k]) < 1e-12 * scale:
            raise SingularMatrix("tiny pivot in LDL")
        for i in range(k + 1, n):
            L[i, k] = (A[i, k] - (L[i, :k] * L[k, :k]) @ d[:k]) / d[k]
    return L, np.diag(d)


def svd_ref(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD of a full-rank matrix via Jacobi on A'A (test-scale only)."""
    A = np.asarray(A, dtype=float)
    Z, w = jacobi_eig(A.T @ A)
    order = np.argsort(w)[::-1]
    w = w[order]
    V = Z[:, order]
    sigma = np.sqrt(np.maximum(w, 0.0))
    if np.any(sigma < 1e-12 * max(sigma[0], 1e-30)):
        raise SingularMatrix("rank-deficient input to reference SVD")
    U = A @ V / sigma
    return U, np.diag(sigma), V


# ---------------------------------------------------------------------------
# random instantiation


@dataclass
class RandomModel:
    """Seeded generators keyed to the declared property set.

    Generated values certify their declared properties before use
    (regenerating up to ten times), so soundness failures downstream are
    attributable to the code under test, not to the instances.
    """

    seed: int = 0

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng(np.random.PCG64(self.seed * 100003 + salt))

    def value_for(self, info: OperandInfo, dims: Mapping[str, int], salt: int = 0):
        rng = self.rng(salt)
        for attempt in range(10):
            v = self._draw(info, dims, rng)
            if self._certify(info, v):
                return check_finite(v)
        raise VerifyError(f"could not generate a certified value for {info.name}")

    def _dim(self, d: Dim, dims: Mapping[str, int]) -> int:
        if isinstance(d.value, int):
            return d.value
        if d.is_wild:
            raise VerifyError("wildcard dimension at instantiation time")
        if d.value not in dims:
            raise VerifyError(f"dimension {d.value} unassigned")
        return dims[d.value]

    def _draw(self, info: OperandInfo, dims: Mapping[str, int], rng):
        if info.kind is Kind.SCALAR:
            return float(rng.uniform(0.05, 0.95))
        r = self._dim(info.rows, dims)
        if info.kind is Kind.VECTOR:
            return rng.uniform(-1.0, 1.0, size=(r, 1))
        c = self._dim(info.cols, dims)
        p = info.properties
        if Prop.IDENTITY in p:
            return np.eye(r)
        if Prop.SPD in p:
            g = rng.uniform(-1.0, 1.0, size=(r, r))
            return g.T @ g + r * np.eye(r)
        if Prop.ORTHOGONAL in p or Prop.ORTHOGONAL_COLUMNS in p:
            g = rng.uniform(-1.0, 1.0, size=(r, c))
            q, _ = householder_qr(g, thin=True)
            return q
        if Prop.DIAGONAL in p:
            d = rng.uniform(-1.0, 1.0, size=r)
            d = np.where(np.abs(d) < 0.1, 0.5 * np.sign(d + 1e-9), d)
            return np.diag(d)
        if Prop.LOWER_TRIANGULAR in p or Prop.UPPER_TRIANGULAR in p:
            g = rng.uniform(-1.0, 1.0, size=(r, c))
            t = np.tril(g) if Prop.LOWER_TRIANGULAR in p else np.triu(g)
            if Prop.FULL_RANK in p:
                diag = np.diag(t).copy()
                boost = np.where(np.abs(diag) < 0.3, np.sign(diag + 1e-9), 0.0)
                t[np.diag_indices(min(r, c))] = diag + boost
            return t
        if Prop.SYMMETRIC in p:
            g = rng.uniform(-1.0, 1.0, size=(r, r))
            return (g + g.T) / 2.0
        g = rng.uniform(-1.0, 1.0, size=(r, c))
        return g

    def _certify(self, info: OperandInfo, v) -> bool:
        p = info.properties
        if info.kind is not Kind.MATRIX:
            return True
        if Prop.SPD in p and np.min(np.linalg.eigvalsh((v + v.T) / 2)) <= 0:
            return False
        if Prop.ORTHOGONAL in p or Prop.ORTHOGONAL_COLUMNS in p:
            if np.linalg.norm(v.T @ v - np.eye(v.shape[1])) > 1e-9:
                return False
        if Prop.LOWER_TRIANGULAR in p and not np.allclose(v, np.tril(v)):
            return False
        if Prop.UPPER_TRIANGULAR in p and not np.allclose(v, np.triu(v)):
            return False
        if Prop.DIAGONAL in p and not np.allclose(v, np.diag(np.diag(v))):
            return False
        if Prop.FULL_RANK in p:
            s = np.linalg.svd(v, compute_uv=False)
            if s[-1] <= 1e-8 * s[0]:
                return False
        if Prop.SYMMETRIC in p and not np.allclose(v, v.T):
            return False
        return True

    def environment(
        self, operands: Mapping[str, OperandInfo], dims: Mapping[str, int], salt: int = 0
    ) -> dict[str, object]:
        env = {}
        for k, (name, info) in enumerate(sorted(operands.items())):
            if name == IDENTITY_NAME:
                continue
            env[name] = self.value_for(info, dims, salt * 1009 + k)
        return env


def _inlined_aux(eqset: EquationSet) -> list[tuple[OperandInfo, Expression]]:
    aux = {eq.lhs.name: eq.rhs for eq in eqset.auxiliaries}
    out = []
    for eq in eqset.auxiliaries:
        rhs = eq.rhs
        for _ in range(len(aux) + 1):
            from .ir import normalize, substitute

            new = normalize(substitute(rhs, aux))
            if new.key == rhs.key:
                break
            rhs = new
        out.append((eq.lhs, rhs))
    return out


def free_inputs(eqset: EquationSet) -> dict[str, OperandInfo]:
    defined = {eq.lhs.name for eq in eqset.equations}
    return {
        name: info
        for name, info in eqset.operands.items()
        if name not in defined and name != IDENTITY_NAME
    }


def consistent_environment(
    eqset: EquationSet,
    dims: Mapping[str, int],
    model: RandomModel,
    salt: int = 0,
    retries: int = 40,
) -> dict[str, object]:
    """Instantiate the free inputs so that every auxiliary definition also
    certifies its declared properties (e.g. h*Phi + (1-h)*I really is SPD)."""
    aux = _inlined_aux(eqset)
    inputs = free_inputs(eqset)
    for attempt in range(retries):
        env = model.environment(inputs, dims, salt=salt * 131 + attempt)
        ok = True
        for info, rhs in aux:
            value = eval_expression(rhs, env, dims)
            if not model._certify(info, value):
                ok = False
                break
        if ok:
            return env
    raise VerifyError("could not draw inputs consistent with the declarations")


def sequence_environment(
    eqset: EquationSet,
    dims: Mapping[str, int],
    trips: Mapping[str, int],
    model: RandomModel,
    salt: int = 0,
):
    """Indexed environment for a sequence: ``{name: {tuple: value}}`` for
    subscripted inputs, plain values otherwise; every auxiliary instance is
    certified against its declared properties (indexed inputs feeding a
    failing instance are redrawn)."""
    import itertools

    aux = _inlined_aux(eqset)
    inputs = free_inputs(eqset)
    env: dict[str, object] = {}
    for k, (name, info) in enumerate(sorted(inputs.items())):
        ix = sorted(eqset.dependencies.get(name, ()))
        if not ix:
            env[name] = model.value_for(info, dims, salt=salt * 1009 + k)
        else:
            ranges = [range(1, trips[i] + 1) for i in ix]
            env[name] = {
                t: model.value_for(info, dims, salt=abs(hash((salt, name) + t)) % 10**6)
                for t in itertools.product(*ranges)
            }
    # certify auxiliaries instance by instance
    for info, rhs in aux:
        ix = sorted(eqset.indices_of(info.name))
        ranges = [range(1, trips[i] + 1) for i in ix]
        for t in itertools.product(*ranges):
            assign = dict(zip(ix, t))
            for attempt in range(40):
                single = _instance_slice(eqset, env, assign)
                value = eval_expression(rhs, single, dims)
                if model._certify(info, value):
                    break
                # redraw the indexed inputs this instance depends on
                redrew = False
                for name in sorted(free_inputs(eqset)):
                    dep_ix = sorted(eqset.dependencies.get(name, ()))
                    if not dep_ix or not set(dep_ix) <= set(ix):
                        continue
                    key = tuple(assign[i] for i in dep_ix)
                    env[name][key] = model.value_for(
                        eqset.operands[name],
                        dims,
                        salt=abs(hash((salt, name, attempt) + key)) % 10**6,
                    )
                    redrew = True
                if not redrew:
                    raise VerifyError("inconsistent auxiliary with no indexed inputs")
            else:
                raise VerifyError("could not certify auxiliary instances")
    return env


def _instance_slice(eqset: EquationSet, env, assign: Mapping[str, int]):
    """Single-instance view of an indexed environment; inputs depending on
    indices outside ``assign`` are omitted (not needed by that instance)."""
    single = {}
    for name, value in env.items():
        if isinstance(value, dict):
            ix = sorted(eqset.dependencies.get(name, ()))
            if not set(ix) <= set(assign):
                continue
            single[name] = value[tuple(assign[i] for i in ix)]
        else:
            single[name] = value
    return single


def draw_dims(
    operands: Mapping[str, OperandInfo],
    rng: np.random.Generator,
    lo: int = 3,
    hi: int = 12,
) -> dict[str, int]:
    """Assign every symbolic dimension a size in [lo, hi], respecting panel
    shape constraints (column panels need rows > cols, row panels the
    reverse)."""
    names = sorted(
        {
            d.value
            for info in operands.values()
            for d in (info.rows, info.cols)
            if isinstance(d.value, str) and not d.is_wild
        }
    )
    for _ in range(200):
        dims = {n: int(rng.integers(lo, hi + 1)) for n in names}
        ok = True
        for info in operands.values():
            try:
                r = dims[info.rows.value] if isinstance(info.rows.value, str) else info.rows.value
                c = dims[info.cols.value] if isinstance(info.cols.value, str) else info.cols.value
            except KeyError:
                ok = False
                break
            if info.has(Prop.COLUMN_PANEL) and not r > c:
                ok = False
            if info.has(Prop.ROW_PANEL) and not c > r:
                ok = False
        if ok:
            return dims
    raise VerifyError("could not satisfy panel dimension constraints")


# ---------------------------------------------------------------------------
# expression evaluation


def _shape_binding(env: Mapping[str, object], operands: Mapping[str, OperandInfo]):
    dims: dict[str, int] = {}
    for name, info in operands.items():
        val = env.get(name)
        if val is None or isinstance(val, dict):
            continue
        shape = (1, 1) if isinstance(val, (int, float)) else np.asarray(val).shape
        for d, s in zip((info.rows, info.cols), shape):
            if isinstance(d.value, str) and not d.is_wild:
                dims[d.value] = int(s)
    return dims


def eval_expression(
    e: Expression,
    env: Mapping[str, object],
    dims: Mapping[str, int] | None = None,
):
    """Literal recursive evaluation; the inverse uses an LU-with-partial-
    pivoting solve against the identity (oracle only)."""
    dims = dict(dims or {})

    def dim_of(d: Dim) -> int:
        if isinstance(d.value, int):
            return d.value
        if d.value in dims:
            return dims[d.value]
        raise VerifyError(f"cannot resolve dimension {d}")

    def ev(x: Expression):
        if isinstance(x, Operand):
            if x.info.name == IDENTITY_NAME:
                return np.eye(dim_of(x.rows))
            if x.info.name not in env:
                raise UndefinedOperand(f"operand {x.info.name} not in environment")
            return env[x.info.name]
        if isinstance(x, ScalarLiteral):
            return float(x.value)
        if isinstance(x, Transpose):
            v = ev(x.child)
            return v if isinstance(v, float) else np.asarray(v).T
        if isinstance(x, Minus):
            v = ev(x.child)
            return -v if isinstance(v, float) else -np.asarray(v)
        if isinstance(x, Inverse):
            v = ev(x.child)
            if isinstance(v, float):
                if abs(v) < 1e-300:
                    raise SingularMatrix("scalar division by zero")
                return 1.0 / v
            return inverse_dense(np.asarray(v))
        if isinstance(x, Plus):
            vals = [ev(c) for c in x.children]
            shape = next(
                (np.asarray(v).shape for v in vals if not isinstance(v, float)), None
            )
            total = None
            for c, v in zip(x.children, vals):
                if shape is not None and isinstance(v, float):
                    raise VerifyError("scalar added to a matrix")
                total = v if total is None else total + v
            return total
        if isinstance(x, Times):
            acc = None
            scalar = 1.0
            for c in x.children:
                v = ev(c)
                if isinstance(v, float) or (hasattr(v, "shape") and v.shape == (1, 1)):
                    scalar *= float(np.asarray(v).reshape(()))
                    continue
                acc = v if acc is None else acc @ v
                if hasattr(acc, "shape") and acc.shape == (1, 1):
                    scalar *= float(acc.reshape(()))
                    acc = None
            if acc is None:
                return scalar
            return scalar * acc
        raise VerifyError(f"cannot evaluate {x!r}")

    out = ev(e)
    if hasattr(out, "shape") and out.shape == (1, 1):
        out = float(np.asarray(out).reshape(()))
    return check_finite(out)


def eval_equation_set(eqset: EquationSet, env, dims=None) -> dict[str, object]:
    dims = dims or _shape_binding(env, eqset.operands)
    out = {}
    for lhs, rhs in eqset.inlined_outputs():
        out[lhs.name] = eval_expression(rhs, env, dims)
    return out


# ---------------------------------------------------------------------------
# statement / algorithm execution


def _exec_factorization(name: str, value: np.ndarray) -> tuple[np.ndarray, ...]:
    if name == "cholesky":
        return (cholesky_rl(value),)
    if name == "qr":
        q, r = householder_qr(np.array(value, dtype=float), thin=True)
        return q, r
    if name == "eig":
        z, w = jacobi_eig(value)
        return z, np.diag(w)
    if name == "ldl":
        return ldl_nopivot(value)
    if name == "lu":
        return lu_nopivot(value)
    if name == "lq":
        # A = L Q with A (m,n) wide; factors are (L, Qt) with A = L Qt'
        q, r = householder_qr(np.array(value, dtype=float).T, thin=True)
        return r.T, q
    if name == "svd":
        return svd_ref(value)
    raise VerifyError(f"no reference execution for factorization {name}")


def _apply_inverse_left(view, acc):
    """acc := core^{-1} * acc (or core^{-T}) for triangular/diagonal cores."""
    info, transposed, value = view
    if Prop.DIAGONAL in info.properties:
        return diag_solve(value, acc)
    T = value.T if transposed else value
    return tri_solve(T, acc)


def exec_rhs(rhs: Expression, env: Mapping[str, object], dims: Mapping[str, int]):
    """Execute one kernel statement's right-hand side with reference kernels.

    Inverses must sit on triangular or diagonal operands (solves) or be the
    whole right-hand side (explicit triangular/diagonal inversion).
    """

    def dim_of(d: Dim) -> int:
        if isinstance(d.value, int):
            return d.value
        return dims[d.value]

    def leaf(x: Expression):
        if isinstance(x, Operand):
            if x.info.name == IDENTITY_NAME:
                return np.eye(dim_of(x.rows))
            if x.info.name not in env:
                raise UndefinedOperand(x.info.name)
            return env[x.info.name]
        if isinstance(x, ScalarLiteral):
            return float(x.value)
        if isinstance(x, Transpose):
            v = leaf(x.child)
            return v if isinstance(v, float) else np.asarray(v).T
        if isinstance(x, Minus):
            return -leaf(x.child)
        if isinstance(x, Plus):
            vals = [leaf(c) for c in x.children]
            total = vals[0]
            for v in vals[1:]:
                total = total + v
            return total
        if isinstance(x, Times):
            return fold(x.children)
        if isinstance(x, Inverse):
            v = leaf(x.child)
            if isinstance(v, float):
                return 1.0 / v
            if np.allclose(v, np.diag(np.diag(v))):
                return diag_solve(v, np.eye(v.shape[0]))
            if np.allclose(v, np.tril(v)) or np.allclose(v, np.triu(v)):
                return tri_solve(v, np.eye(v.shape[0]))
            raise VerifyError("explicit inverse of an unfactored matrix in a kernel")
        raise VerifyError(f"cannot execute {x!r}")

    def inv_view(x: Expression):
        t = False
        if isinstance(x, Transpose):
            t = True
            x = x.child
        if isinstance(x, Inverse) and isinstance(x.child, Operand):
            info = x.child.info
            if info.properties & {
                Prop.LOWER_TRIANGULAR,
                Prop.UPPER_TRIANGULAR,
                Prop.DIAGONAL,
            }:
                val = env.get(info.name)
                if val is None:
                    raise UndefinedOperand(info.name)
                return info, t, np.asarray(val)
        return None

    def fold(children: Sequence[Expression]):
        scalar = 1.0
        mats: list[Expression] = []
        for c in children:
            if c.is_scalar_shaped:
                v = leaf(c)
                scalar *= float(np.asarray(v).reshape(())) if hasattr(v, "shape") else v
            else:
                mats.append(c)
        if not mats:
            return scalar
        acc = None
        for c in reversed(mats):
            iv = inv_view(c)
            if iv is not None and acc is not None:
                acc = _apply_inverse_left(iv, acc)
                continue
            v = leaf(c)
            acc = v if acc is None else np.asarray(v) @ acc
        return scalar * acc

    if isinstance(rhs, Times):
        out = fold(rhs.children)
    else:
        out = leaf(rhs)
    if hasattr(out, "shape") and np.asarray(out).shape == (1, 1):
        out = float(np.asarray(out).reshape(()))
    return check_finite(out)


def run_algorithm(algorithm, env: Mapping[str, object], dims=None) -> dict[str, object]:
    """Execute an Algorithm's statements in order; returns the final env."""
    from .search import FactorStatement, KernelStatement  # cycle-free at runtime

    state = dict(env)
    dims = dict(dims or _shape_binding(env, {}))
    for name, val in env.items():
        pass
    # bind dimensions from the declared inputs
    for stmt in algorithm.statements:
        if isinstance(stmt, KernelStatement):
            for op_name, info in stmt.operand_shapes():
                val = state.get(op_name)
                if val is None or isinstance(val, float):
                    continue
                shape = np.asarray(val).shape
                for d, s in zip((info.rows, info.cols), shape):
                    if isinstance(d.value, str) and not d.is_wild:
                        dims.setdefault(d.value, int(s))
    for stmt in algorithm.statements:
        if isinstance(stmt, FactorStatement):
            val = state.get(stmt.operand.name)
            if val is None:
                raise UndefinedOperand(stmt.operand.name)
            factors = _exec_factorization(stmt.factorization, np.asarray(val))
            for info, fval in zip(stmt.factors, factors):
                state[info.name] = check_finite(fval)
        else:
            state[stmt.target.name] = exec_rhs(stmt.rhs, state, dims)
    return state


def run_loop_nest(nest, env: Mapping[str, object], bounds: Mapping[str, int], dims=None):
    """Execute a hoisted loop nest.

    Indexed inputs come in as ``{name: {(i, j, ...): value}}`` keyed by the
    values of the operand's own (sorted) index set; unindexed inputs are
    plain values.  Returns the store in the same keyed format.
    """
    from .search import FactorStatement

    indices_of = nest.indices_of
    store: dict[tuple[str, tuple], object] = {}
    dims = dict(dims or {})
    for name, val in env.items():
        if isinstance(val, dict):
            for key, v in val.items():
                store[(name, tuple(key))] = v
        else:
            store[(name, ())] = val

    def key_for(name: str, assign: Mapping[str, int]) -> tuple:
        ix = sorted(indices_of.get(name, frozenset()))
        return tuple(assign[i] for i in ix)

    def scoped_env(stmt, assign):
        names = (
            {stmt.operand.name}
            if isinstance(stmt, FactorStatement)
            else {
                n.info.name
                for _, n in positions(stmt.rhs)
                if isinstance(n, Operand) and n.info.name != IDENTITY_NAME
            }
        )
        local = {}
        for name in names:
            key = (name, key_for(name, assign))
            if key not in store:
                raise UndefinedOperand(f"{name}[{key[1]}]")
            local[name] = store[key]
        return local

    def exec_region(stmts, assign):
        for stmt in stmts:
            local = scoped_env(stmt, assign)
            if isinstance(stmt, FactorStatement):
                factors = _exec_factorization(
                    stmt.factorization, np.asarray(local[stmt.operand.name])
                )
                for info, fval in zip(stmt.factors, factors):
                    store[(info.name, key_for(info.name, assign))] = check_finite(fval)
            else:
                local_dims = dict(dims)
                for _, node in positions(stmt.rhs):
                    if isinstance(node, Operand) and node.info.name in local:
                        val = local[node.info.name]
                        if isinstance(val, float):
                            continue
                        shape = np.asarray(val).shape
                        for d, s in zip((node.info.rows, node.info.cols), shape):
                            if isinstance(d.value, str) and not d.is_wild:
                                local_dims.setdefault(d.value, int(s))
                value = exec_rhs(stmt.rhs, local, local_dims)
                store[(stmt.target.name, key_for(stmt.target.name, assign))] = value

    def trip(index: str) -> int:
        bound = nest.space.bounds[index]
        if isinstance(bound, int):
            return bound
        if bound in bounds:
            return int(bounds[bound])
        if index in bounds:
            return int(bounds[index])
        raise VerifyError(f"no trip count for index {index}")

    def walk(loop, assign):
        for v in range(1, trip(loop.index) + 1):
            assign2 = dict(assign)
            assign2[loop.index] = v
            exec_region(loop.body, assign2)
            for sub in loop.nested:
                walk(sub, assign2)

    exec_region(nest.preheader, {})
    for loop in nest.loops:
        walk(loop, {})
    out: dict[str, object] = {}
    for (name, key), val in store.items():
        if key:
            out.setdefault(name, {})[key] = val
        else:
            out[name] = val
    return out


# ---------------------------------------------------------------------------
# certification


@dataclass
class CertificationReport:
    passed: bool
    max_rel_err: float
    tolerance: float
    trials: int
    failures: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(float(np.linalg.norm(b)), 1e-30)
    return float(np.linalg.norm(a - b)) / denom


def certify_equivalence(
    eqset: EquationSet,
    algorithm,
    trials: int = 20,
    model: RandomModel | None = None,
    tol: float | None = None,
    dims_range: tuple[int, int] = (3, 12),
) -> CertificationReport:
    """Run the algorithm against naive evaluation on seeded random inputs.

    The default tolerance is 1e-8, loosened to 1e-6 on algorithms that go
    through the Jacobi eigendecomposition.  Failures are reported, never
    raised.
    """
    from .search import FactorStatement

    model = model or RandomModel(seed=7)
    if tol is None:
        uses_eig = any(
            isinstance(s, FactorStatement) and s.factorization in ("eig", "svd")
            for s in algorithm.statements
        )
        tol = 1e-6 if uses_eig else 1e-8
    worst = 0.0
    failures: list[str] = []
    for t in range(trials):
        rng = model.rng(7919 + t)
        try:
            dims = draw_dims(eqset.operands, rng, *dims_range)
            env = consistent_environment(eqset, dims, model, salt=t)
            expected = eval_equation_set(eqset, env, dims)
            got = run_algorithm(algorithm, env, dims)
        except VerifyError as exc:
            failures.append(f"trial {t}: {exc}")
            worst = float("inf")
            continue
        for name, want in expected.items():
            if name not in got:
                failures.append(f"trial {t}: output {name} not computed")
                worst = float("inf")
                continue
            err = rel_err(got[name], want)
            worst = max(worst, err)
            if err > tol:
                failures.append(f"trial {t}: {name} rel err {err:.3e} > {tol:.1e}")
    return CertificationReport(not failures, worst, tol, trials, failures)
