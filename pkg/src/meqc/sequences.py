"""Sequence tailoring: subscript propagation, loop nests, invariant motion.

A single-instance algorithm is adapted to a family of related problems in
three steps: propagate the declared operand subscripts through the
statement list (each target gets the union of the indices on its right-
hand side), group statements by their index set, and place each group in
the shallowest loop region that covers it.  Statements with an empty index
set land in the preheader and are computed exactly once; work depending on
a strict subset of the indices gets its own sibling loop so, e.g., one
eigendecomposition is shared by an entire two-dimensional sequence.

The loop order of the innermost nest is chosen by comparing the cost model
over all permutations of the indices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import sympy as sp

from .ir import CompileError, Dim, Expression, Operand, OperandInfo, positions
from .kernels import dim_expr, evaluate_cost
from .search import Algorithm, FactorStatement, KernelStatement


class CyclicDependency(CompileError):
    pass


@dataclass(frozen=True)
class IndexSpace:
    """Ordered loop indices with symbolic or literal bounds (1..bound)."""

    indices: tuple[str, ...]
    bounds: Mapping[str, str | int]

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise CompileError("duplicate loop indices")
        for i in self.indices:
            if i not in self.bounds:
                raise CompileError(f"index {i} has no bound")

    def bound_expr(self, index: str) -> sp.Expr:
        b = self.bounds[index]
        return sp.Integer(b) if isinstance(b, int) else dim_expr(Dim(b))


@dataclass
class AnnotatedStatement:
    statement: object  # KernelStatement | FactorStatement
    indices: frozenset[str]


@dataclass
class AnnotatedAlgorithm:
    algorithm: Algorithm
    annotations: list[AnnotatedStatement]
    index_of: dict[str, frozenset[str]] = field(default_factory=dict)

    def index_sets(self) -> list[frozenset[str]]:
        return [a.indices for a in self.annotations]


def propagate_subscripts(
    alg: Algorithm, deps: Mapping[str, Sequence[str]]
) -> AnnotatedAlgorithm:
    """Single top-to-bottom pass: each statement's target receives the union
    of the indices appearing on its right-hand side, and that annotation
    applies to all later uses of the target."""
    index_of: dict[str, frozenset[str]] = {
        name: frozenset(ix) for name, ix in deps.items()
    }
    out: list[AnnotatedStatement] = []
    for stmt in alg.statements:
        if isinstance(stmt, FactorStatement):
            ix = index_of.get(stmt.operand.name, frozenset())
            for f in stmt.factors:
                index_of[f.name] = ix
        else:
            ix = frozenset()
            for _, node in positions(stmt.rhs):
                if isinstance(node, Operand):
                    ix |= index_of.get(node.info.name, frozenset())
            index_of[stmt.target.name] = ix
        out.append(AnnotatedStatement(stmt, ix))
    return AnnotatedAlgorithm(alg, out, index_of)


@dataclass
class Loop:
    index: str
    body: list[object] = field(default_factory=list)  # statements
    nested: list["Loop"] = field(default_factory=list)

    def all_statements(self) -> Iterable[object]:
        yield from self.body
        for sub in self.nested:
            yield from sub.all_statements()


@dataclass
class LoopNest:
    """Preheader plus a list of top-level loops (siblings allowed)."""

    space: IndexSpace
    preheader: list[object] = field(default_factory=list)
    loops: list[Loop] = field(default_factory=list)
    outputs: tuple[str, ...] = ()
    indices_of: dict[str, frozenset[str]] = field(default_factory=dict)

    def all_statements(self) -> Iterable[object]:
        yield from self.preheader
        for loop in self.loops:
            yield from loop.all_statements()

    def regions(self) -> Iterable[tuple[tuple[str, ...], list[object]]]:
        """(enclosing index tuple, statements) for every region."""
        yield (), self.preheader

        def walk(loop: Loop, prefix: tuple[str, ...]):
            here = prefix + (loop.index,)
            yield here, loop.body
            for sub in loop.nested:
                yield from walk(sub, here)

        for loop in self.loops:
            yield from walk(loop, ())


def _placement_depth(ix: frozenset[str], order: Sequence[str]) -> int:
    """Smallest k with ix contained in the first k indices of the order."""
    have: set[str] = set()
    for k, idx in enumerate(order):
        if ix <= have:
            return k
        have.add(idx)
    if ix <= have:
        return len(order)
    raise CompileError(f"indices {sorted(ix)} not in loop order {order}")


def _build_nest(ann: AnnotatedAlgorithm, space: IndexSpace, order: Sequence[str]) -> LoopNest:
    nest = LoopNest(
        space,
        outputs=tuple(ann.algorithm.outputs),
        indices_of=dict(ann.index_of),
    )
    chains: dict[tuple[str, ...], Loop] = {}

    def chain_for(prefix: tuple[str, ...]) -> Loop:
        loop = chains.get(prefix)
        if loop is None:
            loop = Loop(prefix[-1])
            chains[prefix] = loop
            if len(prefix) == 1:
                nest.loops.append(loop)
            else:
                chain_for(prefix[:-1]).nested.append(loop)
        return loop

    for a in ann.annotations:
        if not a.indices:
            nest.preheader.append(a.statement)
            continue
        # order the statement's own indices by the chosen loop order and
        # nest it exactly that deep; strict-subset groups become siblings
        prefix = tuple(i for i in order if i in a.indices)
        chain_for(prefix).body.append(a.statement)
    return nest


def _check_dataflow(nest: LoopNest) -> None:
    defined: set[str] = set()
    for _, stmts in nest.regions():
        for s in stmts:
            names = (
                set(s.target_names)
                if isinstance(s, FactorStatement)
                else {s.target.name}
            )
            defined |= names
    # a second pass verifying each use is defined no later than its region
    seen: set[str] = set()
    order: list[tuple[tuple[str, ...], object]] = []
    for region, stmts in nest.regions():
        for s in stmts:
            order.append((region, s))
    for region, s in order:
        if isinstance(s, FactorStatement):
            uses = {s.operand.name}
            defs = set(s.target_names)
        else:
            uses = {
                n.info.name
                for _, n in positions(s.rhs)
                if isinstance(n, Operand) and n.info.name != "I"
            }
            defs = {s.target.name}
        for u in uses & defined:
            if u not in seen and u not in defs:
                raise CyclicDependency(f"{u} used before it is computed")
        seen |= defs


def hoist(ann: AnnotatedAlgorithm, space: IndexSpace) -> LoopNest:
    """Code motion: loop-invariant statements move to the preheader, partial
    dependencies into sibling loops; the loop order minimizes model cost."""
    best: tuple[sp.Expr, LoopNest] | None = None
    orders = list(itertools.permutations(space.indices)) or [()]
    for order in orders:
        nest = _build_nest(ann, space, order)
        c = sequence_cost_symbolic(nest)
        # compare at the declared bounds where possible, else structurally
        key = c
        if best is None or _cost_lt(key, best[0], space):
            best = (key, nest)
    assert best is not None
    _check_dataflow(best[1])
    return best[1]


def _cost_lt(a: sp.Expr, b: sp.Expr, space: IndexSpace) -> bool:
    subs = {}
    for sym in (a - b).free_symbols:
        subs[sym] = 1000
    try:
        diff = float(sp.simplify((a - b).subs(subs)))
        return diff < 0
    except Exception:
        return False


def sequence_cost_symbolic(nest: LoopNest) -> sp.Expr:
    total = sp.Integer(0)
    for region, stmts in nest.regions():
        trip = sp.Integer(1)
        for idx in region:
            trip *= nest.space.bound_expr(idx)
        for s in stmts:
            total += trip * s.cost_expr
    return sp.expand(total)


def sequence_cost(nest: LoopNest, assignment: Mapping[str, int]) -> float:
    """Flops of the whole nest: statement cost times enclosing trip counts."""
    return evaluate_cost(sequence_cost_symbolic(nest), assignment)


def blackbox_cost_symbolic(alg: Algorithm, space: IndexSpace) -> sp.Expr:
    """Cost of solving every instance with the single-instance algorithm."""
    trip = sp.Integer(1)
    for idx in space.indices:
        trip *= space.bound_expr(idx)
    return sp.expand(trip * alg.symbolic_cost)
