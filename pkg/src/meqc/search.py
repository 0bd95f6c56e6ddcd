"""Derivation engine: inverse treatment, kernel mapping, algorithm ranking.

The tree is grown in two phases.  Phase one deals exclusively with inverse
operators: the innermost inverse applied to anything that is not a
triangular or diagonal operand is resolved by (a) contracting the argument
to a fresh operand with inferred properties, (b) factoring one constituent
matrix according to its property table row, or (c) exposing a common
segment that is about to be computed anyway (the route that turns
``(X' inv(L') inv(L) X)^{-1}`` into ``(W'W)^{-1}`` via ``W := inv(L) X``).
After every structural change the expression is re-simplified through the
rewrite closure.  Phase two maps the residual expressions onto kernels,
best precedence class first, reusing common segments instead of
recomputing them.  Each root-to-leaf path yields one Algorithm.

A progress guard rejects factor-refactor and factor-recompose cycles so
the tree stays finite even without the node caps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import sympy as sp

from . import kernels as kernels_mod
from . import knowledge
from . import rewrite as rewrite_mod
from .ir import (
    CompileError,
    Dim,
    EquationSet,
    Expression,
    IDENTITY_NAME,
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
    make_operand,
    node_count,
    normalize,
    operand,
    operand_names,
    positions,
    replace_by_key,
    structural_key,
    subterm_at,
    substitute,
)
from .kernels import (
    COPY,
    KernelDescriptor,
    KernelMatch,
    default_registry,
    dim_expr,
    evaluate_cost,
    factorization_cost,
)
from .rewrite import RewriteRule, SegmentGroup, builtin_rules, expose_segment, find_common_segments, simplify


class SearchBudgetExhausted(CompileError):
    pass


class NoKernelApplicable(CompileError):
    def __init__(self, expr: Expression):
        super().__init__(f"no kernel matches {expr.key}")
        self.expr = expr


# ---------------------------------------------------------------------------
# statements and algorithms


@dataclass(frozen=True)
class KernelStatement:
    """``target := kernel(rhs)`` (SSA: every target is assigned exactly once)."""

    target: OperandInfo
    rhs: Expression
    kernel: str
    cost_expr: sp.Expr

    def operand_shapes(self):
        for _, node in positions(self.rhs):
            if isinstance(node, Operand):
                yield node.info.name, node.info

    def __str__(self) -> str:
        return f"{self.target.name} := {self.rhs.key}"


@dataclass(frozen=True)
class FactorStatement:
    """A factorization binding, e.g. ``L L' = M``."""

    factorization: str
    factors: tuple[OperandInfo, ...]
    operand: OperandInfo
    recomposition: Expression
    cost_expr: sp.Expr

    @property
    def target_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    def __str__(self) -> str:
        return f"{self.recomposition.key} = {self.operand.name}"


Statement = "KernelStatement | FactorStatement"


@dataclass
class Algorithm:
    """An ordered statement list computing the declared outputs."""

    statements: list[object]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    node_path: tuple[int, ...] = ()

    @property
    def symbolic_cost(self) -> sp.Expr:
        return sp.expand(sum((s.cost_expr for s in self.statements), sp.Integer(0)))

    def cost_at(self, dims: Mapping[str, int]) -> float:
        return evaluate_cost(self.symbolic_cost, dims)

    def kernel_names(self) -> list[str]:
        return [
            s.kernel if isinstance(s, KernelStatement) else s.factorization
            for s in self.statements
        ]

    def canonical_key(self) -> tuple[str, ...]:
        return canonical_statement_key(self)

    def __iter__(self):
        return iter(self.statements)


def canonical_statement_lines(alg: Algorithm) -> list[str]:
    """Canonical content of each statement, in statement order.

    Every intermediate is renamed to the canonical form of its fully
    expanded definition, so two statements are equal exactly when they
    perform the same computation (fresh names and in-place printing do
    not matter).  Scalar products are sorted, since scalar multiplication
    commutes.
    """
    naming: dict[str, str] = {}

    def canon(e: Expression) -> str:
        if isinstance(e, Operand):
            return naming.get(e.info.name, e.key)
        if isinstance(e, ScalarLiteral):
            return e.key
        if isinstance(e, Plus):
            return "(+ " + " ".join(sorted(canon(c) for c in e.children)) + ")"
        if isinstance(e, Times):
            scal = sorted(canon(c) for c in e.children if c.is_scalar_shaped)
            rest = [canon(c) for c in e.children if not c.is_scalar_shaped]
            return "(* " + " ".join(scal + rest) + ")"
        tag = {"Minus": "-", "Transpose": "T", "Inverse": "~"}[type(e).__name__]
        return f"({tag} {canon(e.children[0])})"

    lines: list[str] = []
    for stmt in alg.statements:
        if isinstance(stmt, FactorStatement):
            src = naming.get(stmt.operand.name, stmt.operand.name)
            for i, f in enumerate(stmt.factors):
                naming[f.name] = f"({stmt.factorization}:{i} {src})"
            lines.append(f"({stmt.factorization} {src})")
        else:
            body = canon(stmt.rhs)
            naming[stmt.target.name] = body
            lines.append(body)
    for n in alg.outputs:
        lines.append(f"out:{naming.get(n, n)}")
    return lines


def canonical_statement_key(alg: Algorithm) -> tuple[str, ...]:
    """Alpha-invariant statement-multiset key (see canonical_statement_lines)."""
    return tuple(sorted(canonical_statement_lines(alg)))


# ---------------------------------------------------------------------------
# configuration and tree


@dataclass(frozen=True)
class SearchConfig:
    max_nodes: int = 400
    max_algorithms: int = 64
    branch_cap: int = 4
    variant_cap: int = 512
    variant_depth: int = 8
    max_ledger: int = 12
    dims: Mapping[str, int] | None = None

    def __post_init__(self):
        for f in ("max_nodes", "max_algorithms", "branch_cap", "variant_cap", "variant_depth"):
            if getattr(self, f) < 1:
                raise CompileError(f"search cap {f} must be >= 1")


@dataclass
class PendingDef:
    """An equation still to be mapped onto kernels: ``target := rhs``."""

    target: OperandInfo
    rhs: Expression


@dataclass
class PendingFact:
    statement: FactorStatement


@dataclass
class DerivationNode:
    id: int
    parent: int | None
    phase: str  # "inverse-treatment" | "kernel-mapping" | "leaf"
    items: list[object]  # PendingDef | PendingFact, in causal order
    edge: str  # human-readable label of the step that created this node
    factored: frozenset[str] = frozenset()
    produced_factors: frozenset[str] = frozenset()
    ancestor_keys: frozenset[str] = frozenset()
    namer: Namer | None = None
    definitions: dict[str, Expression] = field(default_factory=dict)
    rule_chain: tuple[str, ...] = ()

    def state_key(self) -> str:
        parts = []
        for it in self.items:
            if isinstance(it, PendingDef):
                parts.append(f"{it.target.name}:={it.rhs.key}")
            else:
                parts.append(str(it.statement))
        return " ; ".join(parts)

    def defs_map(self) -> dict[str, Expression]:
        return dict(self.definitions)


@dataclass
class DerivationTree:
    nodes: dict[int, DerivationNode] = field(default_factory=dict)
    children: dict[int, list[int]] = field(default_factory=dict)
    truncated: bool = False

    def add(self, node: DerivationNode) -> None:
        self.nodes[node.id] = node
        if node.parent is not None:
            self.children.setdefault(node.parent, []).append(node.id)

    def path_to(self, node_id: int) -> list[DerivationNode]:
        out = []
        cur: int | None = node_id
        while cur is not None:
            node = self.nodes[cur]
            out.append(node)
            cur = node.parent
        return list(reversed(out))


# ---------------------------------------------------------------------------
# progress guard


def progress_guard(node: DerivationNode, proposal: tuple[str, str]) -> bool:
    """Allow/reject a proposed phase-1 edge.

    ``proposal`` is ("factor", operand name) or ("contract", resulting
    state key).  Rejects factoring a factor produced on this branch,
    re-factoring an operand already factored on this branch, and any
    contraction that re-creates an ancestor state.
    """
    kind, arg = proposal
    if kind == "factor":
        if arg in node.produced_factors:
            return False
        if arg in node.factored:
            return False
        return True
    if kind == "contract":
        return arg not in node.ancestor_keys
    return True


# ---------------------------------------------------------------------------
# phase 1: inverse treatment


def _offending_inverses(items: Sequence[object]) -> list[tuple[int, tuple[int, ...], Expression]]:
    """(item index, path, inverse node) for every inverse not yet resolved,
    innermost first, ties left to right."""
    out = []
    for idx, it in enumerate(items):
        if not isinstance(it, PendingDef):
            continue
        for path, nd in positions(it.rhs):
            if not isinstance(nd, Inverse):
                continue
            child = nd.child
            if child.is_scalar_shaped:
                continue
            if isinstance(child, Operand) and child.info.properties & {
                Prop.LOWER_TRIANGULAR,
                Prop.UPPER_TRIANGULAR,
                Prop.DIAGONAL,
            }:
                continue
            out.append((idx, path, nd))
    out.sort(key=lambda t: (-len(t[1]), t[0], t[1]))
    return out


def _simplify_items(
    items: Sequence[object],
    rules: Sequence[RewriteRule],
    cfg: SearchConfig,
    only: set[str] | None = None,
) -> list[object]:
    """Simplify pending right-hand sides (only those mentioning ``only``)."""
    out = []
    for it in items:
        if isinstance(it, PendingDef) and (only is None or only & operand_names(it.rhs)):
            rhs = simplify(it.rhs, rules, cfg.variant_cap, cfg.variant_depth)
            out.append(PendingDef(it.target, rhs))
        else:
            out.append(it)
    return out


def _substitute_items(items: Sequence[object], name: str, replacement: Expression) -> list[object]:
    out = []
    for it in items:
        if isinstance(it, PendingDef) and name in operand_names(it.rhs):
            out.append(
                PendingDef(it.target, normalize(substitute(it.rhs, {name: replacement})))
            )
        else:
            out.append(it)
    return out


def _replace_key_items(items: Sequence[object], key: str, new: Expression) -> list[object]:
    out = []
    for it in items:
        if isinstance(it, PendingDef):
            out.append(PendingDef(it.target, normalize(replace_by_key(it.rhs, key, new))))
        else:
            out.append(it)
    return out


def _insert_def(items: list[object], new_def: PendingDef) -> list[object]:
    """Insert a definition right before its first use."""
    for i, it in enumerate(items):
        if isinstance(it, PendingDef) and new_def.target.name in operand_names(it.rhs):
            return items[:i] + [new_def] + items[i:]
        if isinstance(it, PendingFact) and new_def.target.name == it.statement.operand.name:
            return items[:i] + [new_def] + items[i:]
    return items + [new_def]


def _constituent_operands(arg: Expression, node: DerivationNode) -> list[OperandInfo]:
    seen: set[str] = set()
    out: list[OperandInfo] = []
    for _, nd in positions(arg):
        if isinstance(nd, Operand) and nd.info.name not in seen:
            seen.add(nd.info.name)
            info = nd.info
            if info.kind is not Kind.MATRIX or info.is_factored_form:
                continue
            out.append(info)
    return out


def treat_inverses(
    root: EquationSet,
    cfg: SearchConfig | None = None,
    rules: Sequence[RewriteRule] | None = None,
    registry: Sequence[KernelDescriptor] | None = None,
    tree: DerivationTree | None = None,
) -> tuple[list[DerivationNode], DerivationTree]:
    """Phase-1 breadth-first expansion; leaves have every inverse applied to
    a triangular or diagonal operand."""
    cfg = cfg or SearchConfig()
    rules = rules if rules is not None else builtin_rules()
    registry = registry if registry is not None else default_registry()
    tree = tree or DerivationTree()

    taken = set(root.operands) | {IDENTITY_NAME}
    namer = Namer(taken)
    # keys of auxiliary right-hand sides, canonicalized the same way node
    # states are (so a contraction recognizes the declared operand)
    aux_table: dict[str, tuple[OperandInfo, Expression]] = {}
    aux_rhs = {eq.lhs.name: eq.rhs for eq in root.auxiliaries}
    for eq in root.auxiliaries:
        inlined = eq.rhs
        for _ in range(len(aux_rhs) + 1):
            new = normalize(substitute(inlined, aux_rhs))
            if new.key == inlined.key:
                break
            inlined = new
        canon = simplify(inlined, rules, cfg.variant_cap, cfg.variant_depth)
        aux_table[canon.key] = (eq.lhs, eq.rhs)
    items: list[object] = [
        PendingDef(lhs, rhs) for lhs, rhs in root.inlined_outputs()
    ]
    start = DerivationNode(
        id=0,
        parent=None,
        phase="inverse-treatment",
        items=_simplify_items(items, rules, cfg),
        edge="input",
        namer=namer,
    )
    start.ancestor_keys = frozenset({start.state_key()})
    tree.add(start)

    leaves: list[DerivationNode] = []
    frontier = [start]
    next_id = 1

    def emit(parent: DerivationNode, items, edge, namer=None, factored=None, produced=None, chain=()):
        nonlocal next_id
        if next_id >= cfg.max_nodes:
            tree.truncated = True
            return None
        child = DerivationNode(
            id=next_id,
            parent=parent.id,
            phase="inverse-treatment",
            items=items,
            edge=edge,
            factored=parent.factored | (factored or frozenset()),
            produced_factors=parent.produced_factors | (produced or frozenset()),
            namer=namer or parent.namer,
            definitions=dict(parent.definitions),
            rule_chain=chain,
        )
        child.ancestor_keys = parent.ancestor_keys | {child.state_key()}
        if child.state_key() in parent.ancestor_keys:
            return None  # cycle
        next_id += 1
        tree.add(child)
        return child

    while frontier:
        new_frontier: list[DerivationNode] = []
        for node in frontier:
            offending = _offending_inverses(node.items)
            if not offending:
                node.phase = "leaf"
                leaves.append(node)
                continue
            if len(node.factored) + len(node.definitions) > cfg.max_ledger:
                tree.truncated = True
                continue
            idx, path, inv_node = offending[0]
            arg = inv_node.child

            if isinstance(arg, Operand):
                # factor the operand per its property-table row
                for descr in knowledge.applicable_factorizations(arg.info):
                    if not progress_guard(node, ("factor", arg.info.name)):
                        continue
                    branch_namer = Namer(node.namer.taken)
                    factors, recomposition = knowledge.factor(arg.info, descr, branch_namer)
                    fcost = factorization_cost(descr.name, arg.info.rows, arg.info.cols)
                    fstmt = FactorStatement(descr.name, factors, arg.info, recomposition, fcost)
                    items2 = _substitute_items(node.items, arg.info.name, recomposition)
                    items2 = _insert_fact(items2, PendingFact(fstmt), arg.info.name, node)
                    items2 = _simplify_items(items2, rules, cfg, only=set(fstmt.target_names))
                    child = emit(
                        node,
                        items2,
                        edge=f"{descr.name}: {' '.join(f.name for f in factors)} = {arg.info.name}",
                        namer=branch_namer,
                        factored=frozenset({arg.info.name}),
                        produced=frozenset(f.name for f in factors),
                    )
                    if child:
                        new_frontier.append(child)
                continue

            arg_props = knowledge.infer_properties(arg, node.definitions)
            diagonalish = bool(
                arg_props & {Prop.DIAGONAL, Prop.LOWER_TRIANGULAR, Prop.UPPER_TRIANGULAR}
            )

            # (a) contract the compound to an operand; a compound matching a
            # declared auxiliary definition contracts to that operand (its
            # declared properties win)
            declared = aux_table.get(arg.key)
            contract_namer = Namer(node.namer.taken)
            if declared is not None:
                t_info, def_rhs = declared
            else:
                props = set(arg_props - {Prop.INPUT, Prop.OUTPUT})
                base = "D" if Prop.DIAGONAL in props else "S"
                t_info = make_operand(
                    contract_namer.fresh(base), arg.kind, arg.rows, arg.cols, props
                )
                def_rhs = arg
            items2 = _replace_key_items(node.items, arg.key, operand(t_info))
            items2 = _insert_def(items2, PendingDef(t_info, def_rhs))
            child_key_probe = DerivationNode(
                -1, None, "", items2, "", namer=node.namer
            ).state_key()
            if progress_guard(node, ("contract", child_key_probe)):
                child = emit(
                    node, items2, edge=f"contract: {t_info.name} := {arg.key}",
                    namer=contract_namer,
                )
                if child:
                    child.definitions[t_info.name] = def_rhs
                    new_frontier.append(child)

            if diagonalish:
                continue  # contraction is the only sensible route

            # (b) factor one constituent matrix of the compound
            for info in _constituent_operands(arg, node):
                if not progress_guard(node, ("factor", info.name)):
                    continue
                for descr in knowledge.applicable_factorizations(info):
                    branch_namer = Namer(node.namer.taken)
                    factors, recomposition = knowledge.factor(info, descr, branch_namer)
                    fcost = factorization_cost(descr.name, info.rows, info.cols)
                    fstmt = FactorStatement(descr.name, factors, info, recomposition, fcost)
                    items2 = _substitute_items(node.items, info.name, recomposition)
                    items2 = _insert_fact(items2, PendingFact(fstmt), info.name, node)
                    items2 = _simplify_items(items2, rules, cfg, only=set(fstmt.target_names))
                    child = emit(
                        node,
                        items2,
                        edge=f"{descr.name}: {' '.join(f.name for f in factors)} = {info.name}",
                        namer=branch_namer,
                        factored=frozenset({info.name}),
                        produced=frozenset(f.name for f in factors),
                    )
                    if child:
                        new_frontier.append(child)

            # (c) expose the best common segment touching the inverse argument
            # (skipped when the segment is the whole argument: that is (a))
            expose_namer = Namer(node.namer.taken)
            seg = _best_segment(node, idx, path, arg, expose_namer)
            if seg is not None:
                group, t_info, new_exprs = seg
                items2 = []
                di = 0
                for it in node.items:
                    if isinstance(it, PendingDef):
                        items2.append(PendingDef(it.target, new_exprs[di]))
                        di += 1
                    else:
                        items2.append(it)
                items2 = _insert_def(items2, PendingDef(t_info, group.representative))
                child = emit(
                    node,
                    items2,
                    edge=f"expose: {t_info.name} := {group.representative.key}",
                    namer=expose_namer,
                )
                if child:
                    child.definitions[t_info.name] = group.representative
                    new_frontier.append(child)
        frontier = new_frontier

    return leaves, tree


def _insert_fact(items: list[object], fact: PendingFact, operand_name: str, node) -> list[object]:
    """Insert the factorization after the definition of its operand (if any),
    else before the first item using one of its factors."""
    factor_names = set(fact.statement.target_names)
    insert_at = 0
    for i, it in enumerate(items):
        if isinstance(it, PendingDef) and it.target.name == operand_name:
            insert_at = i + 1
            break
        if isinstance(it, PendingDef) and factor_names & operand_names(it.rhs):
            insert_at = i
            break
    else:
        insert_at = len(items)
        for i, it in enumerate(items):
            if isinstance(it, PendingDef) and factor_names & operand_names(it.rhs):
                insert_at = i
                break
    return items[:insert_at] + [fact] + items[insert_at:]


def _best_segment(node: DerivationNode, item_idx: int, inv_path, arg: Expression, namer: Namer):
    """Pick the most frequent, longest common segment that intersects the
    offending inverse argument; one exposure per step, no branching."""
    defs = [it for it in node.items if isinstance(it, PendingDef)]
    exprs = [d.rhs for d in defs]
    groups = find_common_segments(exprs)
    if not groups:
        return None
    # which PendingDef index is the offending one?
    def_idx = sum(
        1 for it in node.items[:item_idx] if isinstance(it, PendingDef)
    )
    for group in groups:
        touches = any(
            occ.expr_index == def_idx and occ.container[: len(inv_path)] == inv_path
            for occ in group.occurrences
        )
        if not touches:
            continue
        rep = group.representative
        if rep.key == arg.key:
            continue  # exposing the whole argument is the contraction route
        props = knowledge.infer_properties(rep, node.definitions)
        t_info = make_operand(
            namer.fresh("W" if rep.kind is Kind.MATRIX else "t"),
            rep.kind,
            rep.rows,
            rep.cols,
            props - {Prop.INPUT, Prop.OUTPUT},
        )
        new_exprs = expose_segment(exprs, group, t_info)
        return group, t_info, new_exprs
    return None


# ---------------------------------------------------------------------------
# phase 2: kernel mapping


@dataclass
class _MapState:
    items: list[object]
    statements: list[object]
    definitions: dict[str, Expression]
    namer: Namer


def map_kernels(
    leaf: DerivationNode,
    registry: Sequence[KernelDescriptor] | None = None,
    cfg: SearchConfig | None = None,
    tree: DerivationTree | None = None,
) -> list[Algorithm]:
    """Map a phase-1 leaf onto kernel statements.

    Repeatedly: expose common segments (compute once, reference everywhere,
    transposed occurrences included), then match kernels on the first
    unfinished definition, keep only the best precedence group and branch
    over at most ``branch_cap`` of its members.
    """
    registry = registry if registry is not None else default_registry()
    cfg = cfg or SearchConfig()
    outputs = tuple(
        it.target.name for it in leaf.items if isinstance(it, PendingDef) and it.target.has(Prop.OUTPUT)
    )
    inputs = tuple(sorted(leaf.namer.taken)) if leaf.namer else ()

    init = _MapState(
        items=list(leaf.items),
        statements=[],
        definitions=dict(leaf.definitions),
        namer=leaf.namer or Namer(),
    )
    results: list[Algorithm] = []
    seen: set[tuple[str, ...]] = set()

    def finish(state: _MapState):
        alg = Algorithm(list(state.statements), inputs, outputs, node_path=(leaf.id,))
        key = alg.canonical_key()
        if key not in seen:
            seen.add(key)
            results.append(alg)

    def step(state: _MapState):
        if len(results) >= cfg.max_algorithms:
            return
        # find first unfinished item
        items = state.items
        while items:
            it = items[0]
            if isinstance(it, PendingFact):
                state.statements.append(it.statement)
                items = items[1:]
                continue
            break
        state.items = items
        if not items:
            finish(state)
            return

        it = items[0]
        rhs = it.rhs
        atom_cost = COPY.whole(rhs)
        if atom_cost is not None or isinstance(rhs, (Operand, ScalarLiteral)):
            stmt = KernelStatement(
                it.target, rhs, "copy", atom_cost if atom_cost is not None else sp.Integer(0)
            )
            state.statements.append(stmt)
            state.definitions[it.target.name] = rhs
            state.items = items[1:]
            step(state)
            return

        # global CSE over every unfinished rhs
        defs = [x for x in items if isinstance(x, PendingDef)]
        groups = find_common_segments([d.rhs for d in defs])
        if groups:
            group = groups[0]
            rep = group.representative
            props = knowledge.infer_properties(rep, state.definitions)
            t_info = make_operand(
                state.namer.fresh("W" if rep.kind is Kind.MATRIX else "t"),
                rep.kind,
                rep.rows,
                rep.cols,
                props - {Prop.INPUT, Prop.OUTPUT},
            )
            new_exprs = expose_segment([d.rhs for d in defs], group, t_info)
            new_items: list[object] = []
            di = 0
            for x in items:
                if isinstance(x, PendingDef):
                    new_items.append(PendingDef(x.target, new_exprs[di]))
                    di += 1
                else:
                    new_items.append(x)
            state.items = _insert_def(new_items, PendingDef(t_info, rep))
            state.definitions[t_info.name] = rep
            step(state)
            return

        groups_k = kernels_mod.match_kernels(rhs, registry, state.definitions)
        if not groups_k or not groups_k[0]:
            raise NoKernelApplicable(rhs)
        best = groups_k[0][: cfg.branch_cap]
        for match in best:
            branch = _MapState(
                items=list(state.items),
                statements=list(state.statements),
                definitions=dict(state.definitions),
                namer=Namer(state.namer.taken) if len(best) > 1 else state.namer,
            )
            _apply_match(branch, it, match)
            step(branch)

    def _apply_match(state: _MapState, it: PendingDef, match: KernelMatch):
        rhs = it.rhs
        whole = match.path == () and match.span is None
        if whole and not match.transposed:
            target = it.target
            stmt = KernelStatement(target, match.definition, match.descriptor.name, match.cost_expr)
            state.statements.append(stmt)
            state.definitions[target.name] = match.definition
            state.items = [
                x
                for x in state.items
                if not (isinstance(x, PendingDef) and x.target.name == it.target.name)
            ]
            return
        props = knowledge.infer_properties(match.definition, state.definitions)
        base = "t" if match.definition.kind is not Kind.MATRIX else "T"
        t_info = make_operand(
            state.namer.fresh(base),
            match.definition.kind,
            match.definition.rows,
            match.definition.cols,
            props - {Prop.INPUT, Prop.OUTPUT},
        )
        stmt = KernelStatement(t_info, match.definition, match.descriptor.name, match.cost_expr)
        state.statements.append(stmt)
        state.definitions[t_info.name] = match.definition
        repl: Expression = operand(t_info)
        if match.transposed:
            repl = Transpose(repl)
        if match.span is None:
            new_sub: Expression = repl
        else:
            container = subterm_at(rhs, match.path)
            kids = list(container.children)
            kids[match.span[0] : match.span[1]] = [repl]
            new_sub = Times(kids) if len(kids) > 1 else kids[0]
        from .ir import replace_at

        new_rhs = normalize(replace_at(rhs, match.path, new_sub))
        state.items = [
            PendingDef(x.target, new_rhs)
            if isinstance(x, PendingDef) and x.target.name == it.target.name
            else x
            for x in state.items
        ]

    step(init)
    return results


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class GenerationResult:
    algorithms: list[Algorithm]
    tree: DerivationTree
    truncated: bool

    def ranked(self, dims: Mapping[str, int] | None = None) -> list[Algorithm]:
        if not dims:
            return list(self.algorithms)
        return sorted(self.algorithms, key=lambda a: a.cost_at(dims))


DEFAULT_RANKING_DIM = 100


def generate(
    root: EquationSet,
    cfg: SearchConfig | None = None,
    registry: Sequence[KernelDescriptor] | None = None,
    rules: Sequence[RewriteRule] | None = None,
) -> GenerationResult:
    """treat_inverses -> map_kernels on each leaf -> dedup -> rank by cost."""
    cfg = cfg or SearchConfig()
    registry = registry if registry is not None else default_registry()
    rules = rules if rules is not None else builtin_rules()

    leaves, tree = treat_inverses(root, cfg, rules, registry)
    algorithms: list[Algorithm] = []
    seen: set[tuple[str, ...]] = set()
    for leaf in leaves:
        try:
            for alg in map_kernels(leaf, registry, cfg, tree):
                key = alg.canonical_key()
                if key not in seen:
                    seen.add(key)
                    algorithms.append(alg)
        except NoKernelApplicable:
            raise
        if len(algorithms) >= cfg.max_algorithms:
            tree.truncated = True
            break

    dims = dict(cfg.dims or {})
    all_syms: set[str] = set()
    for alg in algorithms:
        all_syms |= {str(s) for s in alg.symbolic_cost.free_symbols}
    for s in all_syms:
        dims.setdefault(s, DEFAULT_RANKING_DIM)
    if dims:
        indexed = sorted(
            enumerate(algorithms), key=lambda t: (t[1].cost_at(dims), t[0])
        )
        algorithms = [a for _, a in indexed]
    return GenerationResult(algorithms, tree, tree.truncated)
