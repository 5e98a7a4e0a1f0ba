"""Minimal fragments: one accumulation or one pointwise assignment each."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import bounds
from .errors import FragmentError, ValidationError
from .expr import (
    Access,
    Binary,
    Constraint,
    IndexExpr,
    IterationSpace,
    Reduction,
    ScalarExpr,
    TensorAccess,
    Unary,
    accesses,
    expr_variables,
    format_constraints,
    format_expr,
    rename_expr,
)
from .frontend import ConstrainedRecurrence, ProgramSpec, resolve_var_extents

ASSIGN = "assign"
REDUCE = "reduce"

_OP_TEXT = {"add": "+=", "min": "min=", "max": "max="}


@dataclass(frozen=True)
class MinimalFragment:
    lhs: TensorAccess
    mode: str
    rhs: ScalarExpr
    constraints: Tuple[Constraint, ...]
    origin: int = 0
    index: int = 0
    op: Optional[str] = None  # reduce op
    reduction_var: Optional[str] = None
    is_alias: bool = False
    var_extents: Tuple[Tuple[str, str], ...] = ()

    @property
    def extent_map(self) -> Dict[str, str]:
        return dict(self.var_extents)

    def variables(self) -> set:
        out = self.lhs.variables() | expr_variables(self.rhs)
        if self.reduction_var:
            out.add(self.reduction_var)
        for c in self.constraints:
            out |= c.variables()
        return out

    def index_variables(self, extents: Iterable[str] = ()) -> set:
        ext = set(extents) | {s for _, s in self.var_extents}
        return {v for v in self.variables() if v not in ext}

    def reads(self) -> List[TensorAccess]:
        return accesses(self.rhs)

    def rename(self, mapping: Mapping[str, IndexExpr]) -> "MinimalFragment":
        red = self.reduction_var
        if red is not None and red in mapping and mapping[red].var is not None:
            red = mapping[red].var
        vext = []
        for name, sym in self.var_extents:
            target = mapping.get(name)
            if target is None:
                vext.append((name, sym))
            elif target.var is not None and target.var not in dict(vext):
                vext.append((target.var, sym))
        return replace(
            self,
            lhs=self.lhs.rename(mapping),
            rhs=rename_expr(self.rhs, mapping),
            constraints=tuple(_dedupe(c.rename(mapping) for c in self.constraints)),
            reduction_var=red,
            var_extents=tuple(dict(vext).items()),
        )

    @property
    def statement_op(self) -> str:
        return "=" if self.mode == ASSIGN else _OP_TEXT[self.op]

    def __str__(self) -> str:
        return f"{self.lhs} {self.statement_op} {format_expr(self.rhs)} : {format_constraints(self.constraints)}"


def _dedupe(items):
    out = []
    for item in items:
        if item not in out:
            out.append(item)
    return out


class AliasNamer:
    """Alias tensors are named output + reduction position (1-based).

    The same position in two recurrences for one output shares a name, so
    the diagonal and off-diagonal Cholesky accumulators are both ``L1``.
    """

    def __init__(self, taken: Iterable[str] = ()):
        self.taken = set(taken)
        self.ops: Dict[str, Tuple[str, str, int]] = {}

    def name(self, output: str, position: int, op: str, rank: int) -> str:
        n = position
        while True:
            candidate = f"{output}{n}"
            known = self.ops.get(candidate)
            if candidate not in self.taken and (known is None or known == (output, op, rank)):
                self.ops[candidate] = (output, op, rank)
                return candidate
            n += 1


def _pick_constraints(constraints: Sequence[Constraint], allowed: set, forbidden: set) -> Tuple[Constraint, ...]:
    out = []
    for c in constraints:
        vs = c.variables()
        if vs & forbidden:
            continue
        if vs <= allowed:
            out.append(c)
    return tuple(out)


def generate_fragments(rec: ConstrainedRecurrence, origin: int = 0, namer: Optional[AliasNamer] = None,
                       extents: Mapping[str, int] = None, default_extent: Optional[str] = None,
                       start_index: int = 0) -> List[MinimalFragment]:
    """Split ``rec`` bottom-up into reduction fragments and a residual."""
    extents = dict(extents or {})
    if namer is None:
        namer = AliasNamer(t.tensor for t in [rec.lhs] + accesses(rec.rhs))
    ext_names = set(extents)
    vext = resolve_var_extents(rec.variables(), rec.constraints, extents, default_extent)
    red_vars = rec.reduction_vars()
    frags: List[MinimalFragment] = []
    counter = [0]

    def make(lhs, mode, rhs, op=None, rvar=None, alias=False, enclosing=()):
        used = lhs.variables() | expr_variables(rhs) | ({rvar} if rvar else set())
        used |= set(enclosing)
        forbidden = (red_vars - used)
        cs = _pick_constraints(rec.constraints, used | ext_names, forbidden)
        frag = MinimalFragment(lhs, mode, rhs, cs, origin, start_index + len(frags), op, rvar, alias,
                               tuple((v, vext[v]) for v in sorted(used) if v in vext))
        frags.append(frag)
        return frag

    def visit(expr: ScalarExpr, enclosing: Tuple[str, ...]) -> ScalarExpr:
        if isinstance(expr, Reduction):
            if expr.var in enclosing:
                raise FragmentError(f"reduction variable {expr.var} shadows an enclosing reduction")
            body = visit(expr.body, enclosing + (expr.var,))
            counter[0] += 1
            indices = rec.lhs.indices + tuple(IndexExpr(v) for v in enclosing)
            name = namer.name(rec.lhs.tensor, counter[0], expr.op, len(indices))
            alias = TensorAccess(name, indices)
            make(alias, REDUCE, body, expr.op, expr.var, alias=True, enclosing=enclosing)
            return Access(alias)
        if isinstance(expr, Unary):
            return Unary(expr.op, visit(expr.child, enclosing))
        if isinstance(expr, Binary):
            return Binary(expr.op, visit(expr.left, enclosing), visit(expr.right, enclosing))
        return expr

    residual = visit(rec.rhs, ())
    last = frags[-1] if frags else None
    if (last is not None and isinstance(residual, Access) and residual.access == last.lhs
            and last.op == "add"):
        # reduce straight into the output, no alias needed
        frags[-1] = replace(last, lhs=rec.lhs, is_alias=False)
    else:
        make(rec.lhs, ASSIGN, residual)
    return frags


def eliminate_equalities(frag: MinimalFragment, ordering: Sequence[str]) -> MinimalFragment:
    """Substitute away variables fixed by ``u = v + c`` constraints.

    The variable later in the ordering is replaced by the earlier one.
    """
    pos = {v: n for n, v in enumerate(ordering)}
    while True:
        eq = next((c for c in frag.constraints if c.relation == "eq"), None)
        if eq is None:
            return frag
        a, b = eq.lhs, eq.rhs
        if a.var is None or b.var is None:
            raise ValidationError(f"equality {eq} fixes a variable to a constant; use an init: line")
        if a.var == b.var:
            if a.offset != b.offset:
                raise ValidationError(f"equality {eq} can never hold")
            frag = replace(frag, constraints=tuple(c for c in frag.constraints if c != eq))
            continue
        if pos.get(a.var, len(pos)) > pos.get(b.var, len(pos)):
            mapping = {a.var: b.shift(-a.offset)}
        else:
            mapping = {b.var: a.shift(-b.offset)}
        rest = tuple(c for c in frag.constraints if c != eq)
        frag = replace(frag, constraints=rest).rename(mapping)


def iteration_space(var: str, constraints: Sequence[Constraint], extents, scope: Optional[Iterable[str]] = None,
                    var_extents: Optional[Mapping[str, str]] = None) -> IterationSpace:
    """Tightest space of ``var``; ``extents`` maps extent symbols to sizes."""
    extents = dict(extents) if isinstance(extents, Mapping) else {e: 0 for e in extents}
    if var_extents is None:
        names = {var} | set().union(*(c.variables() for c in constraints)) if constraints else {var}
        default = "N" if "N" in extents else (next(iter(extents)) if extents else None)
        var_extents = resolve_var_extents(names, constraints, extents, default)
    return bounds.iteration_space(var, constraints, var_extents, scope, extents)


def skeleton_constraints(spec: ProgramSpec) -> Tuple[Constraint, ...]:
    """Constraints that shape the loop nest before any fragment is placed."""
    recs = spec.recurrences
    base = [c for c in recs[0].constraints if c.relation != "eq"]
    constrained = set().union(*(c.variables() for c in base)) if base else set()
    for rec in recs[1:]:
        extra = [c for c in rec.constraints if c.relation != "eq" and not (c.variables() & constrained)]
        extra = [c for c in extra if (c.variables() - set(spec.extents))]
        base.extend(extra)
        for c in extra:
            constrained |= c.variables()
    return tuple(_dedupe(base))


def skeleton_var_extents(spec: ProgramSpec) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for rec in spec.recurrences:
        for v, s in spec.var_extents(rec).items():
            out.setdefault(v, s)
    return out


def skeleton_space(spec: ProgramSpec, v: str) -> IterationSpace:
    ordering = spec.schedule.ordering
    scope = ordering[:ordering.index(v)]
    return bounds.loop_space(v, skeleton_constraints(spec), skeleton_var_extents(spec), scope, spec.extents)


def fragment_space(frag: MinimalFragment, u: str, scope: Iterable[str], extents: Iterable[str]) -> IterationSpace:
    return bounds.loop_space(u, frag.constraints, frag.extent_map, scope, extents)


def substitute_if_isomorphic(frag: MinimalFragment, u: str, v: str, scope_space: IterationSpace,
                             scope: Iterable[str] = (), extents: Iterable[str] = ()) -> MinimalFragment:
    """Rename ``u`` to ``v`` when u's space in ``frag`` equals ``scope_space``."""
    if u not in frag.variables() or v in frag.variables():
        return frag
    space = fragment_space(frag, u, scope, extents)
    if space.lowers == scope_space.lowers and space.uppers == scope_space.uppers:
        return frag.rename({u: IndexExpr(v)})
    return frag


def _renames(frag: MinimalFragment, spec: ProgramSpec, spaces) -> List[MinimalFragment]:
    """Every single isomorphic renaming applicable to ``frag``, earliest u then earliest v."""
    ordering = list(spec.schedule.ordering)
    used = frag.index_variables(spec.extents)
    out = []
    for u in sorted((x for x in used if x in ordering), key=ordering.index):
        for v in ordering[:ordering.index(u)]:
            if v in used:
                continue
            new = substitute_if_isomorphic(frag, u, v, spaces[v], ordering[:ordering.index(v)], spec.extents)
            if new is not frag:
                out.append(new)
    return out


def normalize(frag: MinimalFragment, spec: ProgramSpec) -> MinimalFragment:
    """Equality elimination, then isomorphic renaming to a fixpoint.

    When several renamings apply, the earliest variable ``u`` in the
    ordering is renamed to the earliest isomorphic ``v``.
    """
    frag = eliminate_equalities(frag, spec.schedule.ordering)
    spaces = {v: skeleton_space(spec, v) for v in spec.schedule.ordering}
    while True:
        options = _renames(frag, spec, spaces)
        if not options:
            return frag
        frag = options[0]


def normalization_variants(frag: MinimalFragment, spec: ProgramSpec, limit: int = 8) -> List[MinimalFragment]:
    """All renaming fixpoints reachable from ``frag``; the greedy one comes first."""
    frag = eliminate_equalities(frag, spec.schedule.ordering)
    spaces = {v: skeleton_space(spec, v) for v in spec.schedule.ordering}
    found: List[MinimalFragment] = []
    seen = set()

    def explore(f: MinimalFragment) -> None:
        if len(found) >= limit or str(f) in seen:
            return
        seen.add(str(f))
        options = _renames(f, spec, spaces)
        if not options:
            found.append(f)
        for g in options:
            explore(g)

    explore(frag)
    return found


def program_fragments(spec: ProgramSpec, normalized: bool = True) -> List[MinimalFragment]:
    """All fragments of a validated program in generation order."""
    namer = AliasNamer(spec.tensors())
    default = spec.default_extent()
    out: List[MinimalFragment] = []
    for n, rec in enumerate(spec.recurrences):
        out.extend(generate_fragments(rec, n, namer, spec.extents, default, start_index=len(out)))
    if normalized:
        out = [normalize(f, spec) for f in out]
    return out


def alias_identity(op: str) -> float:
    return {"add": 0.0, "min": float("inf"), "max": float("-inf")}[op]


def substitute_aliases(residual: ScalarExpr, alias_exprs: Mapping[str, ScalarExpr]) -> ScalarExpr:
    """Inline alias accesses back into ``residual`` (used to check round trips)."""
    def fn(acc: TensorAccess) -> ScalarExpr:
        if acc.tensor in alias_exprs:
            return alias_exprs[acc.tensor]
        return Access(acc)
    from .expr import map_accesses
    return map_accesses(residual, fn)
