"""Recurrence Index Notation: loop skeleton, readiness, assumptions and greedy placement."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from . import bounds
from .bounds import DifferenceSystem, extent_facts, loop_constraints, loop_space, same_domain
from .depgraph import build_dag, predecessor_fragments, topological_order
from .errors import CompileError, DependencyCycleError, OrderingImpossible
from .expr import Constraint, IndexExpr, IterationSpace, ScalarExpr, TensorAccess, format_expr
from .fragments import (
    ASSIGN,
    REDUCE,
    MinimalFragment,
    normalization_variants,
    program_fragments,
    skeleton_constraints,
    skeleton_var_extents,
)
from .frontend import ProgramSpec

FOR = "for"
FORALL = "forall"


# --------------------------------------------------------------------------- #
# Regions and markers


@dataclass(frozen=True)
class Exact:
    index: IndexExpr

    def __str__(self) -> str:
        return str(self.index)


@dataclass(frozen=True)
class All:
    def __str__(self) -> str:
        return ":"


@dataclass(frozen=True)
class Prefix:
    """Every index strictly below ``bound``."""

    bound: IndexExpr

    def __str__(self) -> str:
        return f":{self.bound}"


@dataclass(frozen=True)
class Range:
    """Indices in ``[lo, hi)``."""

    lo: IndexExpr
    hi: IndexExpr

    def __str__(self) -> str:
        return f"{self.lo}:{self.hi}"


RegionIndex = Union[Exact, All, Prefix, Range]


def _region_vars(r: RegionIndex) -> set:
    if isinstance(r, Exact):
        exprs = [r.index]
    elif isinstance(r, Prefix):
        exprs = [r.bound]
    elif isinstance(r, Range):
        exprs = [r.lo, r.hi]
    else:
        exprs = []
    return {e.var for e in exprs if e.var is not None}


@dataclass(frozen=True)
class ReadinessMarker:
    tensor: str
    region: Tuple[RegionIndex, ...]

    def variables(self) -> set:
        out = set()
        for r in self.region:
            out |= _region_vars(r)
        return out

    def __str__(self) -> str:
        return f"{self.tensor}({','.join(str(r) for r in self.region)})"


def region_constraints(access: TensorAccess, region: Sequence[RegionIndex]) -> List[Constraint]:
    """Constraints stating that ``access`` lies in ``region``."""
    out = []
    for ix, r in zip(access.indices, region):
        if isinstance(r, Exact):
            out.append(Constraint(ix, "eq", r.index))
        elif isinstance(r, Prefix):
            out.append(Constraint(ix, "lt", r.bound))
        elif isinstance(r, Range):
            out.append(Constraint(r.lo, "le", ix))
            out.append(Constraint(ix, "lt", r.hi))
    return out


def covers(marker: ReadinessMarker, access: TensorAccess, constraints, extents=()) -> bool:
    """Does ``marker`` guarantee ``access`` is ready, given ``constraints``?

    ``constraints`` is either a list of Constraint or a DifferenceSystem.
    """
    if marker.tensor != access.tensor or len(marker.region) != access.rank:
        return False
    system = constraints if isinstance(constraints, DifferenceSystem) else DifferenceSystem(constraints, extents)
    for ix, r in zip(access.indices, marker.region):
        if isinstance(r, All):
            continue
        if isinstance(r, Exact):
            ok = system.implies_eq(ix, r.index)
        elif isinstance(r, Prefix):
            ok = system.implies_lt(ix, r.bound)
        else:
            ok = system.implies_le(r.lo, ix) and system.implies_lt(ix, r.hi)
        if not ok:
            return False
    return True


# --------------------------------------------------------------------------- #
# Program tree


@dataclass(eq=False)
class Loop:
    var: str
    space: IterationSpace
    kind: str = FORALL
    body: list = field(default_factory=list)
    skeleton: bool = False
    parallel: bool = False
    serial: bool = False  # may never run concurrently, even as a forall

    def constraints(self) -> List[Constraint]:
        return loop_constraints(self.var, self.space)


@dataclass(eq=False)
class Assign:
    lhs: TensorAccess
    mode: str
    rhs: ScalarExpr
    op: Optional[str] = None
    fragment: Optional[MinimalFragment] = None

    @property
    def statement_op(self) -> str:
        return "=" if self.mode == ASSIGN else {"add": "+=", "min": "min=", "max": "max="}[self.op]

    def __str__(self) -> str:
        return f"{self.lhs} {self.statement_op} {format_expr(self.rhs)}"


@dataclass(eq=False)
class Readiness:
    marker: ReadinessMarker
    source: str = "place"  # "place" or "assume"
    primary: bool = True  # first sound candidate of its assumption
    completes: Optional[str] = None  # sits at the tail of this reduction loop's body


RinStmt = Union[Loop, Assign, Readiness]


@dataclass(frozen=True)
class Location:
    path: Tuple[int, ...]
    index: int


@dataclass(eq=False)
class RinProgram:
    body: list
    assumptions: Dict[str, List[ReadinessMarker]] = field(default_factory=dict)
    ordering: Tuple[str, ...] = ()
    extents: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()
    aliases: Dict[str, Tuple[str, str]] = field(default_factory=dict)  # alias -> (output, op)
    restrictions: List[Tuple[MinimalFragment, Loop]] = field(default_factory=list)
    var_extents: Dict[str, str] = field(default_factory=dict)
    timestep_loops: List[str] = field(default_factory=list)

    def block(self, path: Sequence[int]) -> list:
        body = self.body
        for k in path:
            body = body[k].body
        return body

    def loops_on(self, path: Sequence[int]) -> List[Loop]:
        out, body = [], self.body
        for k in path:
            out.append(body[k])
            body = body[k].body
        return out

    def walk(self) -> Iterator[Tuple[RinStmt, Tuple[Loop, ...]]]:
        """Every statement with its enclosing loops, in program order."""
        def rec(body, loops):
            for item in body:
                yield item, loops
                if isinstance(item, Loop):
                    yield from rec(item.body, loops + (item,))
        yield from rec(self.body, ())

    def assigns(self) -> List[Assign]:
        return [s for s, _ in self.walk() if isinstance(s, Assign)]

    def loops(self) -> List[Loop]:
        return [s for s, _ in self.walk() if isinstance(s, Loop)]

    def markers(self) -> List[Readiness]:
        return [s for s, _ in self.walk() if isinstance(s, Readiness)]

    def locate(self, target: RinStmt) -> Tuple[Location, Tuple[Loop, ...]]:
        def rec(body, path, loops):
            for k, item in enumerate(body):
                if item is target:
                    return Location(path, k), loops
                if isinstance(item, Loop):
                    found = rec(item.body, path + (k,), loops + (item,))
                    if found:
                        return found
            return None
        found = rec(self.body, (), ())
        if found is None:
            raise KeyError("statement not in program")
        return found

    def written_tensors(self) -> List[str]:
        out = []
        for s in self.assigns():
            if s.lhs.tensor not in out:
                out.append(s.lhs.tensor)
        return out


def print_rin(prog: RinProgram) -> str:
    lines: List[str] = []

    def rec(body, depth):
        pad = "  " * depth
        for item in body:
            if isinstance(item, Loop):
                lines.append(f"{pad}{item.kind} {item.space.header(item.var)}")
                rec(item.body, depth + 1)
            elif isinstance(item, Assign):
                lines.append(f"{pad}{item}")
            else:
                lines.append(f"{pad}//{item.marker} ready")

    rec(prog.body, 0)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# Skeleton and readiness


def build_skeleton(ordering: Sequence[str], constraints: Sequence[Constraint], var_extents: Mapping[str, str],
                   extents: Sequence[str] = ()) -> RinProgram:
    """One nest of forall loops in schedule order."""
    body: list = []
    prog = RinProgram(body, ordering=tuple(ordering), extents=tuple(extents), var_extents=dict(var_extents))
    current = body
    for n, v in enumerate(ordering):
        loop = Loop(v, loop_space(v, constraints, var_extents, ordering[:n], extents), skeleton=True)
        current.append(loop)
        current = loop.body
    return prog


def lift_marker(marker: ReadinessMarker, loop: Loop) -> Optional[ReadinessMarker]:
    """The part of ``marker`` still known ready after ``loop`` finishes.

    A marker naming the loop variable in exactly one Exact dimension widens
    to the loop's range; any other use of the variable is dropped.
    """
    v = loop.var
    hits = [d for d, r in enumerate(marker.region) if v in _region_vars(r)]
    if len(hits) != 1:
        return None
    d = hits[0]
    r = marker.region[d]
    if not isinstance(r, Exact) or len(loop.space.lowers) != 1 or len(loop.space.uppers) != 1:
        return None
    c = r.index.offset
    new = Range(loop.space.lowers[0].shift(c), loop.space.uppers[0].shift(c))
    return ReadinessMarker(marker.tensor, marker.region[:d] + (new,) + marker.region[d + 1:])


def _lifted(loop: Loop) -> List[Tuple[ReadinessMarker, Readiness]]:
    inner: List[Tuple[ReadinessMarker, Readiness]] = []
    out = []
    for item in loop.body:
        if isinstance(item, Readiness):
            if item.completes == loop.var:
                # the reduction is finished once its loop exits
                out.append((item.marker, item))
            else:
                inner.append((item.marker, item))
        elif isinstance(item, Loop):
            inner.extend(_lifted(item))
    for m, src in inner:
        lifted = lift_marker(m, loop)
        if lifted is not None:
            out.append((lifted, src))
    return out


def visible_markers(prog: RinProgram, p: Location, lift: bool = True) -> List[Tuple[ReadinessMarker, Readiness]]:
    body = prog.body
    out: List[Tuple[ReadinessMarker, Readiness]] = []
    for depth in range(len(p.path) + 1):
        stop = p.path[depth] if depth < len(p.path) else p.index
        for item in body[:stop]:
            if isinstance(item, Readiness):
                if item.completes is None:
                    out.append((item.marker, item))
            elif lift and isinstance(item, Loop):
                out.extend(_lifted(item))
            elif isinstance(item, Loop):
                out.extend((m.marker, m) for m in item.body
                           if isinstance(m, Readiness) and m.completes == item.var)
        if depth < len(p.path):
            body = body[p.path[depth]].body
    return out


def ready_at_location(prog: RinProgram, p: Location) -> List[ReadinessMarker]:
    """Markers in lexical scope of ``p`` (earlier in program order, enclosing loops shared)."""
    return [m for m, _ in visible_markers(prog, p, lift=False)]


# --------------------------------------------------------------------------- #
# Placement


@dataclass
class Placement:
    location: Location
    fresh: List[Tuple[str, IterationSpace]]
    loops: Tuple[Loop, ...]


@dataclass
class _State:
    spec: ProgramSpec
    prog: RinProgram
    frags: List[MinimalFragment]
    written: List[str]
    chain: List[Tuple[str, Loop]] = field(default_factory=list)
    required: Dict[int, List[Loop]] = field(default_factory=dict)
    placed: Dict[int, Assign] = field(default_factory=dict)

    @property
    def extents(self) -> List[str]:
        return list(self.spec.extents)


def _slots(body: list, path: Tuple[int, ...], loops: Tuple[Loop, ...]):
    for idx in range(len(body) + 1):
        yield path, idx, loops
        if idx < len(body) and isinstance(body[idx], Loop):
            yield from _slots(body[idx].body, path + (idx,), loops + (body[idx],))


def dependencies(frag: MinimalFragment, written: Sequence[str]) -> List[TensorAccess]:
    out = []
    for acc in frag.reads():
        if acc.tensor in written and acc not in out:
            out.append(acc)
    return out


def _statement_system(frag: MinimalFragment, nest: Sequence[Constraint], extents) -> DifferenceSystem:
    return DifferenceSystem(list(frag.constraints) + list(nest) + extent_facts(frag.extent_map), extents)


def placement_location(frag: MinimalFragment, prog: RinProgram, written: Sequence[str],
                       required: Sequence[Loop] = (), extents: Sequence[str] = (),
                       report: Optional[list] = None) -> Optional[Placement]:
    """Earliest slot where ``frag`` fits the loop nest and all its dependencies are ready."""
    ordering = list(prog.ordering)
    extents = list(extents) or list(prog.extents)
    fvars = frag.index_variables(extents)
    deps = dependencies(frag, written)
    frag_domain = list(frag.constraints) + extent_facts(frag.extent_map)
    def attempt(path, idx, loops) -> Optional[Placement]:
        scope = [l.var for l in loops]
        if not set(scope) <= fvars:
            return None
        if any(all(r is not l for l in loops) for r in required):
            return None
        missing = [v for v in ordering if v in fvars and v not in scope]
        if scope and missing and ordering.index(missing[0]) < ordering.index(scope[-1]):
            return None
        nest: List[Constraint] = []
        for l in loops:
            nest.extend(l.constraints())
        fresh = []
        opened = list(scope)
        for v in missing:
            space = loop_space(v, frag.constraints, frag.extent_map, opened, extents)
            fresh.append((v, space))
            nest.extend(loop_constraints(v, space))
            opened.append(v)
        if not same_domain(nest, frag_domain, extents):
            return None
        system = _statement_system(frag, nest, extents)
        visible = visible_markers(prog, Location(path, idx))
        missing_deps = [d for d in deps if not any(covers(m, d, system) for m, _ in visible)]
        if missing_deps:
            if report is not None and not report:
                report.extend(missing_deps)
            return None
        body = prog.block(path)
        while idx < len(body) and not isinstance(body[idx], Loop):
            idx += 1
        if fresh and idx < len(body) and body[idx].var == fresh[0][0] and body[idx].space == fresh[0][1]:
            # an identical loop follows: join its body instead of opening a twin
            inner = attempt(path + (idx,), len(body[idx].body), loops + (body[idx],))
            if inner is not None:
                return inner
        return Placement(Location(path, idx), fresh, loops)

    if any(v not in ordering for v in fvars):
        return None
    for path, idx, loops in _slots(prog.body, (), ()):
        found = attempt(path, idx, tuple(loops))
        if found is not None:
            return found
    return None


def _insert(state: _State, frag: MinimalFragment, placement: Placement) -> Assign:
    prog = state.prog
    stmt = Assign(frag.lhs, frag.mode, frag.rhs, frag.op, frag)
    body = prog.block(placement.location.path)
    at = placement.location.index
    chain: List[Tuple[list, int, Optional[Loop]]] = []  # (block, index, loop placed there)
    target, target_at = body, at
    for v, space in placement.fresh:
        loop = Loop(v, space)
        target.insert(target_at, loop)
        chain.append((target, target_at, loop))
        target, target_at = loop.body, 0
    target.insert(target_at, stmt)
    region_scope = [l.var for l in placement.loops] + [v for v, _ in placement.fresh]
    if frag.mode == ASSIGN:
        marker = ReadinessMarker(frag.lhs.tensor, tuple(Exact(ix) for ix in frag.lhs.indices))
        target.insert(target_at + 1, Readiness(marker))
    else:
        r = frag.reduction_var
        # find the reduction loop and the block holding it
        holders: List[Tuple[list, int, Loop]] = []
        blk = prog.body
        for k in placement.location.path:
            holders.append((blk, k, blk[k]))
            blk = blk[k].body
        holders.extend(chain)
        pos = next(n for n, (_, _, l) in enumerate(holders) if l.var == r)
        holder, k, loop = holders[pos]
        outer = set(region_scope[:pos])
        region = tuple(Exact(ix) if (ix.var is None or ix.var in outer) else All() for ix in frag.lhs.indices)
        if loop.kind == FOR and target is loop.body:
            # serial reduction: mark completion at the tail of the loop body
            target.insert(target_at + 1, Readiness(ReadinessMarker(frag.lhs.tensor, region), completes=r))
            state.placed[id(frag)] = stmt
            return stmt
        k = holder.index(loop) + 1
        while k < len(holder) and isinstance(holder[k], Readiness) and holder[k].source == "place":
            k += 1
        holder.insert(k, Readiness(ReadinessMarker(frag.lhs.tensor, region)))
    state.placed[id(frag)] = stmt
    return stmt


# --------------------------------------------------------------------------- #
# Inductive assumptions


def _first_loop(body: list, var: str, skeleton: bool = False) -> Optional[Loop]:
    for item in body:
        if isinstance(item, Loop):
            if item.var == var and (item.skeleton or not skeleton):
                return item
            found = _first_loop(item.body, var, skeleton)
            if found:
                return found
    return None


def _prime(frag: MinimalFragment, extents) -> Tuple[MinimalFragment, Dict[str, IndexExpr]]:
    mapping = {v: IndexExpr(v + "'") for v in frag.index_variables(extents)}
    return frag.rename(mapping), mapping


def _candidates(v: str, parents: Sequence[str], writers: Sequence[MinimalFragment]) -> List[Tuple[RegionIndex, ...]]:
    out: List[Tuple[RegionIndex, ...]] = []

    def other(ix: IndexExpr) -> RegionIndex:
        return Exact(ix) if ix.var in parents else All()

    for w in writers:
        if any(ix.var == v for ix in w.lhs.indices):
            out.append(tuple(Prefix(ix) if ix.var == v else other(ix) for ix in w.lhs.indices))
    for w in writers:
        if w.mode != REDUCE or w.reduction_var != v:
            continue
        for b in bounds.upper_bounds(v, w.constraints):
            dims = [d for d, ix in enumerate(w.lhs.indices) if b.var is not None and ix.var == b.var]
            if not dims:
                continue
            region = []
            for d, ix in enumerate(w.lhs.indices):
                if d in dims:
                    # complete once every r < u + c has been visited, i.e. u + c <= v
                    region.append(Prefix(IndexExpr(v, 1 - b.offset + ix.offset)))
                else:
                    region.append(other(ix))
            out.append(tuple(region))
    unique = []
    for c in out:
        if c not in unique:
            unique.append(c)
    return unique


def _sound(state: _State, region: Tuple[RegionIndex, ...], tensor: str, writers: Sequence[MinimalFragment],
           chain: Sequence[Tuple[str, Loop]], scope_cs: Sequence[Constraint]) -> Optional[List[MinimalFragment]]:
    """Check the strong-induction claim; returns writers to restrict, or None if unsound."""
    extents = state.extents
    chain_vars = [v for v, _ in chain]
    to_restrict = []
    for w in writers:
        wp, mapping = _prime(w, extents)
        base = list(scope_cs) + list(wp.constraints) + extent_facts(wp.extent_map)
        base += region_constraints(wp.lhs, region)
        if not DifferenceSystem(base, extents).feasible():
            continue

        def primed(x):
            return mapping.get(x, IndexExpr(x + "'"))

        def later_exists(depth: int, inclusive_last: bool) -> bool:
            """Some instance of w at or after the current point among the first ``depth`` chain loops?"""
            for m in range(depth):
                cs = [Constraint(primed(chain_vars[q]), "eq", IndexExpr(chain_vars[q])) for q in range(m)]
                cs.append(Constraint(IndexExpr(chain_vars[m]), "lt", primed(chain_vars[m])))
                if DifferenceSystem(base + cs, extents).feasible():
                    return True
            if inclusive_last:
                cs = [Constraint(primed(chain_vars[q]), "eq", IndexExpr(chain_vars[q])) for q in range(depth)]
                if DifferenceSystem(base + cs, extents).feasible():
                    return True
            return False

        stmt = state.placed.get(id(w))
        if stmt is None:
            if not set(chain_vars) <= w.index_variables(extents):
                return None
            # parents equal and v' >= v
            if later_exists(len(chain_vars) - 1, False):
                return None
            cs = [Constraint(primed(chain_vars[q]), "eq", IndexExpr(chain_vars[q])) for q in range(len(chain_vars) - 1)]
            cs.append(Constraint(IndexExpr(chain_vars[-1]), "le", primed(chain_vars[-1])))
            if DifferenceSystem(base + cs, extents).feasible():
                return None
            to_restrict.append(w)
            continue
        _, anc = state.prog.locate(stmt)
        depth = 0
        while depth < len(chain) and any(l is chain[depth][1] for l in anc):
            depth += 1
        if depth == len(chain):
            if later_exists(depth - 1, False):
                return None
            cs = [Constraint(primed(chain_vars[q]), "eq", IndexExpr(chain_vars[q])) for q in range(depth - 1)]
            cs.append(Constraint(IndexExpr(chain_vars[-1]), "le", primed(chain_vars[-1])))
            if DifferenceSystem(base + cs, extents).feasible():
                return None
            continue
        before = _precedes(state.prog, stmt, chain[depth][1])
        if later_exists(depth, not before):
            return None
    return to_restrict


def _precedes(prog: RinProgram, a: RinStmt, b: RinStmt) -> bool:
    order = [s for s, _ in prog.walk()]
    ia = next(n for n, s in enumerate(order) if s is a)
    ib = next(n for n, s in enumerate(order) if s is b)
    return ia < ib


def make_assumption(state: _State) -> bool:
    """Assume over the next variable in schedule order; False when none can be made."""
    spec, prog = state.spec, state.prog
    ordering = list(prog.ordering)
    budget = max(spec.ranks()[t] for t in spec.outputs)
    n = len(state.chain)
    if n >= budget or n >= len(ordering):
        return False
    v = ordering[n]
    inside = state.chain[-1][1].body if state.chain else prog.body
    # base-case loops opened before the main nest never carry the induction
    loop = _first_loop(inside, v, skeleton=True) or _first_loop(inside, v)
    if loop is None:
        return False
    _, anc = prog.locate(loop)
    parents = [u for u, _ in state.chain]
    chain = state.chain + [(v, loop)]
    scope_cs: List[Constraint] = []
    for l in list(anc) + [loop]:
        scope_cs.extend(l.constraints())
    scope_cs += extent_facts({l.var: prog.var_extents[l.var] for l in list(anc) + [loop] if l.var in prog.var_extents})
    markers = []
    for tensor in state.written:
        writers = [f for f in state.frags if f.lhs.tensor == tensor]
        first = True
        for region in _candidates(v, parents, writers):
            restrict = _sound(state, region, tensor, writers, chain, scope_cs)
            if restrict is None:
                continue
            for w in restrict:
                state.required.setdefault(id(w), []).append(loop)
                prog.restrictions.append((w, loop))
            markers.append((ReadinessMarker(tensor, region), first))
            first = False
    at = 0
    while at < len(loop.body) and isinstance(loop.body[at], Readiness) and loop.body[at].source == "assume":
        at += 1
    for m, primary in markers:
        loop.body.insert(at, Readiness(m, "assume", primary))
        at += 1
    prog.assumptions[v] = [m for m, _ in markers]
    loop.kind = FOR
    state.chain = chain
    return True


# --------------------------------------------------------------------------- #
# Lowering driver


def _written_order(spec: ProgramSpec, frags: Sequence[MinimalFragment]) -> List[str]:
    out = [t for t in spec.outputs]
    for f in frags:
        if f.lhs.tensor not in out:
            out.append(f.lhs.tensor)
    return out


def _prune_markers(prog: RinProgram, written: Sequence[str]) -> None:
    used = set()
    for stmt, _ in list(prog.walk()):
        if not isinstance(stmt, Assign):
            continue
        loc, loops = prog.locate(stmt)
        nest = [c for l in loops for c in l.constraints()]
        system = _statement_system(stmt.fragment, nest, prog.extents)
        visible = visible_markers(prog, loc)
        for dep in dependencies(stmt.fragment, written):
            # credit the first covering marker, preferring primary assumptions
            ranked = sorted(visible, key=lambda pair: not pair[1].primary)
            for m, src in ranked:
                if covers(m, dep, system):
                    used.add(id(src))
                    break

    def keep(item) -> bool:
        if not isinstance(item, Readiness):
            return True
        if id(item) in used:
            return True
        return item.source == "assume" and item.primary and item.marker.tensor in prog.outputs

    def rec(body):
        body[:] = [item for item in body if keep(item)]
        for item in body:
            if isinstance(item, Loop):
                rec(item.body)
    rec(prog.body)


def _drop_empty_loops(prog: RinProgram) -> None:
    def has_assign(loop: Loop) -> bool:
        return any(isinstance(s, Assign) or (isinstance(s, Loop) and has_assign(s)) for s in loop.body)

    def rec(body):
        body[:] = [item for item in body if not isinstance(item, Loop) or has_assign(item)]
        for item in body:
            if isinstance(item, Loop):
                rec(item.body)
    rec(prog.body)


def _lower_once(spec: ProgramSpec, frags: List[MinimalFragment]) -> RinProgram:
    dag = build_dag(frags)
    order = topological_order(dag)
    written = _written_order(spec, frags)
    prog = build_skeleton(spec.schedule.ordering, skeleton_constraints(spec), skeleton_var_extents(spec),
                          list(spec.extents))
    prog.outputs = tuple(spec.outputs)
    for f in frags:
        if f.is_alias:
            prog.aliases[f.lhs.tensor] = (spec.recurrences[f.origin].lhs.tensor, f.op)
        prog.var_extents.update(f.extent_map)
    state = _State(spec, prog, list(frags), written)
    pending = list(order)
    while pending:
        placed_one = False
        for frag in pending:
            if any(id(p) not in state.placed for p in predecessor_fragments(dag, frag)):
                continue
            where = placement_location(frag, prog, written, state.required.get(id(frag), ()), state.extents)
            if where is not None:
                _insert(state, frag, where)
                pending.remove(frag)
                placed_one = True
                break
        if placed_one:
            continue
        if make_assumption(state):
            continue
        first = pending[0]
        report: list = []
        placement_location(first, prog, written, state.required.get(id(first), ()), state.extents, report)
        raise OrderingImpossible(first, report)
    _drop_empty_loops(prog)
    _prune_markers(prog, written)
    problems = verify_rin(prog, spec)
    if problems:
        raise OrderingImpossible(problems[0], [])
    return prog


def lower(spec: ProgramSpec, max_variants: int = 256) -> RinProgram:
    """Greedy placement of every fragment; raises OrderingImpossible when no program exists.

    If the default normalization cannot be placed, alternative isomorphic
    renamings are tried in a fixed order.
    """
    raw = program_fragments(spec, normalized=False)
    variants = [normalization_variants(f, spec) for f in raw]
    first_error: Optional[CompileError] = None
    for combo in itertools.islice(itertools.product(*variants), max_variants):
        try:
            return _lower_once(spec, list(combo))
        except (OrderingImpossible, DependencyCycleError) as exc:
            if first_error is None:
                first_error = exc
    assert first_error is not None
    raise first_error


# --------------------------------------------------------------------------- #
# Independent verification


def _race(prog: RinProgram, loop: Loop, writer: Assign, w_loops, reader: Assign, r_loops,
          read: Optional[TensorAccess]) -> bool:
    """Can ``reader`` touch a cell ``writer`` writes in a different iteration of ``loop``?"""
    extents = list(prog.extents)
    outer = set()
    for l in w_loops:
        if l is loop:
            break
        outer.add(l.var)
    wf, rf = writer.fragment, reader.fragment
    wvars = wf.index_variables(extents)
    mapping = {v: IndexExpr(v + "'") for v in wvars if v not in outer}
    wp = wf.rename(mapping)
    cs = list(wp.constraints) + list(rf.constraints) + extent_facts(wp.extent_map) + extent_facts(rf.extent_map)
    for l in w_loops:
        cs.extend(c.rename(mapping) for c in l.constraints())
    for l in r_loops:
        cs.extend(l.constraints())
    target = read if read is not None else rf.lhs
    if len(target.indices) != len(wp.lhs.indices):
        return False
    for a, b in zip(wp.lhs.indices, target.indices):
        cs.append(Constraint(a, "eq", b))
    v = loop.var
    vp = mapping.get(v, IndexExpr(v))
    for rel in (Constraint(IndexExpr(v), "lt", vp), Constraint(vp, "lt", IndexExpr(v))):
        if DifferenceSystem(cs + [rel], extents).feasible():
            return True
    return False


def verify_rin(prog: RinProgram, spec: ProgramSpec) -> List[str]:
    """Re-check placement and loop kinds; returns a list of violations (empty when ok)."""
    problems: List[str] = []
    ordering = list(prog.ordering)
    written = [t for t in _written_order(spec, [s.fragment for s in prog.assigns()])]
    items = list(prog.walk())
    for stmt, loops in items:
        if isinstance(stmt, Loop):
            path_vars = [l.var for l in loops] + [stmt.var]
            pos = [ordering.index(v) for v in path_vars if v in ordering]
            if pos != sorted(pos) or len(set(path_vars)) != len(path_vars):
                problems.append(f"loop nest {' '.join(path_vars)} does not follow the schedule")
        if not isinstance(stmt, Assign):
            continue
        frag = stmt.fragment
        scope = {l.var for l in loops}
        if frag.index_variables(prog.extents) != scope:
            problems.append(f"{stmt}: index variables not exactly in scope")
            continue
        nest = [c for l in loops for c in l.constraints()]
        if not same_domain(nest, list(frag.constraints) + extent_facts(frag.extent_map), prog.extents):
            problems.append(f"{stmt}: loop nest does not match its constraints")
        loc, _ = prog.locate(stmt)
        system = _statement_system(frag, nest, prog.extents)
        visible = visible_markers(prog, loc)
        for dep in dependencies(frag, written):
            if not any(covers(m, dep, system) for m, _ in visible):
                problems.append(f"{stmt}: dependency {dep} not ready")
    for frag, loop in prog.restrictions:
        stmt = next((s for s in prog.assigns() if s.fragment is frag), None)
        if stmt is None:
            continue
        _, loops = prog.locate(stmt)
        if not any(l is loop for l in loops):
            problems.append(f"{stmt}: placed outside its assumed loop over {loop.var}")
    for loop in prog.loops():
        if loop.kind != FORALL:
            continue
        inside = [(s, ls) for s, ls in items if isinstance(s, Assign) and any(l is loop for l in ls)]
        for w, wl in inside:
            for r, rl in inside:
                for acc in r.fragment.reads():
                    if acc.tensor == w.lhs.tensor and _race(prog, loop, w, wl, r, rl, acc):
                        problems.append(f"forall {loop.var}: {r} reads {acc} written by {w} in another iteration")
                if r is not w and r.lhs.tensor == w.lhs.tensor and not (r.mode == REDUCE and w.mode == REDUCE):
                    if _race(prog, loop, w, wl, r, rl, None):
                        problems.append(f"forall {loop.var}: {w} and {r} write the same cell")
            if w.mode == ASSIGN and _race(prog, loop, w, wl, w, wl, None):
                problems.append(f"forall {loop.var}: {w} writes one cell from several iterations")
    return problems
