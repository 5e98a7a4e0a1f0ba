"""Reasoning over var+offset constraints.

Constraints of the form ``a + c1 < b + c2`` are difference constraints
``a - b <= c2 - c1 - 1`` over integers, so implication and satisfiability
reduce to shortest paths in a small weighted graph.
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import ValidationError
from .expr import Constraint, IndexExpr, IterationSpace

ZERO = "$0"


class DifferenceSystem:
    """Closure of ``x - y <= w`` facts; variables are implicitly ``>= 0``."""

    def __init__(self, constraints: Iterable[Constraint] = (), extents: Iterable[str] = (),
                 nonnegative: bool = True):
        self._edges: Dict[Tuple[str, str], int] = {}
        self._nodes = {ZERO}
        self._extents = set(extents)
        self._nonnegative = nonnegative
        self._dist: Optional[Dict[str, Dict[str, float]]] = None
        for name in self._extents:
            self._touch(name)
            # extents are positive sizes
            self._add(ZERO, name, -1)
        for c in constraints:
            self.add(c)

    def copy(self) -> "DifferenceSystem":
        other = DifferenceSystem(nonnegative=self._nonnegative)
        other._edges = dict(self._edges)
        other._nodes = set(self._nodes)
        other._extents = set(self._extents)
        return other

    def _node(self, ix: IndexExpr) -> str:
        return ZERO if ix.var is None else ix.var

    def _touch(self, name: str) -> None:
        if name not in self._nodes:
            self._nodes.add(name)
            if self._nonnegative and name != ZERO:
                self._add(ZERO, name, 0)

    def _add(self, x: str, y: str, w: int) -> None:
        # x - y <= w  ->  edge y -> x with weight w
        key = (y, x)
        if key not in self._edges or self._edges[key] > w:
            self._edges[key] = w
            self._dist = None

    def add_le(self, a: IndexExpr, b: IndexExpr, slack: int = 0) -> None:
        """Record ``a <= b + slack``."""
        x, y = self._node(a), self._node(b)
        self._touch(x)
        self._touch(y)
        self._add(x, y, b.offset - a.offset + slack)

    def add(self, c: Constraint) -> None:
        if c.relation == "lt":
            self.add_le(c.lhs, c.rhs, -1)
        elif c.relation == "le":
            self.add_le(c.lhs, c.rhs)
        else:
            self.add_le(c.lhs, c.rhs)
            self.add_le(c.rhs, c.lhs)

    def _closure(self) -> Dict[str, Dict[str, float]]:
        if self._dist is None:
            nodes = sorted(self._nodes)
            dist = {a: {b: (0 if a == b else math.inf) for b in nodes} for a in nodes}
            for (y, x), w in self._edges.items():
                if w < dist[y][x]:
                    dist[y][x] = w
            for k in nodes:
                dk = dist[k]
                for i in nodes:
                    dik = dist[i][k]
                    if dik == math.inf:
                        continue
                    di = dist[i]
                    for j in nodes:
                        alt = dik + dk[j]
                        if alt < di[j]:
                            di[j] = alt
            self._dist = dist
        return self._dist

    def feasible(self) -> bool:
        dist = self._closure()
        return all(dist[n][n] >= 0 for n in dist)

    def max_diff(self, a: IndexExpr, b: IndexExpr) -> float:
        """Tightest known upper bound of ``a - b`` (inf when unknown)."""
        x, y = self._node(a), self._node(b)
        dist = self._closure()
        if x not in dist or y not in dist:
            return a.offset - b.offset if x == y else math.inf
        return dist[y][x] + a.offset - b.offset

    def implies_le(self, a: IndexExpr, b: IndexExpr) -> bool:
        if not self.feasible():
            return True
        return self.max_diff(a, b) <= 0

    def implies_lt(self, a: IndexExpr, b: IndexExpr) -> bool:
        if not self.feasible():
            return True
        return self.max_diff(a, b) <= -1

    def implies_eq(self, a: IndexExpr, b: IndexExpr) -> bool:
        return self.implies_le(a, b) and self.implies_le(b, a)

    def implies(self, c: Constraint) -> bool:
        if c.relation == "lt":
            return self.implies_lt(c.lhs, c.rhs)
        if c.relation == "le":
            return self.implies_le(c.lhs, c.rhs)
        return self.implies_eq(c.lhs, c.rhs)

    def with_constraints(self, constraints: Iterable[Constraint]) -> "DifferenceSystem":
        other = self.copy()
        for c in constraints:
            other.add(c)
        return other


def lower_bounds(var: str, constraints: Iterable[Constraint]) -> List[IndexExpr]:
    out = []
    for c in constraints:
        if c.rhs.var == var and c.lhs.var != var:
            # a < v + o  ->  v >= a - o + 1
            shift = -c.rhs.offset + (1 if c.relation == "lt" else 0)
            out.append(c.lhs.shift(shift))
        if c.relation == "eq" and c.lhs.var == var and c.rhs.var != var:
            out.append(c.rhs.shift(-c.lhs.offset))
    return out


def upper_bounds(var: str, constraints: Iterable[Constraint]) -> List[IndexExpr]:
    """Exclusive upper bounds on ``var`` stated directly by ``constraints``."""
    out = []
    for c in constraints:
        if c.lhs.var == var and c.rhs.var != var:
            shift = -c.lhs.offset + (0 if c.relation == "lt" else 1)
            out.append(c.rhs.shift(shift))
        if c.relation == "eq" and c.rhs.var == var and c.lhs.var != var:
            out.append(c.lhs.shift(-c.rhs.offset + 1))
    return out


def _prune(bounds: Sequence[IndexExpr], system: DifferenceSystem, keep_max: bool) -> Tuple[IndexExpr, ...]:
    unique = sorted(set(bounds), key=lambda b: (b.var is not None, b.var or "", b.offset))
    kept = []
    for b in unique:
        dominated = False
        for other in unique:
            if other == b:
                continue
            if keep_max:
                # b is redundant when other >= b always, i.e. b <= other
                tighter = system.implies_le(b, other)
                tie = system.implies_le(other, b)
            else:
                tighter = system.implies_le(other, b)
                tie = system.implies_le(b, other)
            if tighter and not (tie and unique.index(other) > unique.index(b)):
                dominated = True
                break
        if not dominated:
            kept.append(b)
    return tuple(kept)


def iteration_space(var: str, constraints: Sequence[Constraint], var_extents: Mapping[str, str],
                    scope: Optional[Iterable[str]] = None, extents: Iterable[str] = ()) -> IterationSpace:
    """Tightest half-open space of ``var`` from directly stated bounds.

    Only bounds whose variable is in ``scope`` (plus constants and extent
    symbols) are eligible; missing bounds default to ``[0, extent)``.
    """
    extent_names = set(extents) | set(var_extents.values())
    allowed = None if scope is None else set(scope) | extent_names

    def eligible(b: IndexExpr) -> bool:
        return b.var is None or allowed is None or b.var in allowed

    system = DifferenceSystem(constraints, extent_names)
    for name, symbol in var_extents.items():
        system.add(Constraint(IndexExpr(name), "lt", IndexExpr(symbol)))
    lowers = [b for b in lower_bounds(var, constraints) if eligible(b)]
    uppers = [b for b in upper_bounds(var, constraints) if eligible(b)]
    if var in var_extents:
        uppers.append(IndexExpr(var_extents[var]))
    elif not uppers:
        raise ValidationError(f"index variable {var!r} is unbounded")
    if not lowers:
        lowers = [IndexExpr.const(0)]
    else:
        lowers.append(IndexExpr.const(0))
    return IterationSpace(_prune(lowers, system, keep_max=True), _prune(uppers, system, keep_max=False))


def loop_constraints(var: str, space: IterationSpace) -> List[Constraint]:
    """Constraints that hold for every iteration of a loop over ``var``."""
    out = []
    for lo in space.lowers:
        out.append(Constraint(lo, "le", IndexExpr(var)))
    for hi in space.uppers:
        out.append(Constraint(IndexExpr(var), "lt", hi))
    return out


def _chained(var: str, constraints: Sequence[Constraint], var_extents: Mapping[str, str], eligible,
             upper: bool, seen: frozenset) -> List[IndexExpr]:
    direct = upper_bounds(var, constraints) if upper else lower_bounds(var, constraints)
    out = []
    for b in direct:
        if eligible(b):
            out.append(b)
        elif b.var not in seen:
            # bound through an out-of-scope variable w: use w's own bounds, one step looser
            inner = _chained(b.var, constraints, var_extents, eligible, upper, seen | {b.var})
            if upper:
                if b.var in var_extents:
                    inner = inner + [IndexExpr(var_extents[b.var])]
                out.extend(x.shift(b.offset) for x in inner)
            else:
                inner = inner or [IndexExpr.const(0)]
                out.extend(x.shift(b.offset - 1) for x in inner)
    return out


def loop_space(var: str, constraints: Sequence[Constraint], var_extents: Mapping[str, str],
               scope: Iterable[str], extents: Iterable[str] = ()) -> IterationSpace:
    """Loop bounds for ``var`` given the loops already open (``scope``).

    Bounds through variables that are not in scope are chained to that
    variable's own bounds.  The result may be slightly wider than the exact
    projection; placement checks the full nest against each statement.
    """
    extent_names = set(extents) | set(var_extents.values())
    allowed = set(scope) | extent_names

    def eligible(b: IndexExpr) -> bool:
        return b.var is None or b.var in allowed

    system = DifferenceSystem(constraints, extent_names)
    for name, symbol in var_extents.items():
        system.add(Constraint(IndexExpr(name), "lt", IndexExpr(symbol)))
    seen = frozenset({var})
    uppers = _chained(var, constraints, var_extents, eligible, True, seen)
    lowers = _chained(var, constraints, var_extents, eligible, False, seen)
    if var in var_extents:
        uppers.append(IndexExpr(var_extents[var]))
    elif not uppers:
        raise ValidationError(f"index variable {var!r} is unbounded")
    lowers.append(IndexExpr.const(0))
    return IterationSpace(_prune(lowers, system, keep_max=True), _prune(uppers, system, keep_max=False))


def same_domain(a: Sequence[Constraint], b: Sequence[Constraint], extents: Iterable[str] = ()) -> bool:
    """True when two constraint sets describe the same integer points."""
    extents = list(extents)
    sa = DifferenceSystem(a, extents)
    sb = DifferenceSystem(b, extents)
    if not sa.feasible() or not sb.feasible():
        return sa.feasible() == sb.feasible()
    return all(sa.implies(c) for c in b) and all(sb.implies(c) for c in a)


def extent_facts(var_extents: Mapping[str, str]) -> List[Constraint]:
    return [Constraint(IndexExpr(v), "lt", IndexExpr(s)) for v, s in var_extents.items()]
