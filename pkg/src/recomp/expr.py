"""Index expressions, tensor accesses, scalar expressions and constraints.

Every node is an immutable dataclass so that fragments and RIN statements can
share sub-trees freely and be used as dictionary keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Tuple, Union

REDUCE_OPS = ("add", "min", "max")
UNARY_OPS = ("sqrt", "neg")
BINARY_OPS = ("add", "sub", "mul", "div", "min", "max")
RELATIONS = ("lt", "le", "eq")

_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_REL_TEXT = {"lt": "<", "le": "<=", "eq": "="}


@dataclass(frozen=True, order=True)
class IndexExpr:
    """``var + offset``, or a bare integer constant when ``var`` is None."""

    var: Optional[str] = None
    offset: int = 0

    @staticmethod
    def const(value: int) -> "IndexExpr":
        return IndexExpr(None, value)

    @property
    def is_const(self) -> bool:
        return self.var is None

    def shift(self, delta: int) -> "IndexExpr":
        return IndexExpr(self.var, self.offset + delta)

    def rename(self, mapping: Mapping[str, "IndexExpr"]) -> "IndexExpr":
        if self.var is not None and self.var in mapping:
            return mapping[self.var].shift(self.offset)
        return self

    def evaluate(self, env: Mapping[str, int]) -> int:
        if self.var is None:
            return self.offset
        return env[self.var] + self.offset

    def __str__(self) -> str:
        if self.var is None:
            return str(self.offset)
        if self.offset == 0:
            return self.var
        sign = "+" if self.offset > 0 else "-"
        return f"{self.var}{sign}{abs(self.offset)}"


def var(name: str, offset: int = 0) -> IndexExpr:
    return IndexExpr(name, offset)


@dataclass(frozen=True)
class TensorAccess:
    tensor: str
    indices: Tuple[IndexExpr, ...]

    @property
    def rank(self) -> int:
        return len(self.indices)

    def variables(self) -> set:
        return {ix.var for ix in self.indices if ix.var is not None}

    def rename(self, mapping: Mapping[str, IndexExpr]) -> "TensorAccess":
        return TensorAccess(self.tensor, tuple(ix.rename(mapping) for ix in self.indices))

    def __str__(self) -> str:
        return f"{self.tensor}({','.join(str(ix) for ix in self.indices)})"


# --------------------------------------------------------------------------- #
# Scalar expressions


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Access:
    access: TensorAccess


@dataclass(frozen=True)
class Unary:
    op: str
    child: "ScalarExpr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "ScalarExpr"
    right: "ScalarExpr"


@dataclass(frozen=True)
class Reduction:
    var: str
    lower: IndexExpr
    upper: IndexExpr  # exclusive
    op: str
    body: "ScalarExpr"


ScalarExpr = Union[Constant, Access, Unary, Binary, Reduction]


def children(expr: ScalarExpr) -> Tuple[ScalarExpr, ...]:
    if isinstance(expr, Unary):
        return (expr.child,)
    if isinstance(expr, Binary):
        return (expr.left, expr.right)
    if isinstance(expr, Reduction):
        return (expr.body,)
    return ()


def walk(expr: ScalarExpr) -> Iterator[ScalarExpr]:
    yield expr
    for child in children(expr):
        yield from walk(child)


def accesses(expr: ScalarExpr) -> list:
    """All tensor accesses in ``expr`` in left-to-right order (duplicates kept)."""
    return [node.access for node in walk(expr) if isinstance(node, Access)]


def expr_variables(expr: ScalarExpr) -> set:
    out = set()
    for node in walk(expr):
        if isinstance(node, Access):
            out |= node.access.variables()
        elif isinstance(node, Reduction):
            out.add(node.var)
            for bound in (node.lower, node.upper):
                if bound is not None and bound.var is not None:
                    out.add(bound.var)
    return out


def has_reduction(expr: ScalarExpr) -> bool:
    return any(isinstance(node, Reduction) for node in walk(expr))


def map_accesses(expr: ScalarExpr, fn: Callable[[TensorAccess], ScalarExpr]) -> ScalarExpr:
    if isinstance(expr, Access):
        return fn(expr.access)
    if isinstance(expr, Unary):
        return Unary(expr.op, map_accesses(expr.child, fn))
    if isinstance(expr, Binary):
        return Binary(expr.op, map_accesses(expr.left, fn), map_accesses(expr.right, fn))
    if isinstance(expr, Reduction):
        return Reduction(expr.var, expr.lower, expr.upper, expr.op, map_accesses(expr.body, fn))
    return expr


def rename_expr(expr: ScalarExpr, mapping: Mapping[str, IndexExpr]) -> ScalarExpr:
    if isinstance(expr, Reduction):
        inner = {k: v for k, v in mapping.items() if k != expr.var}
        new_var = expr.var
        if expr.var in mapping and mapping[expr.var].var is not None and mapping[expr.var].offset == 0:
            new_var = mapping[expr.var].var
            inner = dict(mapping)
        return Reduction(new_var, expr.lower.rename(inner), expr.upper.rename(inner), expr.op,
                         rename_expr(expr.body, inner))
    return map_accesses(expr, lambda a: Access(a.rename(mapping)))


# --------------------------------------------------------------------------- #
# Printing (surface syntax of the recurrence language)

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


def format_expr(expr: ScalarExpr, parent_prec: int = 0, right_side: bool = False) -> str:
    if isinstance(expr, Constant):
        value = expr.value
        text = repr(int(value)) if float(value).is_integer() and abs(value) < 1e15 else repr(value)
        return f"({text})" if value < 0 else text
    if isinstance(expr, Access):
        return str(expr.access)
    if isinstance(expr, Unary):
        if expr.op == "neg":
            return f"-{format_expr(expr.child, 3)}"
        return f"{expr.op}({format_expr(expr.child)})"
    if isinstance(expr, Binary):
        if expr.op in _INFIX:
            prec = _PREC[expr.op]
            text = (f"{format_expr(expr.left, prec)}{_INFIX[expr.op]}"
                    f"{format_expr(expr.right, prec, right_side=True)}")
            needs = prec < parent_prec or (right_side and prec == parent_prec)
            return f"({text})" if needs else text
        return f"{expr.op}({format_expr(expr.left)}, {format_expr(expr.right)})"
    if isinstance(expr, Reduction):
        name = {"add": "Sum", "min": "Min", "max": "Max"}[expr.op]
        lower = "" if expr.lower == IndexExpr.const(0) else f"{expr.lower}<="
        return f"{name}{{{lower}{expr.var}<{expr.upper}}}({format_expr(expr.body)})"
    raise TypeError(f"not a scalar expression: {expr!r}")


# --------------------------------------------------------------------------- #
# Constraints


@dataclass(frozen=True)
class Constraint:
    """``lhs relation rhs`` with relation one of ``<``, ``<=``, ``=``.

    Both sides are var+offset expressions; ``j>i`` is stored as ``i<j``.
    """

    lhs: IndexExpr
    relation: str
    rhs: IndexExpr

    def variables(self) -> set:
        return {ix.var for ix in (self.lhs, self.rhs) if ix.var is not None}

    def rename(self, mapping: Mapping[str, IndexExpr]) -> "Constraint":
        return Constraint(self.lhs.rename(mapping), self.relation, self.rhs.rename(mapping))

    def holds(self, env: Mapping[str, int]) -> bool:
        a, b = self.lhs.evaluate(env), self.rhs.evaluate(env)
        if self.relation == "lt":
            return a < b
        if self.relation == "le":
            return a <= b
        return a == b

    def __str__(self) -> str:
        return f"{self.lhs}{_REL_TEXT[self.relation]}{self.rhs}"


def format_constraints(constraints) -> str:
    return "[" + ", ".join(str(c) for c in constraints) + "]"


@dataclass(frozen=True)
class IterationSpace:
    """Half-open space ``max(lowers) <= v < min(uppers)``."""

    lowers: Tuple[IndexExpr, ...] = field(default=(IndexExpr.const(0),))
    uppers: Tuple[IndexExpr, ...] = ()

    def bounds(self, env: Mapping[str, int]) -> Tuple[int, int]:
        lo = max(b.evaluate(env) for b in self.lowers)
        hi = min(b.evaluate(env) for b in self.uppers)
        return lo, hi

    def variables(self) -> set:
        return {b.var for b in self.lowers + self.uppers if b.var is not None}

    def header(self, name: str) -> str:
        upper = ",".join(str(u) for u in self.uppers)
        if len(self.uppers) > 1:
            upper = f"min({upper})"
        lowers = [b for b in self.lowers if b != IndexExpr.const(0)]
        if not lowers:
            return f"{name}<{upper}"
        if len(lowers) == 1:
            return f"{lowers[0].shift(-1)}<{name}<{upper}"
        return f"max({','.join(str(b) for b in lowers)})<={name}<{upper}"
