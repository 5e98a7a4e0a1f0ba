"""Recurrence-language front end: parsing, validation and printing of programs.

A program file is line oriented::

    rec: L(i,j) = (A(i,j)-Sum{k}(L(i,k)*L(j,k)))/L(j,j) : [k<j, j<i]
    rec: L(i,j) = sqrt(A(i,j)-Sum{k}(L(i,k)*L(j,k))) : [k<j, j=i]
    order: i j k
    storage: L = Dense(0) Compressed(1)
    extent: N = 12

plus optional ``parallel:``, ``timestep:``, ``mask:`` and ``init:`` lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .bounds import DifferenceSystem, lower_bounds, upper_bounds
from .errors import ParseError, ValidationError
from .expr import (
    Access,
    Binary,
    Constant,
    Constraint,
    IndexExpr,
    Reduction,
    ScalarExpr,
    TensorAccess,
    Unary,
    accesses,
    expr_variables,
    format_constraints,
    format_expr,
    walk,
)

DENSE = "Dense"
COMPRESSED = "Compressed"


@dataclass(frozen=True)
class ConstrainedRecurrence:
    lhs: TensorAccess
    rhs: ScalarExpr
    constraints: Tuple[Constraint, ...] = ()

    def reduction_vars(self) -> set:
        return {node.var for node in walk(self.rhs) if isinstance(node, Reduction)}

    def variables(self) -> set:
        out = self.lhs.variables() | expr_variables(self.rhs)
        for c in self.constraints:
            out |= c.variables()
        return out

    def region_constraints(self) -> Tuple[Constraint, ...]:
        """Constraints that delimit the written region (no reduction variables)."""
        red = self.reduction_vars()
        return tuple(c for c in self.constraints if not (c.variables() & red))

    def __str__(self) -> str:
        return f"{self.lhs} = {format_expr(self.rhs)} : {format_constraints(self.constraints)}"


@dataclass(frozen=True)
class Schedule:
    ordering: Tuple[str, ...]
    parallel_vars: Tuple[str, ...] = ()
    timestep: Optional[Tuple[str, str]] = None


@dataclass(frozen=True)
class StorageSpec:
    levels: Tuple[Tuple[int, str], ...]
    masks: Tuple["StorageSpec", ...] = ()

    @staticmethod
    def dense(rank: int) -> "StorageSpec":
        return StorageSpec(tuple((d, DENSE) for d in range(rank)))

    @property
    def rank(self) -> int:
        return len(self.levels)

    @property
    def is_dense(self) -> bool:
        return all(fmt == DENSE for _, fmt in self.levels)

    def level_of(self, dim: int) -> int:
        for pos, (d, _) in enumerate(self.levels):
            if d == dim:
                return pos
        raise KeyError(dim)

    def format_of(self, dim: int) -> str:
        return self.levels[self.level_of(dim)][1]

    def add_mask(self, mask: "StorageSpec") -> "StorageSpec":
        return replace(self, masks=self.masks + (mask,))

    def __str__(self) -> str:
        return " ".join(f"{fmt}({d})" for d, fmt in self.levels)


@dataclass(frozen=True)
class ProgramSpec:
    recurrences: Tuple[ConstrainedRecurrence, ...]
    schedule: Schedule
    storage: Mapping[str, StorageSpec] = field(default_factory=dict)
    extents: Mapping[str, int] = field(default_factory=dict)
    initial_values: Mapping[Tuple[str, Tuple[int, ...]], float] = field(default_factory=dict)

    @property
    def outputs(self) -> List[str]:
        seen = []
        for rec in self.recurrences:
            if rec.lhs.tensor not in seen:
                seen.append(rec.lhs.tensor)
        return seen

    def tensors(self) -> List[str]:
        """Every tensor name in order of first appearance."""
        seen = []
        for rec in self.recurrences:
            for acc in [rec.lhs] + accesses(rec.rhs):
                if acc.tensor not in seen:
                    seen.append(acc.tensor)
        return seen

    @property
    def inputs(self) -> List[str]:
        outs = set(self.outputs)
        return [t for t in self.tensors() if t not in outs]

    def ranks(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for rec in self.recurrences:
            for acc in [rec.lhs] + accesses(rec.rhs):
                out.setdefault(acc.tensor, acc.rank)
        return out

    def storage_of(self, tensor: str) -> StorageSpec:
        if tensor in self.storage:
            return self.storage[tensor]
        return StorageSpec.dense(self.ranks()[tensor])

    def default_extent(self) -> Optional[str]:
        if "N" in self.extents:
            return "N"
        if self.extents:
            return next(iter(self.extents))
        return None

    def var_extents(self, rec: ConstrainedRecurrence) -> Dict[str, str]:
        """Extent symbol bounding each index variable of ``rec``."""
        return resolve_var_extents(rec.variables(), rec.constraints, self.extents, self.default_extent())

    def tensor_shapes(self) -> Dict[str, Tuple[str, ...]]:
        """Symbolic extent of every dimension of every tensor."""
        shapes: Dict[str, List[Optional[str]]] = {}
        # left-hand sides decide output shapes; reads only fill what is left
        for use_lhs in (True, False):
            fixed = {t: list(d) for t, d in shapes.items()}
            for rec in self.recurrences:
                vext = self.var_extents(rec)
                for acc in ([rec.lhs] if use_lhs else accesses(rec.rhs)):
                    if not use_lhs and acc.tensor in fixed and None not in fixed[acc.tensor]:
                        continue
                    dims = shapes.setdefault(acc.tensor, [None] * acc.rank)
                    for d, ix in enumerate(acc.indices):
                        if ix.var is None or ix.var not in vext:
                            continue
                        if not use_lhs and acc.tensor in fixed and fixed[acc.tensor][d] is not None:
                            continue
                        sym = vext[ix.var]
                        if dims[d] is None or self.extents[sym] > self.extents[dims[d]]:
                            dims[d] = sym
        out = {}
        for tensor, dims in shapes.items():
            if any(d is None for d in dims):
                fallback = self.default_extent()
                if fallback is None:
                    raise ValidationError(f"cannot infer the shape of tensor {tensor}")
                dims = [d or fallback for d in dims]
            out[tensor] = tuple(dims)
        return out

    def concrete_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {t: tuple(self.extents[s] for s in dims) for t, dims in self.tensor_shapes().items()}


def resolve_var_extents(variables: Iterable[str], constraints: Sequence[Constraint],
                        extents: Mapping[str, int], default: Optional[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    variables = [v for v in variables if v not in extents]

    def chase(v: str, seen: frozenset) -> Optional[str]:
        for bound in upper_bounds(v, constraints) + lower_bounds(v, [c for c in constraints if c.relation == "eq"]):
            if bound.var is None:
                continue
            if bound.var in extents:
                return bound.var
            if bound.var not in seen:
                found = chase(bound.var, seen | {bound.var})
                if found is not None:
                    return found
        return None

    for v in variables:
        sym = chase(v, frozenset({v})) or default
        if sym is not None:
            out[v] = sym
    return out


# --------------------------------------------------------------------------- #
# Tokenizer / parser for one recurrence

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?|\.\d+)|"
                    r"(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op><=|>=|==|[-+*/(),:\[\]{}<>=]))")

_REDUCERS = {"Sum": "add", "Min": "min", "Max": "max"}
_FUNCS = {"sqrt": 1, "neg": 1, "min": 2, "max": 2}


class _Parser:
    def __init__(self, text: str, line: Optional[int] = None):
        self.text = text
        self.line = line
        self.tokens: List[Tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise ParseError(f"unexpected character {text[pos:].lstrip()[:1]!r}", line, pos + 1)
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.i = 0

    def peek(self, offset: int = 0) -> Tuple[str, str, int]:
        j = self.i + offset
        if j < len(self.tokens):
            return self.tokens[j]
        return ("eof", "", len(self.text))

    def error(self, expected: str):
        kind, value, col = self.peek()
        found = "end of input" if kind == "eof" else repr(value)
        raise ParseError(f"unexpected {found}", self.line, col + 1, expected)

    def accept(self, value: str) -> bool:
        if self.peek()[1] == value and self.peek()[0] != "eof":
            self.i += 1
            return True
        return False

    def expect(self, value: str) -> None:
        if not self.accept(value):
            self.error(repr(value))

    def name(self) -> str:
        kind, value, _ = self.peek()
        if kind != "name":
            self.error("a name")
        self.i += 1
        return value

    def integer(self) -> int:
        kind, value, _ = self.peek()
        if kind != "num" or not value.isdigit():
            self.error("an integer")
        self.i += 1
        return int(value)

    def at_end(self) -> bool:
        return self.peek()[0] == "eof"

    # index := name [(+|-) int] | int
    def index(self) -> IndexExpr:
        kind, value, _ = self.peek()
        if kind == "num":
            return IndexExpr.const(self.integer())
        if kind == "op" and value == "-" and self.peek(1)[0] == "num":
            self.i += 1
            return IndexExpr.const(-self.integer())
        name = self.name()
        offset = 0
        while self.peek()[1] in ("+", "-") and self.peek(1)[0] == "num":
            sign = 1 if self.peek()[1] == "+" else -1
            self.i += 1
            offset += sign * self.integer()
        if self.peek()[1] in ("+", "-") and self.peek(1)[0] == "name" and self._inside_index:
            raise ParseError("index expression must be a variable plus an integer constant",
                             self.line, self.peek()[2] + 1)
        return IndexExpr(name, offset)

    _inside_index = False

    def access_after_name(self, name: str) -> TensorAccess:
        self.expect("(")
        self._inside_index = True
        indices = [self.index()]
        while self.accept(","):
            indices.append(self.index())
        self._inside_index = False
        self.expect(")")
        return TensorAccess(name, tuple(indices))

    def access(self) -> TensorAccess:
        return self.access_after_name(self.name())

    def expr(self) -> ScalarExpr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = "add" if self.peek()[1] == "+" else "sub"
            self.i += 1
            node = Binary(op, node, self.term())
        return node

    def term(self) -> ScalarExpr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = "mul" if self.peek()[1] == "*" else "div"
            self.i += 1
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> ScalarExpr:
        if self.accept("-"):
            inner = self.unary()
            if isinstance(inner, Constant):
                return Constant(-inner.value)
            return Unary("neg", inner)
        return self.primary()

    def primary(self) -> ScalarExpr:
        kind, value, _ = self.peek()
        if kind == "num":
            self.i += 1
            return Constant(float(value))
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        if kind != "name":
            self.error("an expression")
        self.i += 1
        if value in _REDUCERS and self.peek()[1] == "{":
            return self.reduction(_REDUCERS[value])
        if value in _FUNCS and self.peek()[1] == "(":
            self.expect("(")
            args = [self.expr()]
            while self.accept(","):
                args.append(self.expr())
            self.expect(")")
            if len(args) != _FUNCS[value]:
                raise ParseError(f"{value} takes {_FUNCS[value]} argument(s)", self.line)
            if len(args) == 1:
                return Unary(value, args[0])
            return Binary(value, args[0], args[1])
        return Access(self.access_after_name(value))

    def reduction(self, op: str) -> Reduction:
        self.expect("{")
        lower: Optional[IndexExpr] = None
        upper: Optional[IndexExpr] = None
        # forms: {k} {k<U} {k<=U} {L<=k<U} {L<k<U}
        if self.peek()[0] == "num" or self.peek(1)[1] in ("<", "<="):
            first = self.index()
            if self.peek(1)[0] == "name" and self.peek()[1] in ("<", "<=") and self.peek(2)[1] in ("<", "<="):
                rel = self.peek()[1]
                self.i += 1
                var = self.name()
                lower = first if rel == "<=" else first.shift(1)
            else:
                if first.var is None or first.offset:
                    self.error("a reduction variable")
                var = first.var
        else:
            var = self.name()
        if self.peek()[1] in ("<", "<="):
            rel = self.peek()[1]
            self.i += 1
            bound = self.index()
            upper = bound if rel == "<" else bound.shift(1)
        self.expect("}")
        self.expect("(")
        body = self.expr()
        self.expect(")")
        return _PendingReduction(var, lower, upper, op, body)

    def constraints(self) -> List[Constraint]:
        out: List[Constraint] = []
        self.expect("[")
        if self.accept("]"):
            return out
        while True:
            out.extend(self.constraint_chain())
            if self.accept("]"):
                return out
            self.expect(",")

    def constraint_chain(self) -> List[Constraint]:
        terms = [self.index()]
        rels = []
        while self.peek()[1] in ("<", "<=", "=", "==", ">", ">="):
            rels.append(self.peek()[1])
            self.i += 1
            terms.append(self.index())
        if not rels:
            self.error("a relation")
        return [canonical_constraint(terms[n], rels[n], terms[n + 1]) for n in range(len(rels))]


@dataclass(frozen=True)
class _PendingReduction(Reduction):
    """Reduction whose omitted bounds are filled from the recurrence constraints."""


def canonical_constraint(a: IndexExpr, rel: str, b: IndexExpr) -> Constraint:
    if rel in (">", ">="):
        a, b = b, a
        rel = "<" if rel == ">" else "<="
    if rel in ("=", "=="):
        if a.var is None and b.var is not None:
            a, b = b, a
        return Constraint(a, "eq", b)
    return Constraint(a, "lt" if rel == "<" else "le", b)


def _dedupe(items):
    out = []
    for item in items:
        if item not in out:
            out.append(item)
    return out


def _resolve_reductions(expr: ScalarExpr, constraints: List[Constraint]) -> ScalarExpr:
    if isinstance(expr, Reduction):
        body = _resolve_reductions(expr.body, constraints)
        lower, upper = expr.lower, expr.upper
        if upper is None:
            cands = upper_bounds(expr.var, constraints)
            upper = cands[0] if cands else None
        if lower is None:
            cands = [b for b in lower_bounds(expr.var, constraints)]
            lower = max(cands, key=lambda b: (b.var is not None, b.offset)) if cands else IndexExpr.const(0)
        return Reduction(expr.var, lower, upper, expr.op, body)
    if isinstance(expr, Unary):
        return Unary(expr.op, _resolve_reductions(expr.child, constraints))
    if isinstance(expr, Binary):
        return Binary(expr.op, _resolve_reductions(expr.left, constraints),
                      _resolve_reductions(expr.right, constraints))
    return expr


def _reduction_constraints(expr: ScalarExpr) -> List[Constraint]:
    out = []
    for node in walk(expr):
        if isinstance(node, Reduction):
            if node.lower is not None and node.lower != IndexExpr.const(0):
                out.append(Constraint(node.lower, "le", IndexExpr(node.var)))
            if node.upper is not None:
                out.append(Constraint(IndexExpr(node.var), "lt", node.upper))
    return out


def parse_recurrence(text: str, line: Optional[int] = None) -> ConstrainedRecurrence:
    """Parse ``Tensor(idx,...) = expr : [constraints]``.

    Reduction bounds left implicit (``Sum{k}``) are taken from the
    constraints; explicit bounds are added to them.  Reductions with no
    upper bound at all keep ``upper=None`` until the extents are known.
    """
    p = _Parser(text, line)
    lhs = p.access()
    p.expect("=")
    rhs = p.expr()
    constraints: List[Constraint] = []
    if p.accept(":"):
        constraints = p.constraints()
    if not p.at_end():
        p.error("end of recurrence")
    constraints = _dedupe(constraints + _reduction_constraints(rhs))
    rhs = _resolve_reductions(rhs, constraints)
    constraints = _dedupe(constraints + _reduction_constraints(rhs))
    return ConstrainedRecurrence(lhs, rhs, tuple(constraints))


def _fill_reduction_extents(rec: ConstrainedRecurrence, extents, default) -> ConstrainedRecurrence:
    missing = [n for n in walk(rec.rhs) if isinstance(n, Reduction) and n.upper is None]
    if not missing:
        return rec
    vext = resolve_var_extents(rec.variables(), rec.constraints, extents, default)

    def fill(expr):
        if isinstance(expr, Reduction):
            upper = expr.upper
            if upper is None:
                if expr.var not in vext:
                    raise ValidationError(f"reduction variable {expr.var!r} is unbounded")
                upper = IndexExpr(vext[expr.var])
            return Reduction(expr.var, expr.lower, upper, expr.op, fill(expr.body))
        if isinstance(expr, Unary):
            return Unary(expr.op, fill(expr.child))
        if isinstance(expr, Binary):
            return Binary(expr.op, fill(expr.left), fill(expr.right))
        return expr

    rhs = fill(rec.rhs)
    return ConstrainedRecurrence(rec.lhs, rhs, tuple(_dedupe(list(rec.constraints) + _reduction_constraints(rhs))))


def _parse_storage(text: str, line: int) -> Tuple[str, StorageSpec]:
    m = re.fullmatch(r"\s*([A-Za-z_]\w*)\s*=\s*(.*)", text)
    if not m:
        raise ParseError("malformed storage line", line, expected="Tensor = Dense(0) Compressed(1)")
    levels = []
    for fmt, dim in re.findall(r"(\w+)\s*\(\s*(\d+)\s*\)", m.group(2)):
        if fmt not in (DENSE, COMPRESSED):
            raise ParseError(f"unknown level format {fmt!r}", line, expected="Dense or Compressed")
        levels.append((int(dim), fmt))
    leftover = re.sub(r"(\w+)\s*\(\s*(\d+)\s*\)", "", m.group(2)).strip()
    if leftover or not levels:
        raise ParseError("malformed level list", line, expected="Dense(d) or Compressed(d)")
    return m.group(1), StorageSpec(tuple(levels))


def parse_program(text: str) -> ProgramSpec:
    recs: List[Tuple[int, str]] = []
    ordering: Optional[List[str]] = None
    parallel: List[str] = []
    timestep = None
    storage: Dict[str, StorageSpec] = {}
    masks: List[Tuple[int, str, StorageSpec]] = []
    extents: Dict[str, int] = {}
    inits: List[Tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep:
            raise ParseError("expected 'keyword:' at start of line", lineno, 1,
                             "rec/order/parallel/timestep/storage/mask/extent/init")
        if key == "rec":
            recs.append((lineno, rest))
        elif key == "order":
            names = rest.split()
            if len(names) == 1 and len(names[0]) > 1:
                names = list(names[0])
            ordering = names
        elif key == "parallel":
            parallel.extend(rest.split())
        elif key == "timestep":
            parts = rest.split()
            if len(parts) != 2:
                raise ParseError("timestep needs a tensor and a variable", lineno, expected="timestep: SP k")
            timestep = (parts[0], parts[1])
        elif key == "storage":
            name, spec = _parse_storage(rest, lineno)
            storage[name] = spec
        elif key == "mask":
            name, spec = _parse_storage(rest, lineno)
            masks.append((lineno, name, spec))
        elif key == "extent":
            m = re.fullmatch(r"\s*([A-Za-z_]\w*)\s*=\s*(\d+)\s*", rest)
            if not m:
                raise ParseError("malformed extent", lineno, expected="extent: N = 100")
            extents[m.group(1)] = int(m.group(2))
        elif key == "init":
            inits.append((lineno, rest))
        else:
            raise ParseError(f"unknown keyword {key!r}", lineno, 1,
                             "rec/order/parallel/timestep/storage/mask/extent/init")
    if not recs:
        raise ParseError("program has no recurrences", expected="a 'rec:' line")
    default = "N" if "N" in extents else (next(iter(extents)) if extents else None)
    recurrences = tuple(_fill_reduction_extents(parse_recurrence(t, n), extents, default) for n, t in recs)
    if ordering is None:
        raise ParseError("program has no loop ordering", expected="an 'order:' line")
    for lineno, name, spec in masks:
        if name not in storage:
            raise ParseError(f"mask for tensor {name} without a storage line", lineno)
        storage[name] = storage[name].add_mask(spec)
    initial: Dict[Tuple[str, Tuple[int, ...]], float] = {}
    for lineno, text_ in inits:
        m = re.fullmatch(r"\s*([A-Za-z_]\w*)\s*\(([^)]*)\)\s*=\s*(\S+)\s*", text_)
        if not m:
            raise ParseError("malformed init", lineno, expected="init: F(0) = 0")
        try:
            coords = tuple(int(c) for c in m.group(2).split(","))
            value = float(m.group(3))
        except ValueError:
            raise ParseError("init coordinates must be integers", lineno) from None
        initial[(m.group(1), coords)] = value
    schedule = Schedule(tuple(ordering), tuple(parallel), timestep)
    return ProgramSpec(recurrences, schedule, storage, extents, initial)


def format_program(spec: ProgramSpec) -> str:
    lines = [f"rec: {rec}" for rec in spec.recurrences]
    lines.append("order: " + " ".join(spec.schedule.ordering))
    for v in spec.schedule.parallel_vars:
        lines.append(f"parallel: {v}")
    if spec.schedule.timestep:
        lines.append("timestep: {} {}".format(*spec.schedule.timestep))
    for name, st in spec.storage.items():
        lines.append(f"storage: {name} = {st}")
        for mask in st.masks:
            lines.append(f"mask: {name} = {mask}")
    for name, value in spec.extents.items():
        lines.append(f"extent: {name} = {value}")
    for (tensor, coords), value in spec.initial_values.items():
        lines.append(f"init: {tensor}({','.join(map(str, coords))}) = {value!r}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# Validation


def _regions_overlap(a: ConstrainedRecurrence, b: ConstrainedRecurrence, extents) -> bool:
    mapping = {}
    b_vars = b.variables()
    for ix_a, ix_b in zip(a.lhs.indices, b.lhs.indices):
        if ix_b.var is not None and ix_b.var not in mapping:
            mapping[ix_b.var] = ix_a.shift(-ix_b.offset)
    for v in b_vars:
        if v not in extents:
            mapping.setdefault(v, IndexExpr(v + "'"))
    system = DifferenceSystem(a.region_constraints(), extents)
    # judge with the declared sizes so border regions like i<1 and N-1<=i stay apart
    for name, size in extents.items():
        system.add(Constraint(IndexExpr(name), "eq", IndexExpr.const(size)))
    for c in b.region_constraints():
        system.add(c.rename(mapping))
    return system.feasible()


def validate(spec: ProgramSpec) -> ProgramSpec:
    """Check the static well-formedness rules and return ``spec`` unchanged."""
    extents = spec.extents
    ranks: Dict[str, int] = {}
    for rec in spec.recurrences:
        for acc in [rec.lhs] + accesses(rec.rhs):
            if ranks.setdefault(acc.tensor, acc.rank) != acc.rank:
                raise ValidationError(f"tensor {acc.tensor} used with rank {acc.rank} and {ranks[acc.tensor]}")
            for ix in acc.indices:
                if ix.var is not None and ix.var in extents:
                    raise ValidationError(f"extent {ix.var} used as an index in {acc}")
    for (tensor, coords) in spec.initial_values:
        if tensor not in ranks:
            raise ValidationError(f"init for unknown tensor {tensor}")
        if len(coords) != ranks[tensor]:
            raise ValidationError(f"init {tensor}{coords} has wrong rank")
    shapes = spec.concrete_shapes()
    for (tensor, coords) in spec.initial_values:
        if any(c < 0 or c >= n for c, n in zip(coords, shapes[tensor])):
            raise ValidationError(f"init {tensor}{coords} out of range")

    all_vars: List[str] = []
    default = spec.default_extent()
    for rec in spec.recurrences:
        for ix in rec.lhs.indices:
            if ix.var is None:
                raise ValidationError(f"constant index on left-hand side of {rec.lhs}; use init: lines for base cases")
            if ix.offset:
                raise ValidationError(f"offset index on left-hand side of {rec.lhs}")
        if len(rec.lhs.variables()) != rec.lhs.rank:
            raise ValidationError(f"repeated index variable on left-hand side of {rec.lhs}")
        red_vars = []
        for node in walk(rec.rhs):
            if isinstance(node, Reduction):
                if node.var in red_vars:
                    raise ValidationError(f"reduction variable {node.var} is shadowed in {rec.lhs}")
                red_vars.append(node.var)
                if node.var in rec.lhs.variables():
                    raise ValidationError(f"reduction variable {node.var} also indexes the output")
                for bound in (node.lower, node.upper):
                    if bound is not None and bound.var == node.var:
                        raise ValidationError(f"reduction variable {node.var} appears in its own bound")
        lhs_vars = rec.lhs.variables()
        eq_bound = set()
        for c in rec.constraints:
            if c.relation == "eq":
                eq_bound |= c.variables()
        for v in expr_variables(rec.rhs) | set().union(*(c.variables() for c in rec.constraints)) if rec.constraints else expr_variables(rec.rhs):
            if v in extents:
                continue
            if v not in lhs_vars and v not in red_vars and v not in eq_bound:
                raise ValidationError(f"index variable {v} in {rec.lhs} is unbounded: not an output "
                                      f"index, reduction variable, or equality-bound")
        system = DifferenceSystem(rec.constraints, extents)
        if not system.feasible():
            raise ValidationError(f"constraints of {rec.lhs} are unsatisfiable: {format_constraints(rec.constraints)}")
        vext = resolve_var_extents(rec.variables(), rec.constraints, extents, default)
        for v in rec.variables():
            if v in extents:
                continue
            if v not in vext:
                raise ValidationError(f"index variable {v} is unbounded (no constraint and no extent)")
            if v not in all_vars:
                all_vars.append(v)

    outputs = spec.outputs
    for n, a in enumerate(spec.recurrences):
        for b in spec.recurrences[n + 1:]:
            if a.lhs.tensor == b.lhs.tensor and _regions_overlap(a, b, extents):
                raise ValidationError(f"recurrences for {a.lhs.tensor} have overlapping output regions: "
                                      f"{format_constraints(a.region_constraints())} vs "
                                      f"{format_constraints(b.region_constraints())}")

    ordering = spec.schedule.ordering
    if len(set(ordering)) != len(ordering):
        raise ValidationError(f"loop ordering repeats a variable: {' '.join(ordering)}")
    missing = [v for v in all_vars if v not in ordering]
    if missing:
        raise ValidationError(f"loop ordering is missing variable(s) {', '.join(missing)}")
    extra = [v for v in ordering if v not in all_vars]
    if extra:
        raise ValidationError(f"loop ordering names unknown variable(s) {', '.join(extra)}")
    for v in spec.schedule.parallel_vars:
        if v not in ordering:
            raise ValidationError(f"parallel variable {v} is not in the loop ordering")
    if spec.schedule.timestep:
        tensor, tvar = spec.schedule.timestep
        if tensor not in outputs:
            raise ValidationError(f"timestep tensor {tensor} is not an output")
        if tvar not in ordering:
            raise ValidationError(f"timestep variable {tvar} is not in the loop ordering")

    for name, st in spec.storage.items():
        if name not in ranks:
            raise ValidationError(f"storage given for unknown tensor {name}")
        _check_levels(name, st, ranks[name])
        for mask in st.masks:
            _check_levels(name, mask, ranks[name], what="mask")
    return spec


def _check_levels(name: str, st: StorageSpec, rank: int, what: str = "storage") -> None:
    dims = sorted(d for d, _ in st.levels)
    if dims != list(range(rank)):
        raise ValidationError(f"{what} of {name} must list each of dimensions 0..{rank - 1} once")
