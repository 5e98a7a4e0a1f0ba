"""Storage-aware lowering of RIN to kernels, and C emission."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .bounds import DifferenceSystem
from .errors import UnsupportedLowering
from .expr import (
    Access,
    Binary,
    Constant,
    Constraint,
    IndexExpr,
    IterationSpace,
    ScalarExpr,
    TensorAccess,
    Unary,
    accesses,
    map_accesses,
    walk,
)
from .fragments import alias_identity
from .frontend import COMPRESSED, DENSE, StorageSpec
from .rin import ASSIGN, FORALL, REDUCE, Assign, Loop, Readiness, RinProgram

# access strategies
DENSE_OFFSET = "dense"
POSITION = "position"
WORKSPACE = "workspace"
FIRST = "first"
LAST = "last"
SEARCH = "search"
TEMP = "temp"
ROW = "row"  # slice of a compressed input scattered into a dense buffer


@dataclass(frozen=True)
class Ref:
    """A tensor access resolved to one way of reaching its value."""

    access: TensorAccess
    strategy: str
    slot: Optional[int] = None  # CompressedLoop supplying the position

    def __str__(self) -> str:
        return str(self.access)


@dataclass(frozen=True)
class Local:
    name: str
    ref: Ref

    def __str__(self) -> str:
        return self.name


@dataclass
class TensorParam:
    name: str
    shape: Tuple[int, ...]
    storage: StorageSpec
    role: str  # input | output | temp
    identity: float = 0.0

    @property
    def compressed(self) -> bool:
        return not self.storage.is_dense

    def slice_dims(self) -> Tuple[Optional[int], int]:
        """(outer dense dimension or None, compressed dimension) of a supported compressed layout."""
        dims = [d for d, _ in self.storage.levels]
        return (dims[0], dims[1]) if len(dims) == 2 else (None, dims[0])


@dataclass(eq=False)
class DenseLoop:
    var: str
    space: IterationSpace
    kind: str = FORALL
    parallel: bool = False
    body: list = field(default_factory=list)


@dataclass(eq=False)
class CompressedLoop:
    """Walk the stored coordinates of one segment of ``tensor``; ``var`` is bound to each."""

    var: str
    space: IterationSpace
    tensor: str
    access: TensorAccess
    slot: int
    kind: str = FORALL
    parallel: bool = False
    mask: Optional[int] = None  # index into the tensor's masks when iterating a mask
    body: list = field(default_factory=list)


@dataclass(eq=False)
class WorkspaceInit:
    tensor: str
    slice: IndexExpr


@dataclass(eq=False)
class WorkspaceCompress:
    tensor: str
    slice: IndexExpr


@dataclass(eq=False)
class RowLoad:
    """Scatter one stored slice of a compressed input into a dense row buffer."""

    tensor: str
    slice: IndexExpr


@dataclass(eq=False)
class Load:
    local: Local


@dataclass(eq=False)
class Compute:
    lhs: Ref
    mode: str
    op: Optional[str]
    rhs: ScalarExpr
    label: str


@dataclass
class Kernel:
    name: str
    params: List[TensorParam]
    temps: List[TensorParam]
    body: list
    warnings: List[str] = field(default_factory=list)
    extents: Dict[str, int] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def param(self, name: str) -> TensorParam:
        for p in self.params + self.temps:
            if p.name == name:
                return p
        raise KeyError(name)

    def walk(self):
        def rec(body):
            for item in body:
                yield item
                if isinstance(item, (DenseLoop, CompressedLoop)):
                    yield from rec(item.body)
        yield from rec(self.body)

    def refs(self) -> List[Ref]:
        out = []
        for stmt in self.walk():
            if isinstance(stmt, Compute):
                out.append(stmt.lhs)
                out.extend(n for n in walk(stmt.rhs) if isinstance(n, Ref))
                out.extend(n.ref for n in walk(stmt.rhs) if isinstance(n, Local))
            elif isinstance(stmt, Load):
                out.append(stmt.local.ref)
        return out

    def searches(self) -> List[Ref]:
        return [r for r in self.refs() if r.strategy == SEARCH]


def _supported_layout(st: StorageSpec) -> bool:
    fmts = [fmt for _, fmt in st.levels]
    return st.is_dense or fmts == [COMPRESSED] or fmts == [DENSE, COMPRESSED]


def _nest_system(loops: Sequence[Loop], extents: Mapping[str, int], prime: bool = False) -> Tuple[DifferenceSystem, Dict[str, IndexExpr]]:
    mapping = {l.var: IndexExpr(l.var + "'") for l in loops} if prime else {}
    cs: List[Constraint] = []
    for l in loops:
        cs.extend(c.rename(mapping) for c in l.constraints())
    return DifferenceSystem(cs, list(extents)), mapping


def _has_factor(expr: ScalarExpr, target: TensorAccess) -> bool:
    if isinstance(expr, Access):
        return expr.access == target
    if isinstance(expr, Binary):
        if expr.op == "mul":
            return _has_factor(expr.left, target) or _has_factor(expr.right, target)
        if expr.op == "div":
            return _has_factor(expr.left, target)
    if isinstance(expr, Unary) and expr.op == "neg":
        return _has_factor(expr.child, target)
    return False


class _Lowering:
    def __init__(self, prog: RinProgram, storage: Mapping[str, StorageSpec], extents: Mapping[str, int],
                 shapes: Mapping[str, Tuple[int, ...]], tensor_order: Optional[Sequence[str]] = None):
        self.prog = prog
        self.extents = dict(extents)
        self.storage = dict(storage)
        self.placed: List[Tuple[Assign, Tuple[Loop, ...]]] = [
            (s, loops) for s, loops in prog.walk() if isinstance(s, Assign)]
        self.written = prog.written_tensors()
        self.temps = [t for t in self.written if t in prog.aliases]
        seen: List[str] = list(tensor_order or [])
        for s, _ in self.placed:
            for acc in [s.lhs] + accesses(s.rhs):
                if acc.tensor not in seen:
                    seen.append(acc.tensor)
        used = {acc.tensor for s, _ in self.placed for acc in [s.lhs] + accesses(s.rhs)}
        self.order = [t for t in seen if t in used and t not in self.temps]
        self.shapes = dict(shapes)
        for alias, (out, _) in prog.aliases.items():
            if alias not in self.shapes:
                self.shapes[alias] = self.shapes[out]
        self.warnings: List[str] = []
        self.slots = itertools.count()
        for t in self.order:
            st = self.st(t)
            if not _supported_layout(st):
                raise UnsupportedLowering(f"storage {st} of {t} is not supported: use dense levels, "
                                          f"Compressed(d), or Dense(a) Compressed(b)")
        self.workspace_loop: Dict[str, Loop] = {}
        for t in self.written:
            if t in self.temps or self.st(t).is_dense:
                continue
            self._find_workspace(t)
        self.triangle = {t: self._triangle(t) for t in self.order if not self.st(t).is_dense}

    # -- helpers -----------------------------------------------------------------
    def st(self, tensor: str) -> StorageSpec:
        if tensor in self.storage:
            return self.storage[tensor]
        return StorageSpec.dense(len(self.shapes[tensor]))

    def loops_of(self, stmt: Assign) -> Tuple[Loop, ...]:
        for s, loops in self.placed:
            if s is stmt:
                return loops
        raise KeyError(stmt)

    def _find_workspace(self, t: str) -> None:
        st = self.st(t)
        if [fmt for _, fmt in st.levels] != [DENSE, COMPRESSED]:
            raise UnsupportedLowering(f"compressed output {t} needs a Dense outer level to be assembled "
                                      f"slice by slice")
        outer = st.levels[0][0]
        target: Optional[Loop] = None
        for s, loops in self.placed:
            if s.lhs.tensor != t:
                continue
            ix = s.lhs.indices[outer]
            here = next((l for l in loops if ix.offset == 0 and l.var == ix.var), None)
            if here is None or (target is not None and here is not target):
                raise UnsupportedLowering(
                    f"compressed output {t} is written as {s.lhs} outside one loop over its outer "
                    f"dimension; it cannot be assembled one slice at a time (scatter across the "
                    f"outermost compressed level)")
            inner = loops[loops.index(here):]
            if any(ix.var is not None and ix.var not in self.extents and all(l.var != ix.var for l in inner)
                   for ix in s.lhs.indices):
                raise UnsupportedLowering(
                    f"compressed output {t} is written as {s.lhs} with an index bound outside the loop "
                    f"over its outer dimension; slices would be revisited (scatter across the outermost "
                    f"compressed level)")
            target = here
        if target is not None:
            self.workspace_loop[t] = target

    def _triangle(self, t: str) -> Optional[str]:
        """``lower`` when every access keeps the compressed coordinate <= the outer one."""
        st = self.st(t)
        if len(st.levels) != 2:
            return None
        o, c = st.levels[0][0], st.levels[1][0]
        sides = set()
        for s, loops in self.placed:
            accs = [a for a in [s.lhs] + accesses(s.rhs) if a.tensor == t]
            if not accs:
                continue
            system, _ = _nest_system(loops, self.extents)
            for a in accs:
                lo = system.implies_le(a.indices[c], a.indices[o])
                hi = system.implies_le(a.indices[o], a.indices[c])
                sides.add("lower" if lo and not hi else "upper" if hi and not lo else
                          "diag" if lo and hi else "mixed")
        sides.discard("diag")
        if sides == {"lower"} or not sides:
            return "lower"
        if sides == {"upper"}:
            return "upper"
        return None

    # -- iteration-domain choice -------------------------------------------------
    def _assigns_in(self, loop: Loop) -> List[Assign]:
        out = []
        for item in loop.body:
            if isinstance(item, Assign):
                out.append(item)
            elif isinstance(item, Loop):
                out.extend(self._assigns_in(item))
        return out

    def _may_alias(self, writer: Assign, reader: Assign, acc: TensorAccess) -> bool:
        ws, _ = _nest_system(self.loops_of(writer), self.extents)
        rloops = self.loops_of(reader)
        rs, mapping = _nest_system(rloops, self.extents, prime=True)
        system = ws.with_constraints([])
        for c in [c.rename(mapping) for l in rloops for c in l.constraints()]:
            system.add(c)
        for a, b in zip(writer.lhs.indices, acc.rename(mapping).indices):
            system.add(Constraint(a, "eq", b))
        return system.feasible()

    def _killed(self, loop: Loop, zero: TensorAccess, mask: bool) -> bool:
        """True when skipping iterations where ``zero`` is not stored changes nothing."""
        inside = self._assigns_in(loop)
        state: Dict[int, bool] = {}
        for s in inside:
            direct = (mask and s.lhs == zero) or (
                _has_factor(s.rhs, zero) and (s.mode == ASSIGN or s.op == "add"))
            state[id(s)] = direct
        changed = True
        while changed:
            changed = False
            for s in inside:
                if state[id(s)] or s.lhs.tensor not in self.prog.aliases:
                    continue
                ok = True
                for r, _ in self.placed:
                    for acc in accesses(r.rhs):
                        if acc.tensor == s.lhs.tensor and self._may_alias(s, r, acc):
                            if not state.get(id(r), False):
                                ok = False
                if ok:
                    state[id(s)] = True
                    changed = True
        return all(state.values())

    def _zero_sources(self, loop: Loop, scope: Sequence[str], after_workspace: set
                      ) -> List[Tuple[TensorAccess, Optional[int]]]:
        v = loop.var
        cands: List[Tuple[TensorAccess, Optional[int]]] = []
        for s in self._assigns_in(loop):
            for acc in accesses(s.rhs):
                if acc.tensor in self.temps:
                    continue
                st = self.st(acc.tensor)
                if st.is_dense:
                    continue
                outer, cdim = self._dims(acc.tensor)
                if acc.indices[cdim] != IndexExpr(v):
                    continue
                if outer is not None:
                    ox = acc.indices[outer]
                    if ox.var is not None and ox.var not in scope and ox.var not in self.extents:
                        continue
                if acc.tensor in self.written:
                    # only completed slices of an output can be walked
                    w = self.workspace_loop.get(acc.tensor)
                    if w is None or outer is None:
                        continue
                    if acc.tensor not in after_workspace and (w.var not in scope or acc.indices[outer] == IndexExpr(w.var)):
                        continue
                if (acc, None) not in cands:
                    cands.append((acc, None))
        for s in self._assigns_in(loop):
            t = s.lhs.tensor
            if t not in self.storage:
                continue
            for m, mask in enumerate(self.storage[t].masks):
                fmts = [fmt for _, fmt in mask.levels]
                if fmts not in ([COMPRESSED], [DENSE, COMPRESSED]):
                    continue
                dims = [d for d, _ in mask.levels]
                cdim = dims[-1]
                if s.lhs.indices[cdim] != IndexExpr(v):
                    continue
                if len(dims) == 2:
                    ox = s.lhs.indices[dims[0]]
                    if ox.var is not None and ox.var not in scope:
                        continue
                if (s.lhs, m) not in cands:
                    cands.append((s.lhs, m))
        return cands

    def _dims(self, t: str) -> Tuple[Optional[int], int]:
        dims = [d for d, _ in self.st(t).levels]
        return (dims[0], dims[1]) if len(dims) == 2 else (None, dims[0])

    # -- access resolution -------------------------------------------------------
    def resolve(self, acc: TensorAccess, ctx: "_Context", stmt: str, write: bool = False) -> Ref:
        t = acc.tensor
        if t in self.temps:
            return Ref(acc, TEMP)
        st = self.st(t)
        if st.is_dense:
            return Ref(acc, DENSE_OFFSET)
        outer, cdim = self._dims(t)
        if t in ctx.workspaces and outer is not None and acc.indices[outer] == ctx.workspaces[t]:
            return Ref(acc, WORKSPACE)
        if write:
            raise UnsupportedLowering(f"write {acc} to compressed {t} outside its slice workspace")
        for slot, zacc in reversed(ctx.positions):
            if zacc == acc:
                return Ref(acc, POSITION, slot)
        for var, used in ctx.rows.get(t, []):
            if outer is None or acc.indices[outer] != IndexExpr(var):
                continue
            # worth it only when an inner loop sweeps the row
            if acc.indices[cdim].var in ctx.scope[ctx.scope.index(var) + 1:]:
                used[0] = True
                return Ref(acc, ROW)
        if outer is not None and acc.indices[outer] == acc.indices[cdim] and self.triangle.get(t):
            return Ref(acc, LAST if self.triangle[t] == "lower" else FIRST)
        self.warnings.append(
            f"binary search: {acc} in '{stmt}' is read against the storage order of {t} ({st}); "
            f"each access costs O(log n)")
        return Ref(acc, SEARCH)

    # -- tree conversion ---------------------------------------------------------
    def lower(self) -> List:
        return self.block(self.prog.body, _Context(), ())

    def block(self, body: list, ctx: "_Context", loops: Tuple[Loop, ...]) -> List:
        out: List = []
        for item in body:
            if isinstance(item, Readiness):
                continue
            if isinstance(item, Assign):
                out.append(self.compute(item, ctx))
                continue
            out.append(self.loop(item, ctx, loops))
            for t, w in self.workspace_loop.items():
                if w is item:
                    ctx.finished.add(t)
        return out

    def compute(self, stmt: Assign, ctx: "_Context") -> Compute:
        label = str(stmt)
        lhs = self.resolve(stmt.lhs, ctx, label, write=True)
        rhs = map_accesses(stmt.rhs, lambda a: self.resolve(a, ctx, label))
        return Compute(lhs, stmt.mode, stmt.op, rhs, label)

    def loop(self, loop: Loop, ctx: "_Context", loops: Tuple[Loop, ...]):
        scope = [l.var for l in loops]
        inner_ctx = ctx.child()
        inner_ctx.scope.append(loop.var)
        fresh = {}
        for t in self.order:
            if t not in self.written and [fmt for _, fmt in self.st(t).levels] == [DENSE, COMPRESSED]:
                fresh[t] = (loop.var, [False])
        for t, entry in fresh.items():
            inner_ctx.rows[t] = inner_ctx.rows.get(t, []) + [entry]
        choice = None
        for zacc, mask in self._zero_sources(loop, scope, ctx.finished):
            if self._killed(loop, zacc, mask is not None):
                choice = (zacc, mask)
                break
        pre: List = []
        post: List = []
        for t, w in self.workspace_loop.items():
            if w is loop:
                inner_ctx.workspaces[t] = IndexExpr(loop.var)
                pre.append(WorkspaceInit(t, IndexExpr(loop.var)))
                post.append(WorkspaceCompress(t, IndexExpr(loop.var)))
        if choice is None:
            node = DenseLoop(loop.var, loop.space, loop.kind, loop.parallel)
        else:
            zacc, mask = choice
            slot = next(self.slots)
            node = CompressedLoop(loop.var, loop.space, zacc.tensor, zacc, slot, loop.kind, loop.parallel, mask)
            if mask is None:
                inner_ctx.positions.append((slot, zacc))
        body = self.block(loop.body, inner_ctx, loops + (loop,))
        loads = [RowLoad(t, IndexExpr(loop.var)) for t, (_, used) in fresh.items() if used[0]]
        node.body = loads + pre + body + post
        return node


@dataclass
class _Context:
    workspaces: Dict[str, IndexExpr] = field(default_factory=dict)
    positions: List[Tuple[int, TensorAccess]] = field(default_factory=list)
    finished: set = field(default_factory=set)
    rows: Dict[str, List[Tuple[str, list]]] = field(default_factory=dict)
    scope: List[str] = field(default_factory=list)

    def child(self) -> "_Context":
        return _Context(dict(self.workspaces), list(self.positions), self.finished, dict(self.rows), list(self.scope))


def _hoist_loads(body: list, inputs: set, counter) -> list:
    """Read each input value once per block execution when several statements need it."""
    counts: Dict[Ref, int] = {}
    for item in body:
        if isinstance(item, Compute):
            for n in walk(item.rhs):
                if isinstance(n, Ref) and n.access.tensor in inputs:
                    counts[n] = counts.get(n, 0) + 1
    shared = [r for r, k in counts.items() if k > 1]
    locals_: Dict[Ref, Local] = {r: Local(f"v{next(counter)}", r) for r in shared}
    out: list = [Load(locals_[r]) for r in shared]
    for item in body:
        if isinstance(item, Compute) and locals_:
            item.rhs = _replace_refs(item.rhs, locals_)
        elif isinstance(item, (DenseLoop, CompressedLoop)):
            item.body = _hoist_loads(item.body, inputs, counter)
        out.append(item)
    return out


def _replace_refs(expr, table):
    if isinstance(expr, Ref):
        return table.get(expr, expr)
    if isinstance(expr, Unary):
        return Unary(expr.op, _replace_refs(expr.child, table))
    if isinstance(expr, Binary):
        return Binary(expr.op, _replace_refs(expr.left, table), _replace_refs(expr.right, table))
    return expr


def lower_to_kernel(prog: RinProgram, storage: Mapping[str, StorageSpec], extents: Mapping[str, int],
                    shapes: Mapping[str, Tuple[int, ...]], name: str = "kernel",
                    tensor_order: Optional[Sequence[str]] = None) -> Kernel:
    low = _Lowering(prog, storage, extents, shapes, tensor_order)
    body = low.lower()
    inputs = {t for t in low.order if t not in low.written}
    body = _hoist_loads(body, inputs, itertools.count())
    params = []
    for t in low.order:
        role = "output" if t in low.written else "input"
        params.append(TensorParam(t, tuple(low.shapes[t]), low.st(t), role))
    temps = [TensorParam(t, tuple(low.shapes[t]), StorageSpec.dense(len(low.shapes[t])), "temp",
                         alias_identity(prog.aliases[t][1])) for t in low.temps]
    warnings = list(dict.fromkeys(low.warnings))
    return Kernel(name, params, temps, body, warnings, dict(extents), [t for t in low.order if t in low.written])


# --------------------------------------------------------------------------- #
# C emission


def _c_index(ix: IndexExpr) -> str:
    if ix.var is None:
        return str(ix.offset)
    if ix.offset == 0:
        return ix.var
    return f"({ix.var}{'+' if ix.offset > 0 else '-'}{abs(ix.offset)})"


class _Emitter:
    def __init__(self, kernel: Kernel):
        self.k = kernel
        self.lines: List[str] = []
        self.saturating = any(isinstance(s, Compute) and (s.op in ("min", "max") or any(
            isinstance(n, Binary) and n.op in ("min", "max") for n in walk(s.rhs))) for s in kernel.walk())

    def emit(self, depth: int, text: str) -> None:
        self.lines.append("  " * depth + text)

    def dims(self, p: TensorParam) -> List[str]:
        return [f"{p.name}_dim{d}" for d in range(len(p.shape))]

    def offset(self, p: TensorParam, acc: TensorAccess) -> str:
        text = ""
        for d, _ in p.storage.levels:
            c = _c_index(acc.indices[d])
            text = c if not text else f"({text})*{p.name}_dim{d} + {c}"
        return text or "0"

    def segment(self, p: TensorParam, acc: TensorAccess) -> Tuple[str, str]:
        levels = p.storage.levels
        lvl = len(levels) - 1
        parent = _c_index(acc.indices[levels[0][0]]) if len(levels) == 2 else "0"
        return f"{p.name}{lvl}_pos[{parent}]", f"{p.name}{lvl}_pos[{parent}+1]"

    def ref(self, r: Ref) -> str:
        p = self.k.param(r.access.tensor)
        acc = r.access
        if r.strategy in (DENSE_OFFSET, TEMP):
            return f"{p.name}_vals[{self.offset(p, acc)}]"
        lvl = len(p.storage.levels) - 1
        cdim = p.storage.levels[-1][0]
        if r.strategy == POSITION:
            return f"{p.name}_vals[p{r.slot}]"
        if r.strategy == WORKSPACE:
            return f"{p.name}_ws[{_c_index(acc.indices[cdim])}]"
        if r.strategy == ROW:
            c = _c_index(acc.indices[cdim])
            o = _c_index(acc.indices[p.storage.levels[0][0]])
            return f"({p.name}_rs[{c}] == {o} + 1 ? {p.name}_row[{c}] : 0.0)"
        lo, hi = self.segment(p, acc)
        if r.strategy == LAST:
            return f"recomp_edge({p.name}{lvl}_crd, {p.name}_vals, {lo}, {hi}, {_c_index(acc.indices[cdim])}, 1)"
        if r.strategy == FIRST:
            return f"recomp_edge({p.name}{lvl}_crd, {p.name}_vals, {lo}, {hi}, {_c_index(acc.indices[cdim])}, 0)"
        return f"recomp_search({p.name}{lvl}_crd, {p.name}_vals, {lo}, {hi}, {_c_index(acc.indices[cdim])})"

    def expr(self, e) -> str:
        if isinstance(e, Ref):
            return self.ref(e)
        if isinstance(e, Local):
            return e.name
        if isinstance(e, Constant):
            return repr(float(e.value))
        if isinstance(e, Unary):
            return f"sqrt({self.expr(e.child)})" if e.op == "sqrt" else f"(-{self.expr(e.child)})"
        if isinstance(e, Binary):
            a, b = self.expr(e.left), self.expr(e.right)
            if e.op == "add":
                return f"recomp_add({a}, {b})" if self.saturating else f"({a} + {b})"
            if e.op in ("min", "max"):
                return f"f{e.op}({a}, {b})"
            return f"({a} {dict(sub='-', mul='*', div='/')[e.op]} {b})"
        raise TypeError(e)

    def bounds(self, space: IterationSpace) -> Tuple[str, str]:
        def fold(fn, items):
            text = _c_index(items[0])
            for b in items[1:]:
                text = f"{fn}({text}, {_c_index(b)})"
            return text
        return fold("RECOMP_MAX", list(space.lowers)), fold("RECOMP_MIN", list(space.uppers))

    def update(self, depth: int, target: str, s: Compute, value: str) -> None:
        if s.mode == ASSIGN:
            self.emit(depth, f"{target} = {value};")
        elif s.op == "add":
            self.emit(depth, f"{target} += {value};")
        else:
            self.emit(depth, f"{target} = f{s.op}({target}, {value});")

    def stmt(self, s, depth: int) -> None:
        if isinstance(s, Compute):
            if s.lhs.strategy == WORKSPACE:
                p = self.k.param(s.lhs.access.tensor)
                cdim = p.storage.levels[-1][0]
                c = _c_index(s.lhs.access.indices[cdim])
                if s.mode == REDUCE:
                    ident = repr(alias_identity(s.op))
                    self.emit(depth, f"if (!{p.name}_wv[{c}]) {{ {p.name}_ws[{c}] = {ident}; {p.name}_wv[{c}] = 1; }}")
                else:
                    self.emit(depth, f"{p.name}_wv[{c}] = 1;")
            self.update(depth, self.ref(s.lhs), s, self.expr(s.rhs))
        elif isinstance(s, Load):
            self.emit(depth, f"double {s.local.name} = {self.ref(s.local.ref)};")
        elif isinstance(s, RowLoad):
            p = self.k.param(s.tensor)
            o = _c_index(s.slice)
            self.emit(depth, f"for (int q = {p.name}1_pos[{o}]; q < {p.name}1_pos[{o}+1]; q++) {{")
            self.emit(depth + 1, f"{p.name}_row[{p.name}1_crd[q]] = {p.name}_vals[q]; "
                                 f"{p.name}_rs[{p.name}1_crd[q]] = {o} + 1;")
            self.emit(depth, "}")
        elif isinstance(s, WorkspaceInit):
            p = self.k.param(s.tensor)
            n = f"{p.name}_dim{p.storage.levels[-1][0]}"
            self.emit(depth, f"memset({p.name}_wv, 0, (size_t){n});")
        elif isinstance(s, WorkspaceCompress):
            p = self.k.param(s.tensor)
            cdim = p.storage.levels[-1][0]
            n = f"{p.name}_dim{cdim}"
            sl = _c_index(s.slice)
            self.emit(depth, f"while ({p.name}_done < {sl}) {p.name}1_pos[++{p.name}_done] = {p.name}_nnz;")
            self.emit(depth, f"for (int c = 0; c < {n}; c++) {{")
            self.emit(depth + 1, f"if ({p.name}_wv[c]) {{ {p.name}1_crd[{p.name}_nnz] = c; "
                                 f"{p.name}_vals[{p.name}_nnz] = {p.name}_ws[c]; {p.name}_nnz++; }}")
            self.emit(depth, "}")
            self.emit(depth, f"{p.name}1_pos[++{p.name}_done] = {p.name}_nnz;")
        elif isinstance(s, DenseLoop):
            lo, hi = self.bounds(s.space)
            if self.scalar_reduction(s, depth, f"for (int {s.var} = {lo}; {s.var} < {hi}; {s.var}++) {{"):
                return
            if s.parallel:
                self.emit(depth, "#pragma omp parallel for")
            self.emit(depth, f"for (int {s.var} = {lo}; {s.var} < {hi}; {s.var}++) {{")
            for item in s.body:
                self.stmt(item, depth + 1)
            self.emit(depth, "}")
        elif isinstance(s, CompressedLoop):
            p = self.k.param(s.tensor)
            lo, hi = self.bounds(s.space)
            if s.mask is None:
                a, b = self.segment(p, s.access)
                crd = f"{p.name}{len(p.storage.levels) - 1}_crd"
            else:
                mask = p.storage.masks[s.mask]
                parent = _c_index(s.access.indices[mask.levels[0][0]]) if len(mask.levels) == 2 else "0"
                a, b = f"{p.name}_m{s.mask}_pos[{parent}]", f"{p.name}_m{s.mask}_pos[{parent}+1]"
                crd = f"{p.name}_m{s.mask}_crd"
            if s.parallel:
                self.emit(depth, "#pragma omp parallel for")
            self.emit(depth, f"for (int p{s.slot} = {a}; p{s.slot} < {b}; p{s.slot}++) {{")
            self.emit(depth + 1, f"int {s.var} = {crd}[p{s.slot}];")
            self.emit(depth + 1, f"if ({s.var} < {lo} || {s.var} >= {hi}) continue;")
            for item in s.body:
                self.stmt(item, depth + 1)
            self.emit(depth, "}")

    def scalar_reduction(self, s: DenseLoop, depth: int, header: str) -> bool:
        if not (s.parallel and len(s.body) == 1 and isinstance(s.body[0], Compute)):
            return False
        c = s.body[0]
        if c.mode != REDUCE or s.var in c.lhs.access.variables():
            return False
        target = self.ref(c.lhs)
        self.emit(depth, "{")
        self.emit(depth + 1, f"double acc = {target};")
        self.emit(depth + 1, f"#pragma omp parallel for reduction({'+' if c.op == 'add' else c.op}:acc)")
        self.emit(depth + 1, header)
        self.update(depth + 2, "acc", c, self.expr(c.rhs))
        self.emit(depth + 1, "}")
        self.emit(depth + 1, f"{target} = acc;")
        self.emit(depth, "}")
        return True

    def render(self) -> str:
        k = self.k
        params = [f"int {e}" for e in k.extents]
        for p in k.params:
            params += [f"int {d}" for d in self.dims(p)]
            for lvl, (_, fmt) in enumerate(p.storage.levels):
                if fmt == COMPRESSED:
                    q = "const " if p.role == "input" else ""
                    params += [f"{q}int* {p.name}{lvl}_pos", f"{q}int* {p.name}{lvl}_crd"]
            for m, mask in enumerate(p.storage.masks):
                params += [f"const int* {p.name}_m{m}_pos", f"const int* {p.name}_m{m}_crd"]
            params.append(f"{'const ' if p.role == 'input' else ''}double* {p.name}_vals")
        head = [
            "#include <math.h>",
            "#include <stdlib.h>",
            "#include <string.h>",
            "",
            "#define RECOMP_MIN(a, b) ((a) < (b) ? (a) : (b))",
            "#define RECOMP_MAX(a, b) ((a) > (b) ? (a) : (b))",
            "#define RECOMP_INF 1e300",
            "",
            "static double recomp_add(double a, double b) {",
            "  if (a >= RECOMP_INF || b >= RECOMP_INF) return RECOMP_INF;",
            "  if (a <= -RECOMP_INF || b <= -RECOMP_INF) return -RECOMP_INF;",
            "  return a + b;",
            "}",
            "",
            "static double recomp_search(const int* crd, const double* vals, int lo, int end, int c) {",
            "  int hi = end;",
            "  while (lo < hi) {",
            "    int mid = lo + (hi - lo) / 2;",
            "    if (crd[mid] < c) lo = mid + 1; else hi = mid;",
            "  }",
            "  return (lo < end && crd[lo] == c) ? vals[lo] : 0.0;",
            "}",
            "",
            "static double recomp_edge(const int* crd, const double* vals, int lo, int hi, int c, int last) {",
            "  if (lo >= hi) return 0.0;",
            "  int p = last ? hi - 1 : lo;",
            "  if (crd[p] == c) return vals[p];",
            "  if (last ? crd[p] < c : crd[p] > c) return 0.0;",
            "  return recomp_search(crd, vals, lo, hi, c);",
            "}",
            "",
        ]
        self.lines = []
        sig = f"void {k.name}(" + ", ".join(params) + ") {"
        self.emit(0, sig)
        for t in k.temps:
            size = " * ".join(str(n) for n in t.shape) or "1"
            self.emit(1, f"const int {t.name}_size = {size};")
            for d, n in enumerate(t.shape):
                self.emit(1, f"const int {t.name}_dim{d} = {n};")
            self.emit(1, f"double* {t.name}_vals = malloc(sizeof(double) * (size_t){t.name}_size);")
            ident = "RECOMP_INF" if t.identity == float("inf") else "-RECOMP_INF" if t.identity == float("-inf") \
                else repr(float(t.identity))
            self.emit(1, f"for (int q = 0; q < {t.name}_size; q++) {t.name}_vals[q] = {ident};")
        workspace = [p for p in k.params if any(isinstance(s, WorkspaceInit) and s.tensor == p.name for s in k.walk())]
        for p in workspace:
            n = f"{p.name}_dim{p.storage.levels[-1][0]}"
            self.emit(1, f"double* {p.name}_ws = calloc((size_t){n}, sizeof(double));")
            self.emit(1, f"char* {p.name}_wv = calloc((size_t){n}, 1);")
            self.emit(1, f"int {p.name}_nnz = 0, {p.name}_done = 0;")
            self.emit(1, f"{p.name}1_pos[0] = 0;")
        rows = [p for p in k.params if any(isinstance(s, RowLoad) and s.tensor == p.name for s in k.walk())]
        for p in rows:
            n = f"{p.name}_dim{p.storage.levels[-1][0]}"
            self.emit(1, f"double* {p.name}_row = calloc((size_t){n}, sizeof(double));")
            self.emit(1, f"int* {p.name}_rs = calloc((size_t){n}, sizeof(int));")
        for s in k.body:
            self.stmt(s, 1)
        for p in workspace:
            outer = f"{p.name}_dim{p.storage.levels[0][0]}"
            self.emit(1, f"while ({p.name}_done < {outer}) {p.name}1_pos[++{p.name}_done] = {p.name}_nnz;")
            self.emit(1, f"free({p.name}_ws);")
            self.emit(1, f"free({p.name}_wv);")
        for p in rows:
            self.emit(1, f"free({p.name}_row);")
            self.emit(1, f"free({p.name}_rs);")
        for t in k.temps:
            self.emit(1, f"free({t.name}_vals);")
        self.emit(0, "}")
        return "\n".join(head + self.lines) + "\n"


def emit_c(kernel: Kernel, name: Optional[str] = None) -> str:
    """Render ``kernel`` as one C99 function; parallel loops carry OpenMP pragmas."""
    if name is not None and name != kernel.name:
        kernel = Kernel(name, kernel.params, kernel.temps, kernel.body, kernel.warnings, kernel.extents, kernel.outputs)
    return _Emitter(kernel).render()
