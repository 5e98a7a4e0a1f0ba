"""Kernel interpreter with load/store/search instrumentation."""

from __future__ import annotations

import bisect
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .codegen import (
    DENSE_OFFSET,
    FIRST,
    LAST,
    POSITION,
    ROW,
    SEARCH,
    TEMP,
    WORKSPACE,
    Compute,
    DenseLoop,
    Kernel,
    Load,
    Local,
    Ref,
    RowLoad,
    TensorParam,
    WorkspaceCompress,
    WorkspaceInit,
)
from .errors import KernelRuntimeError
from .expr import Access, Binary, Constant, Unary
from .frontend import StorageSpec
from .rin import ASSIGN, FORALL, Assign, Exact, Prefix, Range, Readiness, RinProgram
from .tensors import (  # noqa: F401  (re-exported storage API)
    TensorData,
    TensorFormatError,
    build_from_coo,
    check_structure,
    convert,
    format_coordinates,
    from_dense,
    parse_coordinates,
    read_coordinate_file,
    write_coordinate_file,
)

SENTINEL = 1e300  # stands in for +infinity in min-plus problems


def sat_add(a: float, b: float) -> float:
    if a >= SENTINEL or b >= SENTINEL:
        return SENTINEL
    if a <= -SENTINEL or b <= -SENTINEL:
        return -SENTINEL
    return a + b


def clamp(x: float) -> float:
    if x >= SENTINEL:
        return SENTINEL
    if x <= -SENTINEL:
        return -SENTINEL
    return x


def identity(op: str) -> float:
    return {"add": 0.0, "min": SENTINEL, "max": -SENTINEL}[op]


def apply_binary(op: str, a: float, b: float, where=None) -> float:
    if op == "add":
        return sat_add(a, b)
    if op == "sub":
        return clamp(a - b)
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0:
            raise KernelRuntimeError("division by zero", where)
        return a / b
    if op == "min":
        return a if a <= b else b
    if op == "max":
        return a if a >= b else b
    raise ValueError(op)


def apply_unary(op: str, a: float, where=None) -> float:
    if op == "sqrt":
        if a < 0 or a != a:
            raise KernelRuntimeError(f"square root of {a!r}", where)
        return math.sqrt(a)
    if op == "neg":
        return -a
    raise ValueError(op)


@dataclass
class ExecutionTrace:
    loads: Dict[str, int] = field(default_factory=dict)
    stores: Dict[str, int] = field(default_factory=dict)
    searches: int = 0
    seed: Optional[int] = None

    def load(self, tensor: str) -> None:
        self.loads[tensor] = self.loads.get(tensor, 0) + 1

    def store(self, tensor: str) -> None:
        self.stores[tensor] = self.stores.get(tensor, 0) + 1

    def summary(self) -> str:
        loads = ", ".join(f"{t}={n}" for t, n in sorted(self.loads.items()))
        stores = ", ".join(f"{t}={n}" for t, n in sorted(self.stores.items()))
        return f"loads: {loads or '-'}\nstores: {stores or '-'}\nsearches: {self.searches}"


# --------------------------------------------------------------------------- #
# Runtime tensor objects


class _Exact:
    """Exactly rounded running sums, so accumulation order never changes a result."""

    def __init__(self):
        self.parts: Dict[object, List[float]] = {}

    def add(self, key, current: float, x: float) -> float:
        parts = self.parts.get(key)
        if parts is None:
            parts = self.parts[key] = [current]
        parts.append(x)
        if any(abs(p) >= SENTINEL for p in parts):
            return clamp(sum(parts))
        return math.fsum(parts)


class _DenseBuf:
    def __init__(self, param: TensorParam, fill: float = 0.0):
        self.name = param.name
        self.shape = param.shape
        order = [d for d, _ in param.storage.levels]
        self.strides = [0] * len(self.shape)
        step = 1
        for d in reversed(order):
            self.strides[d] = step
            step *= self.shape[d]
        self.vals = [fill] * step
        self.exact = _Exact()
        self.order = order

    def offset(self, coords: Sequence[int], what) -> int:
        off = 0
        for c, n, s in zip(coords, self.shape, self.strides):
            if not 0 <= c < n:
                raise KernelRuntimeError(f"index {tuple(coords)} outside {self.name}{self.shape}", what)
            off += c * s
        return off

    def result(self, param: TensorParam) -> TensorData:
        return TensorData(param.storage, tuple(self.shape), [None] * len(self.shape), [None] * len(self.shape),
                          np.array(self.vals, dtype=float))


class _SparseBuf:
    """A Compressed(c) or Dense(o) Compressed(c) tensor held as per-slice segments."""

    def __init__(self, param: TensorParam, data: Optional[TensorData] = None):
        self.name = param.name
        self.shape = param.shape
        levels = param.storage.levels
        self.outer = levels[0][0] if len(levels) == 2 else None
        self.cdim = levels[-1][0]
        nseg = self.shape[self.outer] if self.outer is not None else 1
        self.segments: List[Tuple[List[int], List[float]]] = [([], []) for _ in range(nseg)]
        if data is not None:
            lvl = len(levels) - 1
            pos, crd = data.pos[lvl], data.crd[lvl]
            for p in range(nseg):
                lo, hi = int(pos[p]), int(pos[p + 1])
                self.segments[p] = ([int(c) for c in crd[lo:hi]], [float(v) for v in data.vals[lo:hi]])
        self.ws: Dict[int, float] = {}
        self.exact = _Exact()
        self.slice: Optional[int] = None
        self.row: Dict[int, float] = {}
        self.row_slice: Optional[int] = None

    def segment(self, coords: Sequence[int], what) -> Tuple[List[int], List[float]]:
        if self.outer is None:
            return self.segments[0]
        o = coords[self.outer]
        if not 0 <= o < len(self.segments):
            raise KernelRuntimeError(f"index {tuple(coords)} outside {self.name}{self.shape}", what)
        return self.segments[o]

    def result(self, param: TensorParam) -> TensorData:
        pos = [0]
        crd: List[int] = []
        vals: List[float] = []
        for c, v in self.segments:
            crd.extend(c)
            vals.extend(v)
            pos.append(len(crd))
        nlev = len(param.storage.levels)
        pos_l: List[Optional[np.ndarray]] = [None] * nlev
        crd_l: List[Optional[np.ndarray]] = [None] * nlev
        pos_l[-1] = np.array(pos, dtype=np.int64)
        crd_l[-1] = np.array(crd, dtype=np.int64)
        return TensorData(param.storage, tuple(self.shape), pos_l, crd_l, np.array(vals, dtype=float))


def _as_input(param: TensorParam, value) -> TensorData:
    if isinstance(value, TensorData):
        if value.shape != tuple(param.shape):
            raise KernelRuntimeError(f"input {param.name} has shape {value.shape}, kernel expects {param.shape}")
        if value.storage.levels != param.storage.levels:
            value = convert(value, StorageSpec(param.storage.levels))
        return value
    array = np.asarray(value, dtype=float)
    if array.shape != tuple(param.shape):
        raise KernelRuntimeError(f"input {param.name} has shape {array.shape}, kernel expects {param.shape}")
    return from_dense(array, StorageSpec(param.storage.levels))


# --------------------------------------------------------------------------- #
# The interpreter


class _Machine:
    def __init__(self, kernel: Kernel, inputs, initial_values, permute_foralls, permute_fors, masks):
        self.kernel = kernel
        self.trace = ExecutionTrace(seed=permute_foralls)
        self.rng = random.Random(permute_foralls) if permute_foralls is not None else None
        self.for_rng = random.Random(permute_fors) if permute_fors is not None else None
        self.bufs: Dict[str, Union[_DenseBuf, _SparseBuf]] = {}
        self.masks: Dict[str, List[_SparseBuf]] = {}
        for p in kernel.params:
            if p.role == "input":
                if p.name not in inputs:
                    raise KernelRuntimeError(f"missing input tensor {p.name}")
                data = _as_input(p, inputs[p.name])
                if p.compressed:
                    self.bufs[p.name] = _SparseBuf(p, data)
                else:
                    buf = _DenseBuf(p)
                    buf.vals = [float(v) for v in data.vals]
                    self.bufs[p.name] = buf
            elif p.compressed:
                self.bufs[p.name] = _SparseBuf(p)
            else:
                self.bufs[p.name] = _DenseBuf(p)
            for m, mask in enumerate(p.storage.masks):
                given = (masks or {}).get(p.name, [])
                if m >= len(given):
                    raise KernelRuntimeError(f"kernel iterates mask {m} of {p.name} but no mask data was given")
                mp = TensorParam(p.name, p.shape, StorageSpec(mask.levels), "input")
                self.masks.setdefault(p.name, []).append(_SparseBuf(mp, _as_input(mp, given[m])))
        for t in kernel.temps:
            self.bufs[t.name] = _DenseBuf(t, clamp(t.identity) if math.isinf(t.identity) else t.identity)
        for (tensor, coords), value in (initial_values or {}).items():
            buf = self.bufs.get(tensor)
            if buf is None:
                continue
            if not isinstance(buf, _DenseBuf):
                raise KernelRuntimeError(f"initial values for compressed output {tensor} are not supported")
            buf.vals[buf.offset(coords, "init")] = float(value)
        self.env: Dict[str, object] = dict(kernel.extents)
        self.body = [self.compile(s) for s in kernel.body]

    # -- compilation to closures ---------------------------------------------------
    def coords_fn(self, acc) -> Callable[[dict], Tuple[int, ...]]:
        parts = [(ix.var, ix.offset) for ix in acc.indices]

        def coords(env):
            return tuple(env[v] + o if v is not None else o for v, o in parts)
        return coords

    def reader(self, ref: Ref, where: str) -> Callable[[dict], float]:
        name = ref.access.tensor
        buf = self.bufs[name]
        coords = self.coords_fn(ref.access)
        trace = self.trace
        s = ref.strategy
        if s in (DENSE_OFFSET, TEMP):
            def read(env):
                trace.load(name)
                return buf.vals[buf.offset(coords(env), where)]
            return read
        if s == POSITION:
            key = f"@{ref.slot}"

            def read(env):
                vals, k = env[key]
                trace.load(name)
                return vals[k]
            return read
        if s == WORKSPACE:
            def read(env):
                c = coords(env)[buf.cdim]
                if c not in buf.ws:
                    raise KernelRuntimeError(f"read of uninitialized workspace slot {name}{coords(env)}", where)
                trace.load(name)
                return buf.ws[c]
            return read
        if s == ROW:
            def read(env):
                cs = coords(env)
                if buf.row_slice != cs[buf.outer]:
                    raise KernelRuntimeError(f"row {cs[buf.outer]} of {name} read before it was loaded", where)
                trace.load(name)
                return buf.row.get(cs[buf.cdim], 0.0)
            return read
        if s in (FIRST, LAST):
            last = s == LAST

            def read(env):
                cs = coords(env)
                crd, vals = buf.segment(cs, where)
                c = cs[buf.cdim]
                if not crd:
                    return 0.0
                k = len(crd) - 1 if last else 0
                if crd[k] == c:
                    trace.load(name)
                    return vals[k]
                if (crd[k] > c) if last else (crd[k] < c):
                    # entries past the diagonal: the shortcut does not apply, look it up
                    trace.searches += 1
                    j = bisect.bisect_left(crd, c)
                    if j < len(crd) and crd[j] == c:
                        trace.load(name)
                        return vals[j]
                return 0.0
            return read
        if s == SEARCH:
            def read(env):
                cs = coords(env)
                crd, vals = buf.segment(cs, where)
                c = cs[buf.cdim]
                trace.searches += 1
                k = bisect.bisect_left(crd, c)
                if k < len(crd) and crd[k] == c:
                    trace.load(name)
                    return vals[k]
                return 0.0
            return read
        raise ValueError(s)

    def cexpr(self, e, where: str) -> Callable[[dict], float]:
        if isinstance(e, Constant):
            v = float(e.value)
            return lambda env: v
        if isinstance(e, Local):
            key = "%" + e.name
            return lambda env: env[key]
        if isinstance(e, Ref):
            return self.reader(e, where)
        if isinstance(e, Unary):
            f = self.cexpr(e.child, where)
            op = e.op
            return lambda env: apply_unary(op, f(env), where)
        if isinstance(e, Binary):
            f, g = self.cexpr(e.left, where), self.cexpr(e.right, where)
            op = e.op
            if op == "mul":
                return lambda env: f(env) * g(env)
            return lambda env: apply_binary(op, f(env), g(env), where)
        raise TypeError(f"cannot interpret {e!r}")

    def writer(self, s: Compute) -> Callable[[dict, float], None]:
        ref = s.lhs
        name = ref.access.tensor
        buf = self.bufs[name]
        coords = self.coords_fn(ref.access)
        trace = self.trace
        where = s.label
        mode, op = s.mode, s.op
        if ref.strategy == WORKSPACE:
            def write(env, x):
                c = coords(env)[buf.cdim]
                trace.store(name)
                if mode == ASSIGN:
                    buf.ws[c] = x
                elif c not in buf.ws:
                    buf.ws[c] = identity(op)
                    buf.ws[c] = buf.exact.add(c, 0.0, x) if op == "add" else apply_binary(op, buf.ws[c], x)
                else:
                    buf.ws[c] = buf.exact.add(c, buf.ws[c], x) if op == "add" else apply_binary(op, buf.ws[c], x)
            return write
        if ref.strategy not in (DENSE_OFFSET, TEMP):
            raise KernelRuntimeError(f"cannot write {ref.access} through strategy {ref.strategy}", where)

        def write(env, x):
            off = buf.offset(coords(env), where)
            trace.store(name)
            if mode == ASSIGN:
                buf.vals[off] = x
            elif op == "add":
                buf.vals[off] = buf.exact.add(off, buf.vals[off], x)
            else:
                buf.vals[off] = apply_binary(op, buf.vals[off], x)
        return write

    def order(self, kind: str, items: list) -> list:
        rng = self.rng if kind == FORALL else self.for_rng
        if rng is not None and len(items) > 1:
            items = list(items)
            rng.shuffle(items)
        return items

    def compile(self, s) -> Callable[[dict], None]:
        if isinstance(s, Compute):
            rhs = self.cexpr(s.rhs, s.label)
            write = self.writer(s)
            return lambda env: write(env, rhs(env))
        if isinstance(s, Load):
            key = "%" + s.local.name
            read = self.reader(s.local.ref, str(s.local.ref))

            def load(env):
                env[key] = read(env)
            return load
        if isinstance(s, RowLoad):
            buf = self.bufs[s.tensor]
            ix = s.slice
            pad = [0] * len(buf.shape)

            def load_row(env):
                cs = list(pad)
                cs[buf.outer] = ix.evaluate(env)
                crd, vals = buf.segment(cs, s.tensor)
                buf.row = dict(zip(crd, vals))
                buf.row_slice = cs[buf.outer]
            return load_row
        if isinstance(s, WorkspaceInit):
            buf = self.bufs[s.tensor]
            ix = s.slice

            def init(env):
                buf.ws = {}
                buf.exact = _Exact()
                buf.slice = ix.evaluate(env)
            return init
        if isinstance(s, WorkspaceCompress):
            buf = self.bufs[s.tensor]
            ix = s.slice

            def compress(env):
                o = ix.evaluate(env)
                keys = sorted(buf.ws)
                buf.segments[o] = (keys, [buf.ws[k] for k in keys])
                buf.ws = {}
                buf.slice = None
            return compress
        body = [self.compile(item) for item in s.body]
        space, var, kind = s.space, s.var, s.kind
        if isinstance(s, DenseLoop):
            def run(env):
                lo, hi = space.bounds(env)
                for v in self.order(kind, range(lo, hi)):
                    env[var] = v
                    for f in body:
                        f(env)
                env.pop(var, None)
            return run
        key = f"@{s.slot}"
        if s.mask is None:
            src = self.bufs[s.tensor]
        else:
            src = self.masks[s.tensor][s.mask]
        pad = [0] * len(s.access.indices)

        def run_compressed(env):
            lo, hi = space.bounds(env)
            if src.outer is None:
                crd, vals = src.segments[0]
            else:
                cs = list(pad)
                ox = s.access.indices[src.outer]
                cs[src.outer] = ox.evaluate(env)
                crd, vals = src.segment(cs, s.tensor)
            positions = [k for k, c in enumerate(crd) if lo <= c < hi]
            for k in self.order(kind, positions):
                env[var] = crd[k]
                env[key] = (vals, k)
                for f in body:
                    f(env)
            env.pop(var, None)
        return run_compressed

    def run(self):
        env = self.env
        for f in self.body:
            f(env)
        outputs = {}
        for p in self.kernel.params:
            if p.role == "output":
                outputs[p.name] = self.bufs[p.name].result(p)
        return outputs, self.trace


def interpret(kernel: Kernel, inputs: Mapping[str, object], initial_values: Optional[Mapping] = None,
              permute_foralls: Optional[int] = None, permute_fors: Optional[int] = None,
              masks: Optional[Mapping[str, Sequence[object]]] = None) -> Tuple[Dict[str, TensorData], ExecutionTrace]:
    """Run ``kernel``; with ``permute_foralls`` every forall visits its iterations in a seeded random order.

    ``permute_fors`` does the same to for loops and exists only to show that
    their order matters.
    """
    machine = _Machine(kernel, inputs, initial_values, permute_foralls, permute_fors, masks)
    return machine.run()


# --------------------------------------------------------------------------- #
# Direct RIN execution with readiness checking


class ReadinessViolation(KernelRuntimeError):
    """A cell changed after a marker declared it ready."""


def run_rin(prog: RinProgram, shapes: Mapping[str, Tuple[int, ...]], extents: Mapping[str, int],
            inputs: Mapping[str, object], initial_values: Optional[Mapping] = None,
            permute_foralls: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Execute ``prog`` on dense arrays, enforcing every readiness marker as it is passed.

    Reaching a marker freezes the cells it names (cells nothing writes are
    final from the start); writing a frozen cell raises ReadinessViolation.
    """
    rng = random.Random(permute_foralls)
    arrays: Dict[str, np.ndarray] = {}
    for name, value in inputs.items():
        arrays[name] = value.to_dense() if isinstance(value, TensorData) else np.asarray(value, dtype=float)
    frozen: Dict[str, np.ndarray] = {}
    for t in prog.written_tensors():
        out_t, op = prog.aliases.get(t, (t, None))
        arrays[t] = np.full(shapes[out_t], identity(op) if op else 0.0)
        frozen[t] = np.zeros(shapes[out_t], dtype=bool)
    for (t, coords), v in (initial_values or {}).items():
        if t in arrays:
            arrays[t][tuple(coords)] = v

    def value(e, env, where):
        if isinstance(e, Constant):
            return float(e.value)
        if isinstance(e, Access):
            acc = e.access
            coords = tuple(ix.evaluate(env) for ix in acc.indices)
            a = arrays[acc.tensor]
            if any(not 0 <= c < n for c, n in zip(coords, a.shape)):
                raise KernelRuntimeError(f"read of {acc.tensor}{coords} out of bounds", where)
            return float(a[coords])
        if isinstance(e, Unary):
            return apply_unary(e.op, value(e.child, env, where), where)
        if isinstance(e, Binary):
            return apply_binary(e.op, value(e.left, env, where), value(e.right, env, where), where)
        raise TypeError(f"cannot execute {e!r}")

    def cells(marker, env):
        shape = arrays[marker.tensor].shape
        axes = []
        for r, n in zip(marker.region, shape):
            if isinstance(r, Exact):
                c = r.index.evaluate(env)
                axes.append([c] if 0 <= c < n else [])
            elif isinstance(r, Prefix):
                axes.append(range(0, min(n, r.bound.evaluate(env))))
            elif isinstance(r, Range):
                axes.append(range(max(0, r.lo.evaluate(env)), min(n, r.hi.evaluate(env))))
            else:
                axes.append(range(n))
        return itertools.product(*axes)

    def enforce(item, env):
        t = item.marker.tensor
        if t not in frozen:
            return
        for c in cells(item.marker, env):
            frozen[t][c] = True

    def execute(body, env):
        for item in body:
            if isinstance(item, Readiness):
                if item.completes is None:
                    enforce(item, env)
            elif isinstance(item, Assign):
                where = str(item)
                coords = tuple(ix.evaluate(env) for ix in item.lhs.indices)
                t = item.lhs.tensor
                if frozen[t][coords]:
                    raise ReadinessViolation(f"{t}{coords} written after being declared ready", where)
                x = value(item.rhs, env, where)
                if item.mode == ASSIGN:
                    arrays[t][coords] = x
                else:
                    arrays[t][coords] = apply_binary(item.op, arrays[t][coords], x, where)
            else:
                lo, hi = item.space.bounds(env)
                order = list(range(lo, hi))
                if item.kind == FORALL and permute_foralls is not None:
                    rng.shuffle(order)
                for v in order:
                    execute(item.body, {**env, item.var: v})
                for tail in item.body:
                    if isinstance(tail, Readiness) and tail.completes == item.var:
                        enforce(tail, env)

    execute(prog.body, dict(extents))
    return {t: arrays[t] for t in prog.outputs}
