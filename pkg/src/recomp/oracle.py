"""Schedule-independent reference semantics: demand-driven memoized evaluation."""

from __future__ import annotations

import math
import sys
import threading
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import CyclicDependencyError, KernelRuntimeError, OracleError
from .expr import Access, Binary, Constant, Reduction, Unary
from .frontend import ConstrainedRecurrence, ProgramSpec
from .runtime import SENTINEL, TensorData, apply_binary, apply_unary, clamp

_DONE, _BUSY = 1, 2


def _combine(op: str, terms: List[float]) -> float:
    if op == "add":
        if any(abs(t) >= SENTINEL for t in terms):
            return clamp(sum(terms))
        return math.fsum(terms)
    if not terms:
        return SENTINEL if op == "min" else -SENTINEL
    return min(terms) if op == "min" else max(terms)


class _Oracle:
    def __init__(self, spec: ProgramSpec, inputs: Mapping[str, object]):
        self.spec = spec
        self.shapes = spec.concrete_shapes()
        self.inputs: Dict[str, np.ndarray] = {}
        for name in spec.inputs:
            if name not in inputs:
                raise OracleError(f"missing input tensor {name}")
            value = inputs[name]
            array = value.to_dense() if isinstance(value, TensorData) else np.asarray(value, dtype=float)
            if array.shape != self.shapes[name]:
                raise OracleError(f"input {name} has shape {array.shape}, expected {self.shapes[name]}")
            self.inputs[name] = array
        self.recs: Dict[str, List[ConstrainedRecurrence]] = {}
        for rec in spec.recurrences:
            self.recs.setdefault(rec.lhs.tensor, []).append(rec)
        self.values: Dict[Tuple[str, Tuple[int, ...]], float] = {}
        self.state: Dict[Tuple[str, Tuple[int, ...]], int] = {}
        self.path: List[Tuple[str, Tuple[int, ...]]] = []
        self.env0 = dict(spec.extents)

    def bind(self, rec: ConstrainedRecurrence, coords) -> Optional[dict]:
        env = dict(self.env0)
        for ix, c in zip(rec.lhs.indices, coords):
            if ix.var is None:
                if ix.offset != c:
                    return None
                continue
            value = c - ix.offset
            if env.setdefault(ix.var, value) != value:
                return None
        region = rec.region_constraints()
        changed = True
        while changed:
            changed = False
            for c in region:
                if c.relation != "eq":
                    continue
                for a, b in ((c.lhs, c.rhs), (c.rhs, c.lhs)):
                    if a.var is not None and a.var not in env and (b.var is None or b.var in env):
                        env[a.var] = b.evaluate(env) - a.offset
                        changed = True
        for c in region:
            if not c.variables() <= env.keys():
                return None
            if not c.holds(env):
                return None
        return env

    def read(self, tensor: str, coords: Tuple[int, ...]) -> float:
        shape = self.shapes[tensor]
        if any(not 0 <= c < n for c, n in zip(coords, shape)):
            raise OracleError(f"read of {tensor}{coords} outside shape {shape}")
        if tensor in self.inputs:
            return float(self.inputs[tensor][coords])
        return self.cell(tensor, coords, required=True)

    def cell(self, tensor: str, coords: Tuple[int, ...], required: bool) -> float:
        key = (tensor, coords)
        st = self.state.get(key)
        if st == _DONE:
            return self.values[key]
        if st == _BUSY:
            start = self.path.index(key)
            raise CyclicDependencyError(self.path[start:] + [key])
        if key in self.spec.initial_values:
            self.state[key] = _DONE
            self.values[key] = float(self.spec.initial_values[key])
            return self.values[key]
        matches = [(rec, env) for rec in self.recs.get(tensor, []) for env in [self.bind(rec, coords)] if env is not None]
        if len(matches) > 1:
            raise OracleError(f"{tensor}{coords} is defined by {len(matches)} recurrences")
        if not matches:
            if required:
                raise OracleError(f"no recurrence defines {tensor}{coords}, which is read")
            return 0.0
        rec, env = matches[0]
        self.state[key] = _BUSY
        self.path.append(key)
        try:
            value = self.eval(rec.rhs, env, rec)
        finally:
            self.path.pop()
        self.state[key] = _DONE
        self.values[key] = value
        return value

    def eval(self, e, env, rec) -> float:
        if isinstance(e, Constant):
            return float(e.value)
        if isinstance(e, Access):
            coords = tuple(ix.evaluate(env) for ix in e.access.indices)
            return self.read(e.access.tensor, coords)
        if isinstance(e, Unary):
            return apply_unary(e.op, self.eval(e.child, env, rec), str(rec))
        if isinstance(e, Binary):
            return apply_binary(e.op, self.eval(e.left, env, rec), self.eval(e.right, env, rec), str(rec))
        if isinstance(e, Reduction):
            lo, hi = e.lower.evaluate(env), e.upper.evaluate(env)
            extra = [c for c in rec.constraints if e.var in c.variables()]
            terms = []
            for v in range(lo, hi):
                inner = dict(env)
                inner[e.var] = v
                if all(c.holds(inner) for c in extra if c.variables() <= inner.keys()):
                    terms.append(self.eval(e.body, inner, rec))
            return _combine(e.op, terms)
        raise TypeError(f"cannot evaluate {e!r}")

    def run(self) -> Dict[str, np.ndarray]:
        out = {}
        for tensor in self.spec.outputs:
            shape = self.shapes[tensor]
            array = np.zeros(shape)
            for coords in np.ndindex(*shape):
                array[coords] = self.cell(tensor, tuple(int(c) for c in coords), required=False)
            out[tensor] = array
        return out


def evaluate(spec: ProgramSpec, inputs: Mapping[str, object]) -> Dict[str, np.ndarray]:
    """Every output cell of ``spec`` as a dense array.

    Runs on a private thread with a deep stack because long dependency chains
    recurse once per link.
    """
    result: dict = {}

    def work():
        try:
            result["value"] = _Oracle(spec, inputs).run()
        except BaseException as exc:  # handed back to the caller's thread
            result["error"] = exc

    old_limit = sys.getrecursionlimit()
    old_size = threading.stack_size()
    try:
        sys.setrecursionlimit(max(old_limit, 200000))
        threading.stack_size(512 * 1024 * 1024)
        thread = threading.Thread(target=work, name="oracle")
        thread.start()
        thread.join()
    finally:
        threading.stack_size(old_size)
        sys.setrecursionlimit(old_limit)
    if "error" in result:
        err = result["error"]
        if isinstance(err, KernelRuntimeError):
            raise OracleError(str(err)) from err
        raise err
    return result["value"]
