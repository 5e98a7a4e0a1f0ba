"""End-to-end compilation and checking against the reference evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .bounds import DifferenceSystem
from .codegen import Kernel, emit_c, lower_to_kernel
from .frontend import COMPRESSED, ProgramSpec, StorageSpec, parse_program, validate
from .expr import accesses
from .oracle import evaluate
from .rin import RinProgram, lower
from .runtime import ExecutionTrace, TensorData, build_from_coo, interpret
from .transforms import TimestepSpec, mark_parallel, remove_timestep_dim


@dataclass
class Compiled:
    spec: ProgramSpec
    rin: RinProgram
    kernel: Kernel
    storage: Dict[str, StorageSpec]
    shapes: Dict[str, Tuple[int, ...]]
    timestep: Optional[Tuple[str, int]] = None  # tensor and the dimension removed

    @property
    def warnings(self) -> List[str]:
        return self.kernel.warnings

    def c_source(self) -> str:
        return emit_c(self.kernel)


def load_program(path: str) -> ProgramSpec:
    with open(path) as fh:
        return validate(parse_program(fh.read()))


def compile_spec(spec: ProgramSpec, name: str = "kernel") -> Compiled:
    rin = lower(spec)
    storage = {t: spec.storage_of(t) for t in spec.tensors()}
    shapes = spec.concrete_shapes()
    timestep = None
    if spec.schedule.timestep:
        tensor, var = spec.schedule.timestep
        rin, storage = remove_timestep_dim(rin, TimestepSpec(tensor, var), storage)
        dim = next(d for rec in spec.recurrences if rec.lhs.tensor == tensor
                   for d, ix in enumerate(rec.lhs.indices) if ix.var == var)
        shapes[tensor] = shapes[tensor][:dim] + shapes[tensor][dim + 1:]
        timestep = (tensor, dim)
    for var in spec.schedule.parallel_vars:
        mark_parallel(rin, var, storage)
    kernel = lower_to_kernel(rin, storage, spec.extents, shapes, name, spec.tensors())
    return Compiled(spec, rin, kernel, storage, shapes, timestep)


def compile_file(path: str, name: str = "kernel") -> Compiled:
    return compile_spec(load_program(path), name)


def random_inputs(spec: ProgramSpec, seed: int = 0, density: float = 1.0) -> Dict[str, np.ndarray]:
    """Inputs that keep the suite's recurrences well defined.

    Square inputs get a dominant positive diagonal so factorizations and
    triangular solves neither divide by zero nor take roots of negatives.
    Compressed inputs are thinned to ``density``.
    """
    rng = np.random.default_rng(seed)
    shapes = spec.concrete_shapes()
    lower = lower_triangular_reads(spec)
    out = {}
    for t in spec.inputs:
        shape = shapes[t]
        a = rng.uniform(0.1, 1.0, size=shape)
        st = spec.storage_of(t)
        if any(fmt == COMPRESSED for _, fmt in st.levels) and density < 1.0:
            a *= rng.random(shape) < density
        if len(shape) == 2 and shape[0] == shape[1]:
            n = shape[0]
            a = (a + a.T) / 2 + n * np.eye(n)
            if t in lower:
                a = np.tril(a)
        out[t] = a
    return out


def lower_triangular_reads(spec: ProgramSpec) -> List[str]:
    """Matrix inputs that every recurrence reads on or below the diagonal only."""
    seen: Dict[str, bool] = {}
    for rec in spec.recurrences:
        system = DifferenceSystem(rec.constraints, spec.extents)
        for acc in accesses(rec.rhs):
            if acc.tensor in spec.inputs and acc.rank == 2:
                ok = system.implies_le(acc.indices[1], acc.indices[0])
                seen[acc.tensor] = seen.get(acc.tensor, True) and ok
    return [t for t, ok in seen.items() if ok]


def random_masks(compiled: "Compiled", inputs: Mapping[str, object], seed: int = 0,
                 extra: float = 0.1) -> Dict[str, List[TensorData]]:
    """Masks that cover every nonzero of the reference result plus some spare cells.

    Masks are trusted input, so a pattern missing a true nonzero would be a
    caller error rather than something to test against.
    """
    spec = compiled.spec
    if not any(st.masks for st in spec.storage.values()):
        return {}
    rng = np.random.default_rng(seed + 7919)
    ref = evaluate(spec, inputs)
    out = {}
    for t, st in spec.storage.items():
        if st.masks:
            pattern = (ref[t] != 0) | (rng.random(ref[t].shape) < extra)
            coo = [(idx, 1.0) for idx in zip(*np.nonzero(pattern))]
            out[t] = [build_from_coo(coo, m, ref[t].shape) for m in st.masks]
    return out


def expected_outputs(compiled: Compiled, inputs: Mapping[str, object],
                     masks: Optional[Mapping[str, List[TensorData]]] = None) -> Dict[str, np.ndarray]:
    """Reference values shaped like the kernel's outputs."""
    ref = evaluate(compiled.spec, inputs)
    if compiled.timestep:
        tensor, dim = compiled.timestep
        ref[tensor] = np.take(ref[tensor], -1, axis=dim)
    for t, ms in (masks or {}).items():
        if t in ref:
            keep = np.ones(ref[t].shape, dtype=bool)
            for m in ms:
                keep &= m.to_dense() != 0
            ref[t] = np.where(keep, ref[t], 0.0)
    return ref


def run(compiled: Compiled, inputs: Mapping[str, object], permute_foralls: Optional[int] = None,
        masks=None) -> Tuple[Dict[str, TensorData], ExecutionTrace]:
    return interpret(compiled.kernel, inputs, compiled.spec.initial_values,
                     permute_foralls=permute_foralls, masks=masks)


@dataclass
class Diff:
    tensor: str
    max_abs: float
    max_rel: float


def compare(actual: Mapping[str, TensorData], expected: Mapping[str, np.ndarray]) -> List[Diff]:
    diffs = []
    for t, want in expected.items():
        got = actual[t].to_dense() if isinstance(actual[t], TensorData) else np.asarray(actual[t])
        err = np.abs(got - want)
        max_abs = float(err.max()) if err.size else 0.0
        scale = float(np.abs(want).max()) if want.size else 0.0
        diffs.append(Diff(t, max_abs, max_abs / scale if scale else max_abs))
    return diffs


def check(compiled: Compiled, inputs: Mapping[str, object], permute_foralls: Optional[int] = None,
          masks=None) -> List[Diff]:
    actual, _ = run(compiled, inputs, permute_foralls, masks)
    return compare(actual, expected_outputs(compiled, inputs, masks))
