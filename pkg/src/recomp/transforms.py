"""Schedule transformations applied after placement."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import TransformError
from .expr import Access, TensorAccess, accesses, map_accesses
from .frontend import COMPRESSED, StorageSpec
from .rin import FOR, REDUCE, Assign, Loop, Readiness, ReadinessMarker, RinProgram


@dataclass(frozen=True)
class TimestepSpec:
    tensor: str
    var: str


def _timestep_dim(prog: RinProgram, ts: TimestepSpec) -> int:
    dims = set()
    for stmt in prog.assigns():
        if stmt.lhs.tensor == ts.tensor:
            dims |= {d for d, ix in enumerate(stmt.lhs.indices) if ix.var == ts.var}
    if len(dims) != 1:
        raise TransformError(f"{ts.var} does not index exactly one dimension of {ts.tensor}")
    return dims.pop()


def _all_accesses(prog: RinProgram, tensor: str) -> List[TensorAccess]:
    out = []
    for stmt in prog.assigns():
        for acc in [stmt.lhs] + accesses(stmt.rhs):
            if acc.tensor == tensor:
                out.append(acc)
    return out


def _drop(acc: TensorAccess, tensor: str, d: int) -> TensorAccess:
    if acc.tensor != tensor:
        return acc
    return TensorAccess(acc.tensor, acc.indices[:d] + acc.indices[d + 1:])


def _drop_storage(st: StorageSpec, d: int) -> StorageSpec:
    levels = tuple((dim - (dim > d), fmt) for dim, fmt in st.levels if dim != d)
    masks = tuple(_drop_storage(m, d) for m in st.masks)
    return StorageSpec(levels, masks)


def remove_timestep_dim(prog: RinProgram, ts: TimestepSpec,
                        storage: Optional[Mapping[str, StorageSpec]] = None
                        ) -> Tuple[RinProgram, Dict[str, StorageSpec]]:
    """Store only the latest slice of ``ts.tensor`` and update it in place.

    Every loop inside the timestep loop that writes the tensor is marked serial:
    in-place updates read cells other iterations overwrite.
    """
    storage = dict(storage or {})
    d = _timestep_dim(prog, ts)
    for acc in _all_accesses(prog, ts.tensor):
        ix = acc.indices[d]
        if ix.var != ts.var or ix.offset > 0:
            raise TransformError(f"access {acc} uses {ix} in the timestep dimension; only "
                                 f"{ts.var} or {ts.var}-c can be removed")
    if not any(l.var == ts.var for l in prog.loops()):
        raise TransformError(f"no loop over timestep variable {ts.var}")
    out = copy.deepcopy(prog)

    def fix(body, inside):
        for item in body:
            if isinstance(item, Assign):
                item.lhs = _drop(item.lhs, ts.tensor, d)
                item.rhs = map_accesses(item.rhs, lambda a: Access(_drop(a, ts.tensor, d)))
            elif isinstance(item, Readiness):
                m = item.marker
                if m.tensor == ts.tensor:
                    item.marker = ReadinessMarker(m.tensor, m.region[:d] + m.region[d + 1:])
            else:
                now = inside or item.var == ts.var
                if item.var == ts.var:
                    item.kind = FOR
                fix(item.body, now)
                if inside and any(s.lhs.tensor == ts.tensor for s in _assigns(item)):
                    item.serial = True
                    item.parallel = False

    fix(out.body, False)
    for loop in [l for l in out.loops() if l.var == ts.var]:
        _distribute(loop.body, ts.tensor)
    out.timestep_loops = list(out.timestep_loops) + [ts.var]
    out.assumptions = {v: [ReadinessMarker(m.tensor, m.region[:d] + m.region[d + 1:]) if m.tensor == ts.tensor else m
                           for m in ms] for v, ms in out.assumptions.items()}
    if ts.tensor in storage:
        storage[ts.tensor] = _drop_storage(storage[ts.tensor], d)
    return out, storage


def _reads(item, tensor: str) -> bool:
    if isinstance(item, Assign):
        return any(a.tensor == tensor for a in accesses(item.rhs))
    if isinstance(item, Loop):
        return any(_reads(s, tensor) for s in item.body)
    return False


def _distribute(body: list, tensor: str) -> None:
    """Split foralls so every read of the previous slice precedes the in-place writes.

    A forall carries no dependency between iterations, so running the leading
    statements for all iterations first preserves the original semantics.
    """
    k = 0
    while k < len(body):
        item = body[k]
        if isinstance(item, Loop):
            _distribute(item.body, tensor)
            first = next((n for n, s in enumerate(item.body)
                          if isinstance(s, Assign) and s.lhs.tensor == tensor), None)
            if item.kind != FOR and first and any(_reads(s, tensor) for s in item.body[:first]):
                head = copy.copy(item)
                head.body, item.body = item.body[:first], item.body[first:]
                head.serial = any(s.lhs.tensor == tensor for s in _assigns(head))
                body.insert(k, head)
                k += 1
        k += 1


def _assigns(loop: Loop) -> List[Assign]:
    out = []
    for item in loop.body:
        if isinstance(item, Assign):
            out.append(item)
        elif isinstance(item, Loop):
            out.extend(_assigns(item))
    return out


def mark_parallel(prog: RinProgram, var: str, storage: Optional[Mapping[str, StorageSpec]] = None) -> RinProgram:
    """Flag every loop over ``var`` for concurrent execution, or refuse."""
    storage = storage or {}
    loops = [l for l in prog.loops() if l.var == var]
    if not loops:
        raise TransformError(f"no loop over {var}")
    for loop in loops:
        if loop.kind == FOR:
            raise TransformError(f"loop over {var} carries a dependency - cannot parallelize")
        if loop.serial:
            raise TransformError(f"loop over {var} updates a tensor in place after timestep removal "
                                 f"- cannot parallelize")
        body = _assigns(loop)
        for stmt in body:
            st = storage.get(stmt.lhs.tensor)
            if st is None:
                continue
            for dim, ix in enumerate(stmt.lhs.indices):
                if ix.var == var and st.format_of(dim) == COMPRESSED:
                    raise TransformError(f"sparse scatter under parallel loop unsupported: "
                                         f"{stmt.lhs} is compressed along {var}")
        invariant = [s for s in body if s.mode == REDUCE and var not in s.lhs.variables()]
        if invariant:
            # a single accumulation can still run concurrently through a scalar reduction
            only = len(loop.body) == 1 and isinstance(loop.body[0], Assign)
            if not only:
                raise TransformError(f"loop over {var} accumulates into {invariant[0].lhs} alongside "
                                     f"other statements - cannot parallelize")
    for loop in loops:
        loop.parallel = True
    return prog


def attach_masks(storage: Mapping[str, StorageSpec], masks: Mapping[str, Sequence[StorageSpec]],
                 ranks: Optional[Mapping[str, int]] = None) -> Dict[str, StorageSpec]:
    """Record user-supplied sparsity patterns next to each tensor's storage."""
    out = dict(storage)
    for tensor, specs in masks.items():
        base = out.get(tensor)
        rank = ranks[tensor] if ranks and tensor in ranks else (base.rank if base else None)
        for mask in specs:
            if rank is not None and mask.rank != rank:
                raise TransformError(f"mask for {tensor} has rank {mask.rank}, tensor has rank {rank}")
            if sum(fmt == COMPRESSED for _, fmt in mask.levels) != 1:
                raise TransformError(f"mask for {tensor} needs exactly one Compressed level")
            if base is None:
                base = StorageSpec.dense(mask.rank)
            if mask not in base.masks:
                base = base.add_mask(mask)
        out[tensor] = base
    return out


def mask_orientation(mask: StorageSpec) -> str:
    """``row`` when the compressed level is the last dimension (CSR-like), else ``column``."""
    dim = next(d for d, fmt in mask.levels if fmt == COMPRESSED)
    return "row" if dim == mask.rank - 1 else "column"
