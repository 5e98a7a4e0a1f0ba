"""Level-format tensor storage: construction, conversion, lookup and file I/O."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import RuntimeFailure
from .frontend import DENSE, StorageSpec

Coords = Tuple[int, ...]


class TensorFormatError(RuntimeFailure):
    """Malformed coordinates or a broken pos/crd structure."""


@dataclass
class TensorData:
    storage: StorageSpec
    shape: Tuple[int, ...]
    pos: List[Optional[np.ndarray]] = field(default_factory=list)
    crd: List[Optional[np.ndarray]] = field(default_factory=list)
    vals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rank(self) -> int:
        return len(self.shape)

    def level_size(self, level: int) -> int:
        return self.shape[self.storage.levels[level][0]]

    def locate(self, coords: Sequence[int]) -> Optional[int]:
        """Position of ``coords`` in ``vals``, or None when not stored."""
        p = 0
        for level, (dim, fmt) in enumerate(self.storage.levels):
            c = coords[dim]
            if not 0 <= c < self.shape[dim]:
                return None
            if fmt == DENSE:
                p = p * self.shape[dim] + c
            else:
                lo, hi = int(self.pos[level][p]), int(self.pos[level][p + 1])
                crd = self.crd[level]
                k = bisect.bisect_left(crd, c, lo, hi)
                if k == hi or crd[k] != c:
                    return None
                p = k
        return p

    def get(self, coords: Sequence[int], default: float = 0.0) -> float:
        p = self.locate(coords)
        return default if p is None else float(self.vals[p])

    def entries(self) -> List[Tuple[Coords, float]]:
        """Every stored (coordinates, value) pair in storage order."""
        out: List[Tuple[Coords, float]] = []

        def rec(level: int, p: int, coords: Dict[int, int]):
            if level == len(self.storage.levels):
                out.append((tuple(coords[d] for d in range(self.rank)), float(self.vals[p])))
                return
            dim, fmt = self.storage.levels[level]
            if fmt == DENSE:
                for c in range(self.shape[dim]):
                    coords[dim] = c
                    rec(level + 1, p * self.shape[dim] + c, coords)
            else:
                for q in range(int(self.pos[level][p]), int(self.pos[level][p + 1])):
                    coords[dim] = int(self.crd[level][q])
                    rec(level + 1, q, coords)

        rec(0, 0, {})
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for coords, value in self.entries():
            out[coords] = value
        return out

    def nnz(self) -> int:
        return len(self.vals)


def build_from_coo(triples: Iterable[Tuple[Sequence[int], float]], spec: StorageSpec,
                   shape: Sequence[int]) -> TensorData:
    shape = tuple(int(n) for n in shape)
    if spec.rank != len(shape):
        raise TensorFormatError(f"storage has rank {spec.rank} but shape {shape}")
    order = [d for d, _ in spec.levels]
    items: Dict[Coords, float] = {}
    for coords, value in triples:
        coords = tuple(int(c) for c in coords)
        if len(coords) != len(shape) or any(not 0 <= c < n for c, n in zip(coords, shape)):
            raise TensorFormatError(f"coordinate {coords} out of range for shape {shape}")
        if coords in items:
            raise TensorFormatError(f"duplicate coordinate {coords}")
        items[coords] = float(value)
    ordered = sorted(items.items(), key=lambda kv: tuple(kv[0][d] for d in order))
    # groups: parent position -> entries below it
    groups: List[Tuple[int, list]] = [(0, ordered)]
    parents = 1
    pos: List[Optional[np.ndarray]] = []
    crd: List[Optional[np.ndarray]] = []
    for dim, fmt in spec.levels:
        n = shape[dim]
        new_groups: List[Tuple[int, list]] = []
        if fmt == DENSE:
            for p, entries in groups:
                buckets: Dict[int, list] = {}
                for e in entries:
                    buckets.setdefault(e[0][dim], []).append(e)
                for c, bucket in buckets.items():
                    new_groups.append((p * n + c, bucket))
            pos.append(None)
            crd.append(None)
            parents *= n
        else:
            level_pos = np.zeros(parents + 1, dtype=np.int64)
            level_crd: List[int] = []
            by_parent = dict(groups)
            for p in range(parents):
                entries = by_parent.get(p, [])
                buckets = {}
                for e in entries:
                    buckets.setdefault(e[0][dim], []).append(e)
                for c in sorted(buckets):
                    new_groups.append((len(level_crd), buckets[c]))
                    level_crd.append(c)
                level_pos[p + 1] = len(level_crd)
            pos.append(level_pos)
            crd.append(np.array(level_crd, dtype=np.int64))
            parents = len(level_crd)
        groups = new_groups
    vals = np.zeros(parents)
    for p, entries in groups:
        vals[p] = entries[0][1]
    return TensorData(spec, shape, pos, crd, vals)


def from_dense(array, spec: Optional[StorageSpec] = None, drop_zeros: bool = True) -> TensorData:
    array = np.asarray(array, dtype=float)
    spec = spec or StorageSpec.dense(array.ndim)
    if array.ndim == 0:
        raise TensorFormatError("scalars are not tensors here")
    triples = [(idx, v) for idx, v in np.ndenumerate(array) if v != 0 or not drop_zeros]
    return build_from_coo(triples, spec, array.shape)


def convert(data: TensorData, target: StorageSpec) -> TensorData:
    """Re-layout ``data``; stored zeros survive unless the source is fully dense."""
    drop = data.storage.is_dense
    triples = [(c, v) for c, v in data.entries() if not (drop and v == 0)]
    return build_from_coo(triples, target, data.shape)


def check_structure(data: TensorData) -> None:
    parents = 1
    for level, (dim, fmt) in enumerate(data.storage.levels):
        n = data.shape[dim]
        if fmt == DENSE:
            parents *= n
            continue
        pos, crd = data.pos[level], data.crd[level]
        if len(pos) != parents + 1 or pos[0] != 0:
            raise TensorFormatError(f"level {level}: pos must have {parents + 1} entries starting at 0")
        if np.any(np.diff(pos) < 0):
            raise TensorFormatError(f"level {level}: pos is not monotone")
        if pos[-1] != len(crd):
            raise TensorFormatError(f"level {level}: pos ends at {pos[-1]} but crd has {len(crd)} entries")
        for p in range(parents):
            seg = crd[pos[p]:pos[p + 1]]
            if len(seg) and (np.any(np.diff(seg) <= 0) or seg[0] < 0 or seg[-1] >= n):
                raise TensorFormatError(f"level {level}: segment {p} not strictly increasing within [0,{n})")
        parents = len(crd)
    if len(data.vals) != parents:
        raise TensorFormatError(f"vals has {len(data.vals)} entries, structure has {parents}")


# --------------------------------------------------------------------------- #
# Coordinate text files: "extents..." header, then "coords... value" lines


def read_coordinate_file(path: str, spec: Optional[StorageSpec] = None) -> TensorData:
    with open(path) as fh:
        return parse_coordinates(fh.read(), spec, path)


def parse_coordinates(text: str, spec: Optional[StorageSpec] = None, name: str = "<text>") -> TensorData:
    shape = None
    triples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("%"):
            continue
        parts = line.split()
        try:
            if shape is None:
                shape = tuple(int(p) for p in parts)
                continue
            if len(parts) != len(shape) + 1:
                raise ValueError
            triples.append((tuple(int(p) for p in parts[:-1]), float(parts[-1])))
        except ValueError:
            raise TensorFormatError(f"{name}:{lineno}: malformed line {raw!r}") from None
    if shape is None:
        raise TensorFormatError(f"{name}: missing extents header")
    return build_from_coo(triples, spec or StorageSpec.dense(len(shape)), shape)


def format_coordinates(data: TensorData, keep_zeros: bool = False) -> str:
    lines = [" ".join(str(n) for n in data.shape)]
    for coords, value in sorted(data.entries()):
        if value == 0 and not keep_zeros:
            continue
        lines.append(" ".join(str(c) for c in coords) + f" {value!r}")
    return "\n".join(lines) + "\n"


def write_coordinate_file(path: str, data: TensorData) -> None:
    with open(path, "w") as fh:
        fh.write(format_coordinates(data))
