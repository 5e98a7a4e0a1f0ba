import dataclasses
import itertools
import re

import numpy as np
import pytest

from c_runner import GCC, run_c
from recomp.codegen import (
    DENSE_OFFSET,
    LAST,
    ROW,
    SEARCH,
    CompressedLoop,
    Compute,
    DenseLoop,
    WorkspaceCompress,
    WorkspaceInit,
    emit_c,
    lower_to_kernel,
)
from recomp.errors import UnsupportedLowering
from recomp.frontend import COMPRESSED, DENSE, StorageSpec
from recomp.pipeline import check, compile_file, compile_spec, load_program, random_inputs, random_masks, run

from conftest import program_path

CSR = StorageSpec(((0, DENSE), (1, COMPRESSED)))
CSC = StorageSpec(((1, DENSE), (0, COMPRESSED)))

PROGRAMS = ["backward_reference", "cholesky", "cholesky_csr", "fibonacci", "floyd_warshall", "floyd_warshall_2d",
            "gauss_seidel", "lu", "needleman_wunsch", "prefix_sum", "sddmm", "spmv", "sqrt_prefix_ik",
            "sqrt_prefix_ki", "trisolve", "trisolve_fused", "trisolve_ji", "trisolve_ji_csc", "trisolve_ji_csr",
            "viterbi"]

# (program, storage) pairs that lower; compressed outputs only work where slices are not revisited
SPARSE_CASES = [
    ("cholesky", {"A": CSR}), ("cholesky", {"A": CSC}), ("cholesky", {"L": CSR}), ("cholesky", {"A": CSR, "L": CSR}),
    ("trisolve", {"L": CSR}), ("trisolve", {"L": CSC}),
    ("trisolve_ji", {"L": CSR}), ("trisolve_ji", {"L": CSC}),
    ("spmv", {"A": CSR}), ("spmv", {"A": CSC}),
    ("sddmm", {"B": CSR, "C": CSR}),
]


def compiled(name, storage=None, order=None, dense=False):
    spec = load_program(program_path(name))
    if dense:
        spec = dataclasses.replace(spec, storage={})
    if storage:
        spec = dataclasses.replace(spec, storage={**spec.storage, **storage})
    if order:
        spec = dataclasses.replace(spec, schedule=dataclasses.replace(spec.schedule, ordering=tuple(order)))
    return compile_spec(spec)


def shape(body, depth=0):
    out = []
    for s in body:
        out.append((depth, type(s).__name__, getattr(s, "var", None) or getattr(s, "tensor", None)))
        if hasattr(s, "body"):
            out.extend(shape(s.body, depth + 1))
    return out


def strategies(kernel):
    return {(str(r.access), r.strategy) for r in kernel.refs()}


def test_sparse_cholesky_structure():
    k = compiled("cholesky_csr").kernel
    assert shape(k.body) == [
        (0, "DenseLoop", "i"),
        (1, "RowLoad", "A"),
        (1, "WorkspaceInit", "L"),
        (1, "DenseLoop", "j"),
        (2, "CompressedLoop", "k"),
        (3, "Compute", None),
        (2, "Compute", None),
        (2, "Compute", None),
        (1, "Compute", None),
        (1, "WorkspaceCompress", "L"),
    ]
    loop = next(s for s in k.walk() if isinstance(s, CompressedLoop))
    assert loop.tensor == "L" and str(loop.access) == "L(j,k)"
    assert k.warnings == []
    assert ("L(j,j)", LAST) in strategies(k)
    assert ("A(i,j)", ROW) in strategies(k)


def test_workspace_compress_once_per_slice():
    k = compiled("cholesky_csr").kernel
    outer = k.body[0]
    assert sum(isinstance(s, WorkspaceCompress) for s in k.walk()) == 1
    assert isinstance(outer.body[-1], WorkspaceCompress)
    assert sum(isinstance(s, WorkspaceInit) for s in k.walk()) == 1


def test_dense_storage_has_no_workspaces_or_warnings():
    k = compiled("cholesky").kernel
    kinds = {type(s) for s in k.walk()}
    assert kinds <= {DenseLoop, Compute}
    assert k.warnings == []
    assert all(s in (DENSE_OFFSET, "temp") for _, s in strategies(k))


def test_column_solve_on_rows_searches_and_warns():
    c = compiled("trisolve_ji_csr")
    assert ("L(i,j)", SEARCH) in strategies(c.kernel)
    assert len(c.warnings) == 1 and "binary search" in c.warnings[0]
    inputs = random_inputs(c.spec, 3, density=0.4)
    assert all(d.max_rel <= 1e-12 for d in check(c, inputs))


def test_fibonacci_single_loop():
    k = compiled("fibonacci").kernel
    assert shape(k.body) == [(0, "DenseLoop", "i"), (1, "Compute", None)]
    src = emit_c(k)
    assert "for (int i = 2; i < N; i++) {" in src
    assert "F_vals[i] = (F_vals[(i-1)] + F_vals[(i-2)]);" in src
    assert src.count("for (") == 1


def test_viterbi_pragma_on_i_only():
    spec = load_program(program_path("viterbi"))
    spec = dataclasses.replace(spec, schedule=dataclasses.replace(spec.schedule, parallel_vars=("i",)))
    src = compile_spec(spec).c_source()
    lines = src.splitlines()
    pragmas = [n for n, line in enumerate(lines) if "#pragma omp parallel for" in line]
    assert pragmas
    for n in pragmas:
        assert re.search(r"for \(int i = ", lines[n + 1])


def test_compressed_output_revisited_is_unsupported():
    with pytest.raises(UnsupportedLowering, match="revisited"):
        compiled("cholesky", {"L": CSC})


def test_emit_is_deterministic():
    a = emit_c(compiled("cholesky_csr").kernel)
    b = emit_c(compiled("cholesky_csr").kernel)
    assert a == b
    assert emit_c(compiled("cholesky_csr").kernel, "chol") != a


@pytest.mark.parametrize("name, storage", SPARSE_CASES)
def test_storage_independence(name, storage):
    dense = compiled(name, dense=True)
    sparse = compiled(name, storage)
    assert not any(p.compressed for p in dense.kernel.params)
    for seed, density in itertools.product(range(2), (0.1, 0.5)):
        inputs = random_inputs(sparse.spec, seed, density)
        a, _ = run(dense, inputs)
        b, _ = run(sparse, inputs, masks=random_masks(sparse, inputs, seed))
        for t in a:
            want, got = a[t].to_dense(), b[t].to_dense()
            assert np.abs(got - want).max() <= 1e-12 * max(1.0, np.abs(want).max())


@pytest.mark.parametrize("name, storage", SPARSE_CASES + [(p, None) for p in ("fibonacci", "lu", "viterbi")])
def test_searches_iff_warnings(name, storage):
    c = compiled(name, storage)
    inputs = random_inputs(c.spec, 1, 0.3)
    _, trace = run(c, inputs, masks=random_masks(c, inputs, 1))
    assert (trace.searches > 0) == bool(c.warnings)
    assert bool(c.kernel.searches()) == bool(c.warnings)


@pytest.mark.skipif(GCC is None, reason="gcc not available")
@pytest.mark.parametrize("name", PROGRAMS)
def test_c_matches_interpreter(name):
    c = compile_file(program_path(name))
    inputs = random_inputs(c.spec, 5, 0.3)
    masks = random_masks(c, inputs, 5)
    want, _ = run(c, inputs, masks=masks)
    got = run_c(c.kernel, inputs, c.spec.initial_values, masks)
    for t in want:
        a, b = want[t].to_dense(), got[t].to_dense()
        assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(a).max())


def test_lower_to_kernel_direct():
    c = compiled("spmv", {"A": CSR})
    k = lower_to_kernel(c.rin, c.storage, c.spec.extents, c.shapes)
    assert [type(s).__name__ for s in k.walk()][:2] == ["DenseLoop", "CompressedLoop"]
    assert k.outputs == ["y"]
