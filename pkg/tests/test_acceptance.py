"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line straight to the terminal, even
under output capture.
"""

import contextlib
import dataclasses
import itertools
import time

import numpy as np
import pytest

from recomp.errors import OrderingImpossible, TransformError
from recomp.frontend import COMPRESSED, DENSE, StorageSpec
from recomp.pipeline import (
    check,
    compile_spec,
    expected_outputs,
    load_program,
    random_inputs,
    random_masks,
    run,
)
from recomp.rin import FOR, FORALL, Assign, Loop, Readiness, lower, print_rin
from recomp.transforms import mark_parallel

from conftest import program_path

CSR = StorageSpec(((0, DENSE), (1, COMPRESSED)))
CSC = StorageSpec(((1, DENSE), (0, COMPRESSED)))

SUITE = ["backward_reference", "cholesky", "cholesky_csr", "fibonacci", "floyd_warshall", "floyd_warshall_2d",
         "gauss_seidel", "lu", "needleman_wunsch", "prefix_sum", "sddmm", "spmv", "sqrt_prefix_ik",
         "sqrt_prefix_ki", "trisolve", "trisolve_fused", "trisolve_ji", "trisolve_ji_csc", "trisolve_ji_csr",
         "viterbi"]

ALGORITHMS = ["cholesky", "lu", "trisolve", "prefix_sum", "fibonacci", "viterbi", "floyd_warshall",
             "needleman_wunsch", "gauss_seidel", "spmv", "sddmm"]

# matrix tensors stored compressed, and the loop order that walks them along their storage
SPARSE = {
    "trisolve": (["L"], "ij", "ji"),
    "cholesky": (["A", "L"], "ijk", "jik"),
    "spmv": (["A"], "ij", "ji"),
    "sddmm": (["B", "C"], "ijk", "jik"),
}


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def report(number, title, budget=None):
        start = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - start
            if budget is not None:
                assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget}s"
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            with capsys.disabled():
                print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.2f}s)")
    return report


def load(name):
    return load_program(program_path(name))


def with_order(spec, order):
    return dataclasses.replace(spec, schedule=dataclasses.replace(spec.schedule, ordering=tuple(order)))


def outline(prog):
    """Loop kinds, statements and markers with their nesting depth."""
    out = []

    def rec(body, depth):
        for item in body:
            if isinstance(item, Loop):
                out.append((depth, item.kind, item.var))
                rec(item.body, depth + 1)
            elif isinstance(item, Readiness):
                out.append((depth, "ready", str(item.marker)))
            else:
                out.append((depth, "stmt", str(item)))
    rec(prog.body, 0)
    return out


def test_golden_rin(criterion):
    with criterion(1, "golden RIN for ijk Cholesky", budget=1.0):
        prog = lower(load("cholesky"))
        assert outline(prog) == [
            (0, FOR, "i"),
            (1, "ready", "L(:i,:)"),
            (1, FOR, "j"),
            (2, "ready", "L(i,:j)"),
            (2, FORALL, "k"),
            (3, "stmt", "L1(i,j) += L(i,k)*L(j,k)"),
            (2, "ready", "L1(i,j)"),
            (2, "stmt", "L(i,j) = (A(i,j)-L1(i,j))/L(j,j)"),
            (2, "ready", "L(i,j)"),
            (2, "stmt", "L1(i,i) += L(i,j)*L(i,j)"),
            (2, "ready", "L1(i,i)"),
            (1, "stmt", "L(i,i) = sqrt(A(i,i)-L1(i,i))"),
        ]
        text = print_rin(prog)
        assert text.count("//") == 5 and text.count("=") - text.count("+=") == 2


def test_six_cholesky_orderings(criterion):
    with criterion(2, "six Cholesky orderings against the oracle", budget=10.0):
        base = load("cholesky")
        assert base.extents["N"] == 12
        for order in itertools.permutations("ijk"):
            c = compile_spec(with_order(base, order))
            for seed in range(10):
                inputs = random_inputs(c.spec, seed)
                out, _ = run(c, inputs)
                low = out["L"].to_dense()
                ref = expected_outputs(c, inputs)["L"]
                assert np.abs(low - ref).max() <= 1e-10 * np.abs(ref).max(), order
                a = np.tril(inputs["A"])  # only the lower triangle is read
                assert np.abs(low @ low.T - (a + np.tril(a, -1).T)).max() <= 1e-9, order


def test_algorithm_coverage(criterion):
    with criterion(3, "algorithm coverage with dense storage", budget=60.0):
        for name in ALGORITHMS:
            spec = dataclasses.replace(load(name), storage={})
            assert max(spec.extents.values()) <= 32, name
            c = compile_spec(spec)
            assert not any(p.compressed for p in c.kernel.params), name
            for seed in range(2):
                diffs = check(c, random_inputs(spec, seed))
                assert all(d.max_rel <= 1e-10 for d in diffs), (name, diffs)


def test_sparse_equals_dense(criterion):
    with criterion(4, "CSR and CSC kernels match dense storage"):
        for name, (tensors, row_order, col_order) in SPARSE.items():
            base = load(name)
            for fmt, order in ((CSR, row_order), (CSC, col_order)):
                storage = {t: fmt for t in tensors}
                if name == "sddmm":
                    storage["C"] = fmt.add_mask(fmt)
                sparse = compile_spec(with_order(dataclasses.replace(base, storage=storage), order))
                dense = compile_spec(with_order(dataclasses.replace(base, storage={}), order))
                assert max(base.extents.values()) <= 32
                for seed, density in itertools.product(range(2), (0.1, 0.3, 0.5)):
                    inputs = random_inputs(sparse.spec, seed, density)
                    masks = random_masks(sparse, inputs, seed)
                    assert all(d.max_rel <= 1e-10 for d in check(sparse, inputs, masks=masks))
                    got, _ = run(sparse, inputs, masks=masks)
                    want, _ = run(dense, inputs)
                    for t in want:
                        a, b = got[t].to_dense(), want[t].to_dense()
                        assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max(), (name, order, t)


def test_fusion_halves_loads(criterion):
    with criterion(5, "fused solves load the factor half as often"):
        fused = compile_spec(load("trisolve_fused"))
        single = load("trisolve")
        inputs = random_inputs(fused.spec, 3)
        out, trace = run(fused, inputs)
        x, tx = run(compile_spec(single), {"L": inputs["L"], "B": inputs["B"]})
        y, ty = run(compile_spec(single), {"L": inputs["L"], "B": inputs["C"]})
        assert 2 * trace.loads["L"] == tx.loads["L"] + ty.loads["L"]
        assert np.array_equal(out["X"].to_dense(), x["X"].to_dense())
        assert np.array_equal(out["Y"].to_dense(), y["X"].to_dense())


def test_forall_permutation_invariance(criterion):
    with criterion(6, "forall order never changes results; assumption loops are for"):
        for name in SUITE:
            c = compile_spec(load(name))
            inputs = random_inputs(c.spec, 11, 0.4)
            masks = random_masks(c, inputs, 11)
            base, _ = run(c, inputs, masks=masks)
            for seed in range(20):
                out, _ = run(c, inputs, permute_foralls=seed, masks=masks)
                for t in base:
                    assert np.array_equal(out[t].to_dense(), base[t].to_dense()), (name, seed)
        kinds = {l.var: l.kind for l in lower(load("cholesky")).loops()}
        assert kinds == {"i": FOR, "j": FOR, "k": FORALL}
        jik = lower(with_order(load("cholesky"), "jik"))
        assert {l.var for l in jik.loops() if l.kind == FOR} == {"j"}


def test_timestep_removal(criterion):
    with criterion(7, "Floyd-Warshall with and without the timestep dimension"):
        full = compile_spec(load("floyd_warshall"))
        slim = compile_spec(load("floyd_warshall_2d"))
        assert full.spec.extents["N"] == 16
        rng = np.random.default_rng(7)
        for _ in range(3):
            w = rng.integers(1, 101, (16, 16)).astype(float)
            np.fill_diagonal(w, 0.0)
            a, _ = run(full, {"W": w})
            b, _ = run(slim, {"W": w})
            assert np.array_equal(a["SP"].to_dense()[:, :, -1], b["SP"].to_dense())
        stepping = [l for l in slim.rin.loops() if l.var == "k"]
        assert stepping and all(l.kind == FOR for l in stepping)
        writers = {l.var for top in stepping for l in _loops_in(top) if _writes(l, "SP")}
        assert writers == {"i", "j"}
        for var in writers:
            with pytest.raises(TransformError):
                mark_parallel(slim.rin, var, slim.storage)


def _loops_in(loop):
    for item in loop.body:
        if isinstance(item, Loop):
            yield item
            yield from _loops_in(item)


def _writes(loop, tensor):
    return any((isinstance(s, Assign) and s.lhs.tensor == tensor) or (isinstance(s, Loop) and _writes(s, tensor))
               for s in loop.body)


def test_impossible_ordering(criterion):
    with criterion(8, "forward reference rejected, backward form accepted"):
        with pytest.raises(OrderingImpossible, match="ordering impossible"):
            compile_spec(load("forward_reference"))
        ok = compile_spec(load("backward_reference"))
        assert all(d.max_rel == 0 for d in check(ok, random_inputs(ok.spec, 0)))


def test_search_warnings(criterion):
    with criterion(9, "searches and warnings follow the storage order"):
        rows = compile_spec(load("trisolve_ji_csr"))
        cols = compile_spec(load("trisolve_ji_csc"))
        assert list(rows.spec.schedule.ordering) == list(cols.spec.schedule.ordering) == ["j", "i"]
        inputs = random_inputs(rows.spec, 5, 0.4)
        _, tr = run(rows, inputs)
        _, tc = run(cols, inputs)
        assert len(rows.warnings) >= 1 and tr.searches > 0
        assert cols.warnings == [] and tc.searches == 0


def test_substitution_listings(criterion):
    with criterion(10, "sqrt-prefix listings for ik and ki"):
        ik = outline(lower(load("sqrt_prefix_ik")))
        ki = outline(lower(load("sqrt_prefix_ki")))
        assert ik == [
            (0, FOR, "i"),
            (1, "ready", "S(:i)"),
            (1, FORALL, "k"),
            (2, "stmt", "S1(i) += S(k)"),
            (1, "ready", "S1(i)"),
            (1, "stmt", "S(i) = sqrt(S1(i))"),
        ]
        assert ki == [
            (0, FOR, "k"),
            (1, "ready", "S(:k)"),
            (1, "ready", "S1(:k+1)"),
            (1, "stmt", "S(k) = sqrt(S1(k))"),
            (1, "ready", "S(k)"),
            (1, FORALL, "i"),
            (2, "stmt", "S1(i) += S(k)"),
        ]
