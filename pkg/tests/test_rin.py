import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recomp.errors import OrderingImpossible
from recomp.expr import Constraint, TensorAccess, var
from recomp.fragments import skeleton_constraints, skeleton_var_extents
from recomp.frontend import parse_program, validate
from recomp.oracle import evaluate
from recomp.rin import (
    FOR,
    FORALL,
    All,
    Assign,
    Exact,
    Location,
    Loop,
    Prefix,
    Readiness,
    ReadinessMarker,
    build_skeleton,
    covers,
    lower,
    print_rin,
    ready_at_location,
    verify_rin,
)
from recomp.runtime import ReadinessViolation, run_rin

from conftest import program_path

SUITE = ["backward_reference", "cholesky", "fibonacci", "floyd_warshall", "floyd_warshall_2d", "gauss_seidel",
         "lu", "needleman_wunsch", "prefix_sum", "sddmm", "spmv", "sqrt_prefix_ik", "sqrt_prefix_ki",
         "trisolve", "trisolve_fused", "trisolve_ji", "viterbi"]

CHOLESKY_IJK = """\
for i<N
  //L(:i,:) ready
  for j<i
    //L(i,:j) ready
    forall k<j
      L1(i,j) += L(i,k)*L(j,k)
    //L1(i,j) ready
    L(i,j) = (A(i,j)-L1(i,j))/L(j,j)
    //L(i,j) ready
    L1(i,i) += L(i,j)*L(i,j)
    //L1(i,i) ready
  L(i,i) = sqrt(A(i,i)-L1(i,i))"""


def spec_of(text):
    return validate(parse_program(text))


def load(name):
    with open(program_path(name)) as fh:
        return spec_of(fh.read())


def reorder(spec, order):
    text = open(program_path("cholesky")).read().replace("order: i j k", "order: " + " ".join(order))
    return spec_of(text)


def skeleton(spec):
    return build_skeleton(spec.schedule.ordering, skeleton_constraints(spec), skeleton_var_extents(spec),
                          list(spec.extents))


def nest(prog):
    out, body = [], prog.body
    while body and isinstance(body[0], Loop):
        out.append((body[0].kind, body[0].space.header(body[0].var)))
        body = body[0].body
    return out


def run_checked(spec, prog, seed=0, permute=None):
    rng = np.random.default_rng(seed)
    shapes = spec.concrete_shapes()
    inputs = {}
    for t in spec.inputs:
        a = rng.uniform(0.1, 1.0, shapes[t])
        if a.ndim == 2 and a.shape[0] == a.shape[1]:
            a = (a + a.T) / 2 + a.shape[0] * np.eye(a.shape[0])
        inputs[t] = a
    return inputs, run_rin(prog, shapes, spec.extents, inputs, spec.initial_values, permute)


def test_skeleton_ijk_cholesky():
    prog = skeleton(load("cholesky"))
    assert nest(prog) == [(FORALL, "i<N"), (FORALL, "j<i"), (FORALL, "k<j")]
    assert prog.assumptions == {}


def test_skeleton_jik_spaces():
    prog = skeleton(reorder(load("cholesky"), "jik"))
    assert nest(prog) == [(FORALL, "j<N"), (FORALL, "j<i<N"), (FORALL, "k<j")]


def test_skeleton_single_variable():
    prog = skeleton(load("fibonacci"))
    assert nest(prog) == [(FORALL, "1<i<N")]


def test_cholesky_ijk_matches_golden_listing():
    assert print_rin(lower(load("cholesky"))).rstrip() == CHOLESKY_IJK


def test_ready_at_accumulate_statement():
    prog = lower(load("cholesky"))
    stmt = next(s for s in prog.assigns() if str(s) == "L1(i,j) += L(i,k)*L(j,k)")
    loc, _ = prog.locate(stmt)
    assert {str(m) for m in ready_at_location(prog, loc)} == {"L(:i,:)", "L(i,:j)"}
    assert ready_at_location(prog, Location((), 0)) == []


def _brute_visibility(prog):
    """Map every slot to the markers lexical scope makes visible there."""
    counter = [0]
    slots, markers = {}, []

    def rec(body, path, ancestors):
        for idx, item in enumerate(body):
            slots[(path, idx)] = (counter[0], ancestors)
            counter[0] += 1
            if isinstance(item, Readiness) and item.completes is None:
                markers.append((counter[0] - 1, ancestors, item))
            elif isinstance(item, Loop):
                rec(item.body, path + (idx,), ancestors + (id(item),))
                end = slots[(path + (idx,), len(item.body))][0]
                # a completion marker speaks for the code after its loop
                markers.extend((end, ancestors, m) for m in item.body
                               if isinstance(m, Readiness) and m.completes == item.var)
        slots[(path, len(body))] = (counter[0], ancestors)
        counter[0] += 1

    rec(prog.body, (), ())
    out = {}
    for key, (at, anc) in slots.items():
        out[key] = {str(item.marker) for m_at, m_anc, item in markers
                    if m_at < at and set(m_anc) <= set(anc)}
    return out


def test_visibility_matches_brute_force():
    prog = lower(load("cholesky"))
    expected = _brute_visibility(prog)
    for (path, idx), seen in expected.items():
        got = {str(m) for m in ready_at_location(prog, Location(path, idx))}
        assert got == seen, (path, idx)
    # marker inside loop j, queried after loop j closes but inside loop i
    after_j = Location((0,), 2)
    assert "L(i,:j)" not in {str(m) for m in ready_at_location(prog, after_j)}


def test_covers_examples():
    i, j, k = var("i"), var("j"), var("k")
    row_prefix = ReadinessMarker("L", (Prefix(i), All()))
    assert covers(row_prefix, TensorAccess("L", (j, k)), [Constraint(j, "lt", i)], ["N"])
    assert not covers(row_prefix, TensorAccess("L", (i, k)), [], ["N"])
    col_prefix = ReadinessMarker("L", (Exact(i), Prefix(j)))
    assert covers(col_prefix, TensorAccess("L", (i, k)), [Constraint(k, "lt", j)], ["N"])
    assert not covers(col_prefix, TensorAccess("L", (j, k)), [Constraint(k, "lt", j)], ["N"])
    assert not covers(row_prefix, TensorAccess("M", (j, k)), [Constraint(j, "lt", i)], ["N"])


@pytest.mark.parametrize("offset", range(-3, 4))
def test_prefix_cover_brute_force(offset):
    i = var("i")
    marker = ReadinessMarker("F", (Prefix(i),))
    claimed = covers(marker, TensorAccess("F", (i.shift(offset),)), [], ["N"])
    # the prefix holds cells 0..i-1; F(i+offset) is among them for every i exactly when offset < 0
    truth = all(i_val + offset < i_val for i_val in range(12))
    assert claimed == truth


def test_placement_without_markers_needs_assumptions():
    prog = lower(load("cholesky"))
    loops = {l.var: l.kind for l in prog.loops()}
    assert loops == {"i": FOR, "j": FOR, "k": FORALL}
    assert {v: str(ms[0]) for v, ms in prog.assumptions.items()} == {"i": "L(:i,:)", "j": "L(i,:j)"}


def test_statement_placed_right_after_its_dependency():
    prog = lower(spec_of("rec: Y(i) = A(i)*2\nrec: X(i) = Y(i)+1\norder: i\nextent: N = 4\n"))
    body = prog.body[0].body
    y_at = next(n for n, s in enumerate(body) if isinstance(s, Assign) and s.lhs.tensor == "Y")
    x_at = next(n for n, s in enumerate(body) if isinstance(s, Assign) and s.lhs.tensor == "X")
    assert str(body[y_at + 1]) != "" and isinstance(body[y_at + 1], Readiness)
    assert x_at == y_at + 2
    assert all(l.kind == FORALL for l in prog.loops())


def test_forward_reference_is_impossible():
    with pytest.raises(OrderingImpossible, match="ordering impossible") as info:
        lower(load("forward_reference"))
    assert "S(i+1)" in str(info.value)


def test_backward_reference_compiles():
    prog = lower(load("backward_reference"))
    assert FOR in [l.kind for l in prog.loops() if l.var == "i"]


def test_verify_golden_ok_and_broken_negative():
    spec = load("cholesky")
    prog = lower(spec)
    assert verify_rin(prog, spec) == []
    broken = copy.deepcopy(prog)
    j_body = broken.body[0].body[1].body
    assert isinstance(j_body[0], Readiness) and isinstance(j_body[1], Loop)
    j_body[0], j_body[1] = j_body[1], j_body[0]
    problems = verify_rin(broken, spec)
    assert problems and "L1(i,j)" in problems[0]


def test_viterbi_loop_kinds():
    spec = load("viterbi")
    prog = lower(spec)
    assert verify_rin(prog, spec) == []
    kinds = {(l.var, l.kind) for l in prog.loops()}
    assert ("j", FOR) in kinds
    assert {k for v, k in kinds if v in "ik"} == {FORALL}


def test_fusion_single_root_loop():
    prog = lower(load("trisolve_fused"))
    roots = [s for s in prog.body if isinstance(s, Loop)]
    assert [l.var for l in roots] == ["i"]
    assert {s.lhs.tensor for s in prog.assigns()} == {"X", "X1", "Y", "Y1"}


@pytest.mark.parametrize("name", SUITE)
def test_suite_invariants(name):
    spec = load(name)
    prog = lower(spec)
    assert verify_rin(prog, spec) == []
    for_loops = {l.var for l in prog.loops() if l.kind == FOR}
    assert for_loops == set(prog.assumptions) | set(prog.timestep_loops)
    rank = max(len(s) for t, s in spec.concrete_shapes().items() if t in spec.outputs)
    assert len(prog.assumptions) <= rank
    order = list(spec.schedule.ordering)
    for _, loops in prog.walk():
        idx = [order.index(l.var) for l in loops]
        assert idx == sorted(idx)


@pytest.mark.parametrize("name", SUITE)
def test_markers_hold_dynamically(name):
    spec = load(name)
    prog = lower(spec)
    for permute in (None, 5):
        inputs, out = run_checked(spec, prog, permute=permute)
        ref = evaluate(spec, inputs)
        for t in spec.outputs:
            np.testing.assert_allclose(out[t], ref[t], rtol=1e-10, atol=1e-12)


def test_misplaced_marker_is_caught():
    spec = load("cholesky")
    prog = lower(spec)
    j_body = prog.body[0].body[1].body
    tail = j_body[-1]
    assert tail.completes == "j"
    tail.completes = None  # now claims L1(i,i) final after the first j iteration
    with pytest.raises(ReadinessViolation):
        run_checked(spec, prog)


@settings(max_examples=40, deadline=None)
@given(a=st.integers(1, 3), b=st.integers(1, 3), forward=st.booleans())
def test_one_dimensional_recurrences(a, b, forward):
    sign = "+" if forward else "-"
    text = (f"rec: S(i) = S(i{sign}{a})+S(i{sign}{b})*C(i) : [{'i<N-' + str(max(a, b)) if forward else str(max(a, b)) + '<=i'}]\n"
            f"rec: S(i) = C(i) : [{'N-' + str(max(a, b)) + '<=i' if forward else 'i<' + str(max(a, b))}]\n"
            "order: i\nextent: N = 10\n")
    spec = spec_of(text)
    if forward:
        with pytest.raises(OrderingImpossible):
            lower(spec)
        return
    prog = lower(spec)
    assert verify_rin(prog, spec) == []
    inputs, out = run_checked(spec, prog, permute=1)
    np.testing.assert_allclose(out["S"], evaluate(spec, inputs)["S"], rtol=1e-12)
