import pytest

from recomp.errors import ParseError, ValidationError
from recomp.expr import Constraint, IndexExpr, Reduction, TensorAccess, accesses
from recomp.frontend import (
    COMPRESSED,
    DENSE,
    StorageSpec,
    format_program,
    parse_program,
    parse_recurrence,
    validate,
)

CHOLESKY = """
rec: L(i,j) = (A(i,j)-Sum{k}(L(i,k)*L(j,k)))/L(j,j) : [k<j, j<i]
rec: L(i,j) = sqrt(A(i,j)-Sum{k}(L(i,k)*L(j,k))) : [k<j, j=i]
order: i j k
extent: N = 12
"""


def v(name, off=0):
    return IndexExpr(name, off)


def test_cholesky_recurrence_parses():
    rec = parse_recurrence("L(i,j) = (A(i,j)-Sum{k}(L(i,k)*L(j,k)))/L(j,j) : [k<j,j<i]")
    assert rec.lhs == TensorAccess("L", (v("i"), v("j")))
    reductions = [n for n in [rec.rhs.left.right] if isinstance(n, Reduction)]
    assert reductions and reductions[0].var == "k"
    assert set(rec.constraints) >= {Constraint(v("k"), "lt", v("j")), Constraint(v("j"), "lt", v("i"))}


def test_fibonacci_offsets():
    rec = parse_recurrence("F(i) = F(i-1) + F(i-2) : [2<=i, i<N]")
    assert [a.indices[0] for a in accesses(rec.rhs)] == [v("i", -1), v("i", -2)]


def test_identity_recurrence():
    rec = parse_recurrence("X(i) = X(i) : [i<N]")
    assert accesses(rec.rhs) == [rec.lhs]


def test_syntax_error_reports_position():
    with pytest.raises(ParseError) as err:
        parse_recurrence("L(i,j) = A(i,j) +", line=3)
    assert err.value.line == 3
    assert "expected" in str(err.value)


def test_program_sections():
    spec = validate(parse_program(CHOLESKY + "storage: L = Dense(0) Compressed(1)\nparallel: k\n"))
    assert spec.schedule.ordering == ("i", "j", "k")
    assert spec.schedule.parallel_vars == ("k",)
    assert spec.storage["L"].levels == ((0, DENSE), (1, COMPRESSED))
    assert spec.extents == {"N": 12}
    assert spec.outputs == ["L"] and spec.inputs == ["A"]
    assert spec.concrete_shapes() == {"L": (12, 12), "A": (12, 12)}


def test_order_shorthand_and_init():
    spec = parse_program("rec: F(i) = F(i-1)+F(i-2) : [2<=i]\norder: i\nextent: N = 11\ninit: F(0) = 0\ninit: F(1) = 1\n")
    assert spec.initial_values == {("F", (0,)): 0.0, ("F", (1,)): 1.0}
    assert parse_program("rec: X(i)=B(i)\norder: ij\nextent: N=2\n").schedule.ordering == ("i", "j")


def test_masks_attach_to_storage():
    spec = parse_program(CHOLESKY + "storage: L = Dense(0) Compressed(1)\n"
                         "mask: L = Dense(0) Compressed(1)\nmask: L = Dense(1) Compressed(0)\n")
    assert len(spec.storage["L"].masks) == 2


def test_disjoint_cholesky_regions_validate():
    validate(parse_program(CHOLESKY))


def test_overlapping_regions_rejected():
    text = """
rec: L(i,j) = A(i,j) : [j<i]
rec: L(i,j) = A(i,j)*2 : [j<i]
order: i j
extent: N = 4
"""
    with pytest.raises(ValidationError, match="overlap"):
        validate(parse_program(text))


def test_unbounded_variable_rejected():
    text = "rec: X(i) = Sum{m}(A(i,m))\norder: i m\n"
    with pytest.raises((ValidationError, ParseError)):
        validate(parse_program(text))


def test_border_regions_stay_disjoint():
    text = """
rec: G(i) = G(i-1)+A(i) : [1<=i, i<N-1]
rec: G(i) = A(i) : [i<1]
rec: G(i) = A(i)*2 : [N-1<=i]
order: i
extent: N = 8
"""
    validate(parse_program(text))


def test_unknown_keyword():
    with pytest.raises(ParseError, match="unknown keyword"):
        parse_program("rec: X(i)=B(i)\nbogus: 1\n")


def test_format_round_trip():
    spec = parse_program(CHOLESKY)
    again = parse_program(format_program(spec))
    assert again.recurrences == spec.recurrences
    assert again.schedule == spec.schedule


def test_dense_storage_helper():
    st = StorageSpec.dense(2)
    assert st.is_dense and st.rank == 2
    assert st.format_of(1) == DENSE
