import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_triangular
from scipy.sparse.csgraph import floyd_warshall as scipy_floyd_warshall

from recomp.errors import CyclicDependencyError, OracleError
from recomp.frontend import parse_program, validate
from recomp.oracle import evaluate
from recomp.runtime import SENTINEL

from conftest import program_path


def program(name, n=None, t=None):
    with open(program_path(name)) as fh:
        text = fh.read()
    lines = []
    for line in text.splitlines():
        if n is not None and line.startswith("extent: N"):
            line = f"extent: N = {n}"
        if t is not None and line.startswith("extent: T"):
            line = f"extent: T = {t}"
        lines.append(line)
    return validate(parse_program("\n".join(lines) + "\n"))


def test_fibonacci():
    out = evaluate(program("fibonacci", n=11), {})
    assert list(out["F"]) == [0, 1, 1, 2, 3, 5, 8, 13, 21, 34, 55]


def test_three_node_shortest_path():
    w = np.array([[0, 1, 5], [100, 0, 1], [100, 100, 0]], dtype=float)
    out = evaluate(program("floyd_warshall", n=3, t=4), {"W": w})
    assert out["SP"][0, 2, -1] == 2.0
    assert out["SP"][0, 2, 0] == 5.0


def test_small_cholesky_against_numpy():
    a = np.array([[4.0, 2.0, 0.4, 0.2], [2.0, 5.0, 1.0, 0.3], [0.4, 1.0, 6.0, 0.5], [0.2, 0.3, 0.5, 3.0]])
    out = evaluate(program("cholesky", n=4), {"A": a})
    np.testing.assert_allclose(out["L"], np.linalg.cholesky(a), rtol=1e-14)


def test_cycle_is_reported():
    spec = parse_program("rec: X(i) = Y(i)\nrec: Y(i) = X(i)\norder: i\nextent: N = 3\n")
    with pytest.raises(CyclicDependencyError) as info:
        evaluate(spec, {})
    assert info.value.path[0] == info.value.path[-1]


def test_overlapping_definitions():
    spec = parse_program("rec: X(i) = A(i)\nrec: X(i) = A(i)*2 : [i<2]\norder: i\nextent: N = 3\n")
    with pytest.raises(OracleError, match="defined by 2"):
        evaluate(spec, {"A": np.ones(3)})


def test_undefined_read_and_unread_cells():
    spec = parse_program("rec: X(i) = Y(i)+1 : [i<2]\nrec: Y(i) = A(i) : [i<1]\norder: i\nextent: N = 3\n")
    with pytest.raises(OracleError, match="no recurrence defines Y"):
        evaluate(spec, {"A": np.ones(3)})
    spec = parse_program("rec: X(i) = A(i)+1 : [i<2]\norder: i\nextent: N = 3\n")
    assert list(evaluate(spec, {"A": np.ones(3)})["X"]) == [2.0, 2.0, 0.0]


def test_missing_and_misshaped_inputs():
    spec = program("trisolve", n=3)
    with pytest.raises(OracleError, match="missing input"):
        evaluate(spec, {"L": np.eye(3)})
    with pytest.raises(OracleError, match="shape"):
        evaluate(spec, {"L": np.eye(4), "B": np.ones(3)})


def test_deep_recursion_is_fine():
    out = evaluate(program("prefix_sum", n=32), {"A": np.arange(32.0)})
    np.testing.assert_array_equal(out["P"], np.cumsum(np.arange(32.0)))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_triangular_solve_matches_scipy(n, seed):
    rng = np.random.default_rng(seed)
    low = np.tril(rng.uniform(0.1, 1.0, (n, n))) + n * np.eye(n)
    b = rng.uniform(-1, 1, n)
    out = evaluate(program("trisolve", n=n), {"L": low, "B": b})
    np.testing.assert_allclose(out["X"], solve_triangular(low, b, lower=True), rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 7), seed=st.integers(0, 10_000))
def test_shortest_paths_match_scipy(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(1, 101, (n, n)).astype(float)
    np.fill_diagonal(w, 0.0)
    out = evaluate(program("floyd_warshall", n=n, t=n + 1), {"W": w})
    np.testing.assert_array_equal(out["SP"][:, :, -1], scipy_floyd_warshall(w))
    assert out["SP"].max() < SENTINEL
