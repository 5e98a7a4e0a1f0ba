import re
import subprocess
import sys

from recomp.cli import main
from recomp.runtime import read_coordinate_file

from conftest import program_path

CHOLESKY_2 = ("rec: L(i,j) = (A(i,j)-Sum{k}(L(i,k)*L(j,k)))/L(j,j) : [k<j, j<i]\n"
              "rec: L(i,j) = sqrt(A(i,j)-Sum{k}(L(i,k)*L(j,k))) : [k<j, j=i]\n"
              "order: i j k\nextent: N = 2\n")


def call(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def loads(text, tensor):
    return int(re.search(rf"\b{tensor}=(\d+)", text.split("loads:")[1].splitlines()[0]).group(1))


def test_compile_sparse_cholesky(tmp_path, capsys):
    target = tmp_path / "out.c"
    code, _, err = call(capsys, "compile", "--program", program_path("cholesky_csr"), "--emit-c", target)
    assert code == 0
    assert "warning" not in err
    src = target.read_text()
    assert "void kernel(" in src and "L1_pos" in src


def test_compile_prints_c_without_target(capsys):
    code, out, _ = call(capsys, "compile", "--program", program_path("fibonacci"))
    assert code == 0 and out.startswith("#include")


def test_compile_warns_on_mismatched_format(capsys):
    code, _, err = call(capsys, "compile", "--program", program_path("trisolve_ji_csr"), "--explain", "rin")
    assert code == 0
    assert err.count("warning:") == 1 and "binary search" in err
    code, _, err = call(capsys, "compile", "--program", program_path("trisolve_ji_csc"), "--explain", "rin")
    assert code == 0 and "warning" not in err


def test_impossible_ordering_exits_one(capsys):
    code, _, err = call(capsys, "compile", "--program", program_path("forward_reference"))
    assert code == 1
    assert "ordering impossible" in err and "error [rin]" in err


def test_missing_program_exits_one(capsys):
    code, _, err = call(capsys, "compile", "--program", "/nonexistent.rec")
    assert code == 1 and "does not exist" in err


def test_run_writes_outputs(tmp_path, capsys):
    code, out, _ = call(capsys, "run", "--program", program_path("fibonacci"), "--output-dir", tmp_path)
    assert code == 0
    f = read_coordinate_file(str(tmp_path / "F.txt")).to_dense()
    assert f[10] == 55.0
    assert "searches: 0" in out


def test_fused_run_halves_factor_loads(capsys):
    code, fused, _ = call(capsys, "run", "--program", program_path("trisolve_fused"), "--seed", 1)
    assert code == 0
    code, single, _ = call(capsys, "run", "--program", program_path("trisolve"), "--seed", 1)
    assert code == 0
    two_runs = 2 * loads(single, "L")  # one solve per right-hand side
    assert 2 * loads(fused, "L") == two_runs


def test_check_passes(capsys):
    code, out, err = call(capsys, "check", "--program", program_path("cholesky"), "--permute-foralls", "--seed", 3)
    assert code == 0
    assert out.strip().endswith("pass")
    assert "note: A not given" in err


def test_check_with_input_file(tmp_path, capsys):
    prog = tmp_path / "c2.rec"
    prog.write_text(CHOLESKY_2)
    a = tmp_path / "a.txt"
    a.write_text("2 2\n0 0 4\n0 1 2\n1 0 2\n1 1 5\n")
    code, out, _ = call(capsys, "check", "--program", prog, "--input", f"A={a}")
    assert code == 0 and "pass" in out


def test_non_spd_input_fails(tmp_path, capsys):
    prog = tmp_path / "c2.rec"
    prog.write_text(CHOLESKY_2)
    a = tmp_path / "a.txt"
    a.write_text("2 2\n0 0 1\n0 1 2\n1 0 2\n1 1 1\n")
    code, _, err = call(capsys, "check", "--program", prog, "--input", f"A={a}")
    assert code == 2 and "square root" in err


def test_off_by_one_program_fails(tmp_path, capsys):
    prog = tmp_path / "off.rec"
    prog.write_text("rec: S(i) = S(i-1)+A(i)\norder: i\nextent: N = 8\n")
    code, _, err = call(capsys, "check", "--program", prog)
    assert code == 2 and "outside" in err


def test_unknown_input_name(tmp_path, capsys):
    a = tmp_path / "z.txt"
    a.write_text("2\n0 1\n")
    code, _, err = call(capsys, "run", "--program", program_path("fibonacci"), "--input", f"Z={a}")
    assert code == 1 and "not an input" in err


def test_explain_targets(capsys):
    code, out, _ = call(capsys, "explain", "--program", program_path("cholesky"))
    assert code == 0 and "//L1(i,i) ready" in out
    code, out, _ = call(capsys, "explain", "--program", program_path("cholesky"), "--explain", "dag",
                        "--explain", "fragments")
    assert code == 0 and "->" in out and "order:" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "recomp", "check", "--program", program_path("trisolve")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("pass")
