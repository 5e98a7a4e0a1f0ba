"""Command-line driver: compile, run, check and explain recurrence programs."""

from __future__ import annotations

import os
import sys
from typing import Dict, List, Optional, Sequence

import click
import numpy as np

from .depgraph import build_dag, topological_order
from .errors import CompileError, RuntimeFailure
from .fragments import program_fragments
from .pipeline import (
    Compiled,
    compare,
    compile_spec,
    expected_outputs,
    load_program,
    random_inputs,
    random_masks,
    run as run_kernel,
)
from .rin import print_rin
from .tensors import format_coordinates, read_coordinate_file, write_coordinate_file

EXPLAIN_TARGETS = ("fragments", "dag", "rin")


def _explain(compiled_or_spec, targets: Sequence[str], spec) -> str:
    parts = []
    frags = program_fragments(spec, normalized=False)
    for target in targets:
        if target == "fragments":
            parts.append("\n".join(str(f) for f in frags))
        elif target == "dag":
            dag = build_dag(frags)
            lines = [f"{a} -> {b}" for a, b in dag.edges]
            lines.append("order: " + "; ".join(str(f.lhs) for f in topological_order(dag)))
            parts.append("\n".join(lines))
        else:
            parts.append(print_rin(compiled_or_spec.rin).rstrip("\n"))
    return "\n\n".join(parts) + "\n"


def _parse_assignments(items: Sequence[str], what: str) -> Dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise click.BadParameter(f"expected TENSOR=FILE, got {item!r}", param_hint=what)
        if not os.path.exists(path):
            raise click.BadParameter(f"file {path!r} does not exist", param_hint=what)
        out[name.strip()] = path
    return out


def _gather_inputs(compiled: Compiled, inputs: Sequence[str], masks: Sequence[str], seed: int):
    spec = compiled.spec
    given = {name: read_coordinate_file(path) for name, path in _parse_assignments(inputs, "--input").items()}
    unknown = set(given) - set(spec.inputs)
    if unknown:
        raise click.BadParameter(f"{', '.join(sorted(unknown))} is not an input of this program "
                                 f"(inputs: {', '.join(spec.inputs) or 'none'})", param_hint="--input")
    missing = [t for t in spec.inputs if t not in given]
    if missing:
        generated = random_inputs(spec, seed)
        for t in missing:
            given[t] = generated[t]
            click.echo(f"note: {t} not given, using random values (seed {seed})", err=True)
    mask_files = _parse_assignments(masks, "--mask")
    mask_data = None
    if any(st.masks for st in spec.storage.values()):
        mask_data = random_masks(compiled, given, seed)
        for t, path in mask_files.items():
            base = read_coordinate_file(path)
            mask_data[t] = [base for _ in spec.storage[t].masks]
    return given, mask_data


def _compile(program: str) -> Compiled:
    return compile_spec(load_program(program))


def _report_warnings(compiled: Compiled) -> None:
    for w in compiled.warnings:
        click.echo(f"warning: {w}", err=True)


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Compile constrained recurrences into dense or sparse loop nests."""


@cli.command()
@click.option("--program", required=True, type=click.Path(exists=True, dir_okay=False), help="Program file.")
@click.option("--emit-c", "emit_c_path", type=click.Path(dir_okay=False), help="Write the kernel as C here.")
@click.option("--explain", "explain", multiple=True, type=click.Choice(EXPLAIN_TARGETS),
              help="Also print an intermediate form.")
def compile(program, emit_c_path, explain):
    """Lower PROGRAM; warnings go to standard error."""
    compiled = _compile(program)
    _report_warnings(compiled)
    if explain:
        click.echo(_explain(compiled, explain, compiled.spec), nl=False)
    if emit_c_path:
        with open(emit_c_path, "w") as fh:
            fh.write(compiled.c_source())
        click.echo(f"wrote {emit_c_path}", err=True)
    elif not explain:
        click.echo(compiled.c_source(), nl=False)


def _common_run_options(f):
    f = click.option("--permute-foralls", is_flag=True,
                     help="Visit forall iterations in a random order drawn from --seed.")(f)
    f = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=0, show_default=True,
                     help="Seed for generated inputs and forall permutation.")(f)
    f = click.option("--mask", "masks", multiple=True, metavar="TENSOR=FILE",
                     help="Sparsity pattern of an output.")(f)
    f = click.option("--input", "inputs", multiple=True, metavar="TENSOR=FILE",
                     help="Coordinate file for an input tensor; missing inputs are generated.")(f)
    f = click.option("--program", required=True, type=click.Path(exists=True, dir_okay=False),
                     help="Program file.")(f)
    return f


@cli.command()
@_common_run_options
@click.option("--output-dir", type=click.Path(file_okay=False), help="Write one coordinate file per output.")
def run(program, inputs, masks, seed, permute_foralls, output_dir):
    """Interpret the compiled kernel and print the access counts."""
    compiled = _compile(program)
    _report_warnings(compiled)
    given, mask_data = _gather_inputs(compiled, inputs, masks, seed)
    outputs, trace = run_kernel(compiled, given, seed if permute_foralls else None, mask_data)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        for name, data in outputs.items():
            path = os.path.join(output_dir, f"{name}.txt")
            write_coordinate_file(path, data)
            click.echo(f"wrote {path}", err=True)
    else:
        for name, data in outputs.items():
            click.echo(f"# {name}")
            click.echo(format_coordinates(data), nl=False)
    click.echo(trace.summary())


@cli.command()
@_common_run_options
@click.option("--tolerance", type=float, default=1e-10, show_default=True, help="Largest relative difference.")
def check(program, inputs, masks, seed, permute_foralls, tolerance):
    """Compare the kernel against the reference evaluator."""
    compiled = _compile(program)
    _report_warnings(compiled)
    given, mask_data = _gather_inputs(compiled, inputs, masks, seed)
    outputs, _ = run_kernel(compiled, given, seed if permute_foralls else None, mask_data)
    diffs = compare(outputs, expected_outputs(compiled, given, mask_data))
    failed = False
    for d in diffs:
        bad = not (d.max_rel <= tolerance) or not np.isfinite(d.max_abs)
        failed |= bad
        click.echo(f"{d.tensor}: max-abs {d.max_abs:.3e}  max-rel {d.max_rel:.3e}  {'FAIL' if bad else 'ok'}")
    if failed:
        raise _Mismatch("kernel disagrees with the reference")
    click.echo("pass")


@cli.command()
@click.option("--program", required=True, type=click.Path(exists=True, dir_okay=False), help="Program file.")
@click.option("--explain", "explain", multiple=True, type=click.Choice(EXPLAIN_TARGETS), default=("rin",),
              show_default=True, help="Intermediate form to print; repeatable.")
def explain(program, explain):
    """Print fragments, the dependency graph or the placed loop nest."""
    spec = load_program(program)
    needs_rin = "rin" in explain
    compiled = compile_spec(spec) if needs_rin else None
    click.echo(_explain(compiled, explain, spec), nl=False)


class _Mismatch(Exception):
    pass


def main(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="recomp", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except CompileError as exc:
        click.echo(f"error [{exc.stage}]: {exc}", err=True)
        return 1
    except _Mismatch as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except RuntimeFailure as exc:
        click.echo(f"error [{exc.stage}]: {exc}", err=True)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
