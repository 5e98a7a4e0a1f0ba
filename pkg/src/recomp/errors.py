"""Exception hierarchy. ``CompileError`` subclasses map to CLI exit code 1,
``RuntimeFailure`` subclasses to exit code 2."""


class CompileError(Exception):
    stage = "compile"


class ParseError(CompileError):
    stage = "frontend"

    def __init__(self, message, line=None, column=None, expected=None):
        self.line = line
        self.column = column
        self.expected = expected
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        if expected:
            message = f"{message} (expected {expected})"
        super().__init__(where + message)


class ValidationError(CompileError):
    stage = "frontend"


class FragmentError(CompileError):
    stage = "fragments"


class DependencyCycleError(CompileError):
    stage = "depgraph"

    def __init__(self, cycle):
        self.cycle = list(cycle)
        path = " -> ".join(str(node) for node in self.cycle)
        super().__init__(f"recurrence system has no fragment-level order: {path}")


class OrderingImpossible(CompileError):
    stage = "rin"

    def __init__(self, fragment, unsatisfied):
        self.fragment = fragment
        self.unsatisfied = list(unsatisfied)
        deps = ", ".join(str(a) for a in self.unsatisfied) or "loop structure"
        super().__init__(f"loop ordering impossible: cannot place {fragment} (unsatisfied: {deps})")


class AssumptionError(CompileError):
    stage = "rin"


class TransformError(CompileError):
    stage = "transforms"


class UnsupportedLowering(CompileError):
    stage = "codegen"


class RuntimeFailure(Exception):
    stage = "runtime"


class KernelRuntimeError(RuntimeFailure):
    def __init__(self, message, statement=None):
        self.statement = statement
        if statement is not None:
            message = f"{message} [statement {statement}]"
        super().__init__(message)


class CyclicDependencyError(RuntimeFailure):
    stage = "oracle"

    def __init__(self, path):
        self.path = list(path)
        text = " -> ".join(f"{t}{tuple(c)}" for t, c in self.path)
        super().__init__(f"cyclic dependency: {text}")


class OracleError(RuntimeFailure):
    stage = "oracle"
