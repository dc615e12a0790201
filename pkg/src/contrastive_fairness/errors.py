"""Exception hierarchy shared by every module.

The CLI maps ``ContractViolation`` to exit code 2 and ``NumericalFailure`` to
exit code 3.
"""

from __future__ import annotations


class ContrastiveError(Exception):
    pass


class ContractViolation(ContrastiveError, ValueError):
    """A caller broke a documented precondition."""


class NumericalFailure(ContrastiveError, ArithmeticError):
    """A non-finite value showed up where a finite one was required."""


class ParseError(ContractViolation):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ContractViolation):
    pass


class UnmatchableStratumError(ContractViolation):
    def __init__(self, strata):
        self.strata = list(strata)
        super().__init__(f"no candidate records for strata (y, s): {self.strata}")


class TrainingDiverged(NumericalFailure):
    def __init__(self, step: int, last_good=None, detail: str = ""):
        self.step = step
        self.last_good = last_good
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
