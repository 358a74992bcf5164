"""Toolkit-wide error taxonomy, mapped onto CLI exit codes."""


class GraspTkError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ContractViolation(GraspTkError):
    """A caller broke a documented precondition (bad shape, bad range, ...)."""

    exit_code = 2


class NumericFault(GraspTkError):
    """A computation produced NaN/inf or otherwise lost numeric meaning."""

    exit_code = 3


class GenerationFailure(GraspTkError):
    """Dataset/sample generation exhausted its retry budget."""

    exit_code = 4


class DegenerateInput(GraspTkError):
    """Input is geometrically degenerate (coincident points, empty part, ...)."""

    exit_code = 2
