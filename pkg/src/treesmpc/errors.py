"""Exception types shared across the package."""


class TreeSmpcError(Exception):
    """Base class for all package errors."""


class ParseError(TreeSmpcError):
    """Input document is malformed (bad JSON, missing keys, wrong shapes)."""


class ValidationError(TreeSmpcError):
    """Input parsed but violates a model or tree invariant.

    ``violations`` lists every failed invariant, not just the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DimensionError(TreeSmpcError):
    """Operands have incompatible shapes."""
