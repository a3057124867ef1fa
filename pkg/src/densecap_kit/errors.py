"""Exception types shared across the toolkit."""


class DenseCapError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(DenseCapError, ValueError):
    """Raised when a value violates a data-model invariant.

    ``violations`` holds one ``"field.path rule"`` string per broken rule.
    """

    def __init__(self, violations, context=None):
        self.violations = list(violations)
        head = f"{context}: " if context else ""
        super().__init__(head + "; ".join(self.violations))


class FormatError(DenseCapError, ValueError):
    """Raised when a file cannot be parsed (bad JSON, bad magic, truncated binary)."""

    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
