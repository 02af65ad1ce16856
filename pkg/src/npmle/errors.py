"""Exception hierarchy shared by the solver modules."""


class NPMLEError(Exception):
    """Base class for all package errors."""


class ConfigError(NPMLEError, ValueError):
    """Inconsistent options or shapes."""


class InvalidCovarianceError(NPMLEError, ValueError):
    """A covariance that is not symmetric positive definite."""


class DegenerateRowError(NPMLEError, ValueError):
    """A likelihood row with no positive entry."""

    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


class DomainError(NPMLEError, ValueError):
    """Objective or residual evaluated where Lx has a nonpositive entry."""

    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


class ParseError(NPMLEError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, msg, path=None, line=None):
        loc = ""
        if path is not None:
            loc = str(path)
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + msg)
        self.path = path
        self.line = line
