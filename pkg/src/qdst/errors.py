"""Exception hierarchy shared across the package."""


class QDSTError(Exception):
    """Base class for all package errors."""


class InvalidInput(QDSTError, ValueError):
    pass


class InvalidState(QDSTError, RuntimeError):
    pass


class InternalInvariantViolation(QDSTError, AssertionError):
    pass


class NumericalError(QDSTError, ArithmeticError):
    """Raised when training produces a non-finite value.

    ``diagnostics`` carries whatever the caller knew at the time (loss,
    step, gradient norms) so the failure can be inspected after the fact.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CorruptModel(QDSTError):
    pass


class ParseError(QDSTError, ValueError):
    def __init__(self, message, line_number=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_number is not None:
            where += f"{line_number}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line_number = line_number
        self.path = path


class MissingDocument(QDSTError, KeyError):
    def __init__(self, doc_ids):
        self.doc_ids = sorted(doc_ids)
        super().__init__(f"documents not in corpus: {', '.join(self.doc_ids)}")

    def __str__(self):
        return self.args[0]


class EmptyResult(QDSTError, LookupError):
    pass
