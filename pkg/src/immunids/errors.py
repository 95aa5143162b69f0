"""Exception hierarchy shared by all layers."""


class IDSError(Exception):
    """Base class for engine errors."""


class ParseError(IDSError, ValueError):
    """Malformed input text. Carries the 1-based line and column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ValidationError(IDSError, ValueError):
    pass


class ConfigurationError(IDSError):
    pass


class PatternConflictError(IDSError):
    """The same sequence was offered with both self and nonself labels."""


class TrainingError(IDSError):
    pass


class NotTrainedError(IDSError):
    pass


class ConvergenceError(IDSError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class IntegrityError(IDSError):
    pass


class IncompleteError(IDSError):
    def __init__(self, update_id, missing):
        self.update_id = update_id
        self.missing = sorted(missing)
        super().__init__(f"update {update_id} incomplete, missing fragments {self.missing}")


class ModelVersionError(IDSError):
    pass
