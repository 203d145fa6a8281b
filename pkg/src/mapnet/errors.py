"""Exception hierarchy shared by every mapnet module."""


class MapNetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MapNetError, ValueError):
    pass


class SingularMatrixError(MapNetError, ArithmeticError):
    def __init__(self, message, pivot):
        super().__init__(f"{message} (smallest pivot magnitude {pivot:.3e})")
        self.pivot = pivot


class NumericInstabilityError(MapNetError, ArithmeticError):
    pass


class IsolatedNodeError(MapNetError, ValueError):
    def __init__(self, row):
        super().__init__(f"node {row} has zero degree")
        self.row = row


class IncompleteRelationMapError(MapNetError, ValueError):
    pass


class InsufficientPairsError(MapNetError, ValueError):
    pass


class InvalidEpisodeError(MapNetError, ValueError):
    pass


class ConfigError(MapNetError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class TrainingDivergedError(MapNetError, ArithmeticError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


class FormatError(MapNetError, ValueError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line
