"""
Error types raised by the matching app.

Each class carries the process exit code the management commands use when
the error escapes a command.
"""


class MultimatchError(Exception):
    exit_code = 1


class ConfigError(MultimatchError):
    """Malformed study configuration."""
    exit_code = 2


class SpecError(ConfigError):
    """A balance constraint or distance setting that does not fit the schema."""


class DataError(MultimatchError):
    exit_code = 3


class ReferentialError(DataError):
    """A unit row points at a cluster that does not exist."""

    def __init__(self, cluster_id, row=None):
        self.cluster_id = cluster_id
        self.row = row
        where = f' (line {row})' if row is not None else ''
        super().__init__(f'Unknown cluster_id "{cluster_id}"{where}')


class StructuralError(DataError):
    pass


class ParseError(DataError):

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        if row is not None:
            message = f'line {row}, column "{column}": {message}'
        super().__init__(message)


class UndefinedSampleError(DataError):
    """A statistic was requested on an empty group."""


class MissingOutcomeError(DataError):
    pass


class NoEstimateError(DataError):
    """The shifted statistic never changes sign inside the search bracket."""


class InfeasibleMatchError(MultimatchError):
    exit_code = 4

    def __init__(self, message, report=None):
        self.report = report or []
        super().__init__(message)
