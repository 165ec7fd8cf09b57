"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class Msa2NetError(Exception):
    exit_code = 1


class ConfigError(Msa2NetError, ValueError):
    """Invalid hyperparameters or shape configuration."""

    exit_code = 1


class ContractError(Msa2NetError, ValueError):
    """A runtime shape/argument contract was violated."""

    exit_code = 1


class UsageError(Msa2NetError, RuntimeError):
    exit_code = 1


class DataError(Msa2NetError, ValueError):
    """Bad data values (labels out of range, missing files)."""

    exit_code = 2


class FormatError(DataError):
    """Malformed file on disk. ``offset`` is the byte offset of the fault, if known."""

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.message = message
        self.path = path
        self.offset = offset


class NumericalError(Msa2NetError, FloatingPointError):
    exit_code = 3
