"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class GlobalRepError(Exception):
    exit_code = 1


class ConfigError(GlobalRepError):
    exit_code = 2


class IngestionError(GlobalRepError):
    exit_code = 3


class IntegrityError(GlobalRepError):
    exit_code = 3


class ContractError(GlobalRepError, ValueError):
    exit_code = 3


class NumericalAbort(GlobalRepError):
    """Raised when a training loss stops being finite.

    ``dump`` carries enough state (class list, rng state, episode index) to
    replay the offending episode.
    """

    exit_code = 4

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
