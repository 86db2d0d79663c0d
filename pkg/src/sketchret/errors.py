"""Shared exception types and their CLI exit codes."""


class UsageError(Exception):
    """Caller misused an API or CLI surface (bad subcommand, missing input)."""

    exit_code = 2


class ConfigurationError(Exception):
    """A config value, architecture descriptor, or dataset failed validation."""

    exit_code = 3


class NumericalError(Exception):
    """Non-finite or out-of-range values were produced where finite ones are required."""

    exit_code = 4


class CorpusError(Exception):
    """Corpus files are missing, corrupt, or fail their checksums."""

    exit_code = 5


class AuditViolation(Exception):
    """A guarded data split was read while the access audit forbade it."""

    exit_code = 3


class DegenerateBatchError(Exception):
    """A batch cannot support the requested sampling (e.g. <2 identities)."""

    exit_code = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigurationError, NumericalError, CorpusError,
                        AuditViolation, DegenerateBatchError)):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 5
    return 1
