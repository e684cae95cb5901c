"""Exception hierarchy. The CLI maps these onto exit codes."""


class ColorS4LError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(ColorS4LError):
    """Invalid or incomplete configuration (usage problem)."""

    exit_code = 1


class DataError(ColorS4LError):
    """Missing, truncated or corrupt input data."""

    exit_code = 2


class CheckpointError(DataError):
    """Corrupt or unreadable checkpoint container."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint is well formed but does not fit the requested object."""


class ContractError(ColorS4LError):
    """A caller violated an operation's precondition (e.g. batch sizes)."""

    exit_code = 1


class NumericError(ColorS4LError):
    """Non-finite activations, losses or gradients."""

    exit_code = 3
