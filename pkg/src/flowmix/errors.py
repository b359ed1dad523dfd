"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, range, tag)."""


class CodecError(ValueError):
    """A flow file could not be parsed or encoded."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or format-incompatible."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


class ConfigError(ValueError):
    """An experiment config file failed schema validation."""
