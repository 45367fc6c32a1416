"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericsError (and subclasses) -> 4.
"""


class HiebError(Exception):
    """Base class for all package errors."""


class ConfigError(HiebError):
    """Invalid or inconsistent run configuration."""


class DataError(HiebError):
    """Malformed or unreachable dataset input."""


class NumericsError(HiebError):
    """A numeric contract was violated (non-finite value, bad shape)."""


class SamplerDivergence(NumericsError):
    """A Langevin chain produced a non-finite state."""

    def __init__(self, step, detail=""):
        self.step = step
        msg = f"non-finite chain state at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CheckpointError(HiebError):
    """Checkpoint file rejected (bad magic, version, or config hash)."""
