"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, checkpoint 4).
"""


class PromptclError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptclError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(PromptclError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(PromptclError):
    """Invalid experiment configuration; message aggregates all problems."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataFormatError(PromptclError):
    """A dataset file or record does not match the expected binary layout."""


class CheckpointError(PromptclError):
    """A checkpoint is missing, truncated, or has a bad manifest."""
