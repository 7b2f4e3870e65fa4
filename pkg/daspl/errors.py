"""
Errors Module

This module defines the exception hierarchy shared by every DA-SPL module.
Library code raises these; only the command line turns them into messages
and exit codes.
"""

from typing import List, Optional


class DasplError(Exception):
    """Base class for every error raised by the daspl package."""

    exit_code = 2


class ShapeError(DasplError):
    """An operation received tensors whose shapes do not fit together."""


class DomainError(DasplError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(DasplError):
    """A caller broke a documented precondition."""


class ConfigError(DasplError):
    """One or more configuration values are invalid.

    Args:
        message: Summary line.
        problems: Every individual violation, reported together.
    """

    exit_code = 1

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class ParseError(DasplError):
    """A dataset line could not be parsed.

    Args:
        message: What went wrong.
        line_number: 1-based line number in the offending file.
    """

    exit_code = 1

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ValidationError(DasplError):
    """A record parsed correctly but holds out-of-range values."""

    exit_code = 1


class NonFiniteError(DasplError):
    """A NaN or Inf appeared; ``name`` identifies the first offending tensor."""

    def __init__(self, message: str, name: str):
        self.name = name
        super().__init__(f"{message} (first non-finite tensor: {name})")


class CheckpointError(DasplError):
    """A checkpoint file is missing, truncated or of an unknown version."""


class VocabularyMismatchError(DasplError):
    """Input text uses words the checkpoint vocabulary has never seen."""

    exit_code = 1
