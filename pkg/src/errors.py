"""Shared exception types for clipreid-desk."""

import logging
from collections.abc import Callable
from functools import wraps
from typing import ParamSpec, TypeVar

logger = logging.getLogger(__name__)

P = ParamSpec('P')
T = TypeVar('T')


class ReIDError(Exception):
    """Base class for every error raised by this package."""
    pass


class ConfigError(ReIDError, ValueError):
    """Raised when a configuration value or combination is invalid."""
    pass


class ContractError(ReIDError, ValueError):
    """Raised when a caller violates an operation's input contract."""
    pass


class NumericalError(ReIDError, ArithmeticError):
    """Raised on non-finite activations or zero-norm embeddings."""
    pass


class DatasetIOError(ReIDError, OSError):
    """Raised when dataset or run files cannot be read or written."""
    pass


def handle_io_errors(func: Callable[P, T]) -> Callable[P, T]:
    """Decorator to turn filesystem errors into DatasetIOError with logging."""
    @wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except ReIDError:
            raise
        except OSError as e:
            logger.error(f"IO error in {func.__name__}: {e}")
            raise DatasetIOError(f"{func.__name__} failed: {e}") from e
    return wrapper
