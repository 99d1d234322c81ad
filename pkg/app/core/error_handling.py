"""
Error types and error handling utilities for the MDT toolkit
"""
import functools
import logging
import sys
from typing import Callable, ParamSpec, TypeVar

from pydantic import ValidationError

logger = logging.getLogger(__name__)

P = ParamSpec('P')
T = TypeVar('T')

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class MDTError(Exception):
    """Base class for every error raised by the toolkit"""


class ShapeError(MDTError):
    """Tensor or record dimensions do not line up"""


class ContractError(MDTError):
    """A documented precondition or postcondition was violated"""


class NonFiniteError(MDTError):
    """NaN or Inf reached a place where only finite values are allowed"""


class BackwardError(MDTError):
    """Reverse pass requested on a graph that cannot be differentiated"""


class UndefinedMetricError(MDTError):
    """Metric is undefined for the given labels (e.g. a single class)"""


class DatasetFormatError(MDTError):
    """Malformed manifest, image or stats file"""


class CheckpointFormatError(DatasetFormatError):
    """Malformed checkpoint or attention trace file"""


class ConfigError(MDTError):
    """Bad configuration or command-line usage"""


def handle_file_errors(func: Callable[P, T]) -> Callable[P, T]:
    """
    Decorator to turn OS-level file errors into DatasetFormatError
    """
    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except FileNotFoundError as e:
            logger.error(f"File not found: {e.filename}")
            raise DatasetFormatError(f"File not found: {e.filename}") from e
        except PermissionError as e:
            logger.error(f"Permission denied: {e.filename}")
            raise DatasetFormatError(f"Permission denied: {e.filename}") from e
        except IsADirectoryError as e:
            raise DatasetFormatError(f"Expected a file, got a directory: {e.filename}") from e
    return wrapper


def cli_error_handler(func: Callable[P, int]) -> Callable[P, int]:
    """
    Decorator mapping failures of a CLI command to process exit codes
    """
    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except (ConfigError, ValidationError) as e:
            logger.error(f"Usage error in {func.__name__}: {e}")
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except (MDTError, OSError) as e:
            logger.error(f"❌ {func.__name__} failed: {e}")
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    return wrapper
