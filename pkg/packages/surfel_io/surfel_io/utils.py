"""
Utility functions for surfel_io subcommands.
"""

from contextlib import contextmanager

from surfel_io.formats import SchemaError


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2


class StageError(Exception):
    """An exception raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        if isinstance(self.cause, (SchemaError, ValueError, OSError)):
            return EXIT_INPUT
        return EXIT_FAILURE


@contextmanager
def stage(name: str):
    """Label any exception raised in the block with the stage name."""
    try:
        yield
    except StageError:
        raise
    except (ValueError, OSError, RuntimeError) as e:
        raise StageError(name, e) from e


def report_error(err: StageError) -> int:
    print(f"[ERROR] {err.stage}: {err.cause}")
    return err.exit_code
