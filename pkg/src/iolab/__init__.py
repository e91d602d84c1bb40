"""I/O lower bounds, red-blue pebbling and a simulated 2.5D LU factorization."""

__version__ = "0.1.0"

from .daap import Program, Statement, parse_program  # noqa: E402
from .bounds import program_bound, statement_bound  # noqa: E402

__all__ = ["Program", "Statement", "parse_program", "program_bound", "statement_bound", "__version__"]
