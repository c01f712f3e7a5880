"""Command-line interface of PrivICL.

Modules:
    app: Argument parsing, dispatch and exit codes
    runner: Query loop with budget enforcement
"""

from . import runner, app

__all__ = ["app", "runner"]
