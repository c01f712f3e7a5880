"""Utility modules for PrivICL.

Modules:
    config: Run configuration
    errors: Exception hierarchy
"""

from .config import RunConfig
from .errors import PrivICLError

__all__ = ["RunConfig", "PrivICLError"]
