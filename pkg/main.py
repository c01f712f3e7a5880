"""PrivICL - Differentially Private In-Context Learning.

Command-line launcher. Run ``uv run main.py --help`` for the subcommands.
"""

import sys

from src.privicl.cli.app import main

if __name__ == "__main__":
    sys.exit(main())
