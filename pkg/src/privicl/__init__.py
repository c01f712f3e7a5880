"""PrivICL - Differentially Private In-Context Learning.

A toolkit that answers queries with an ensemble of few-shot prompts built from
disjoint subsets of private exemplars, and releases the ensemble's answer
through differentially private aggregation with exact privacy accounting.

Modules:
    core: Mechanisms, accounting, aggregation pipelines, backends and metrics
    utils: Configuration and errors
    cli: Command-line entry point and query runner
"""

from . import core, utils, cli

__all__ = ["core", "utils", "cli"]
