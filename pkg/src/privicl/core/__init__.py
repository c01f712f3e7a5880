"""Core logic of the PrivICL toolkit.

Modules:
    mechanisms: Noisy-max, Gaussian, exponential, FindBestK, PTR and joint EM
    accounting: Privacy ledger, PRV and RDP accountants, noise calibration
    aggregation: Partitioning and the classify / ESA / KSA pipelines
    backend: Mock and HTTP language model backends
    metrics: ROUGE, Levenshtein similarity and accuracy
    prompts: Prompt templates
    text: Tokenization
    storage: JSON-lines persistence
"""

from . import text, prompts, storage, mechanisms, accounting, backend, aggregation, metrics

__all__ = [
    "text",
    "prompts",
    "storage",
    "mechanisms",
    "accounting",
    "backend",
    "aggregation",
    "metrics",
]
