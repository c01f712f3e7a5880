"""Run data storage and retrieval.

This module persists everything a run reads or writes as JSON lines: exemplar
and query files, per-query results, and the privacy ledger that sits next to
the results file.
"""

import json
import logging
from collections.abc import Iterable
from enum import Enum
from pathlib import Path
from typing import Any, cast

import numpy as np

logger = logging.getLogger(__name__)

LEDGER_SUFFIX = ".ledger.jsonl"


def make_serializable(obj: Any) -> Any:
    """Recursively convert object to JSON-serializable format.

    Args:
        obj: Object to convert.

    Returns:
        Serializable representation (Enums as names, numpy scalars as Python
        numbers, sets as sorted lists, containers recursively converted).
    """
    if isinstance(obj, Enum):
        return obj.name
    elif isinstance(obj, np.generic):
        return obj.item()
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, dict):
        obj_dict = cast(dict[Any, Any], obj)
        return {make_serializable(k): make_serializable(v) for k, v in obj_dict.items()}
    elif isinstance(obj, (set, frozenset)):
        return sorted(make_serializable(i) for i in obj)
    elif isinstance(obj, (list, tuple)):
        return [make_serializable(i) for i in obj]
    else:
        return obj


def write_jsonl(path: Path | str, records: Iterable[dict[str, Any]]) -> None:
    """Write records to ``path``, one JSON object per line, replacing the file."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(make_serializable(record), ensure_ascii=False) + "\n")


def append_jsonl(path: Path | str, records: Iterable[dict[str, Any]]) -> None:
    """Append records to ``path``, one JSON object per line."""
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(make_serializable(record), ensure_ascii=False) + "\n")


def read_jsonl(path: Path | str) -> list[dict[str, Any]]:
    """Read every record of a JSON-lines file.

    Blank lines are skipped. A missing file reads as empty.

    Raises:
        ValueError: If a line is not a JSON object.
    """
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{number}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{number}: expected a JSON object")
            records.append(record)
    return records


class Storage:
    """Manages the result and ledger files of one pipeline run.

    The ledger file sits next to the results as ``<results>.ledger.jsonl``.
    """

    def __init__(self, output_path: str | Path) -> None:
        """Initialize storage manager.

        Args:
            output_path: JSON-lines results file. Its directory is created.
        """
        self.results_file = Path(output_path)
        self.results_file.parent.mkdir(parents=True, exist_ok=True)
        self.ledger_file = self.results_file.with_name(self.results_file.name + LEDGER_SUFFIX)

    def reset(self) -> None:
        """Start a fresh run by removing earlier results and ledger."""
        self.results_file.unlink(missing_ok=True)
        self.ledger_file.unlink(missing_ok=True)

    def save_result(self, record: dict[str, Any]) -> None:
        """Append one query result.

        Args:
            record: Result record. Enums, numpy values and sets are converted.
        """
        append_jsonl(self.results_file, [record])

    def append_ledger(self, records: Iterable[dict[str, Any]]) -> None:
        """Append ledger entry records."""
        append_jsonl(self.ledger_file, records)

    def rewrite_results(self, records: Iterable[dict[str, Any]]) -> None:
        """Replace the results file, dropping whatever followed ``records``."""
        write_jsonl(self.results_file, records)

    def load_results(self) -> list[dict[str, Any]]:
        """Load the results written so far.

        Returns:
            Result records up to the first unreadable line (a run interrupted
            mid-write leaves at most one), or an empty list if the file
            doesn't exist.
        """
        if not self.results_file.exists():
            return []
        results: list[dict[str, Any]] = []
        try:
            with open(self.results_file, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        results.append(json.loads(line))
        except (OSError, json.JSONDecodeError):
            logger.warning(
                "Ignoring unreadable tail of %s after %d results", self.results_file, len(results)
            )
        return results
