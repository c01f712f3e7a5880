import numpy as np
import pytest

from src.privicl.core.accounting import MechanismKind
from src.privicl.core.storage import LEDGER_SUFFIX, Storage, make_serializable, read_jsonl


def test_serializable_conversion():
    record = {
        "kind": MechanismKind.PTR,
        "count": np.int64(3),
        "scores": np.array([0.5, 1.0]),
        "released": frozenset({"b", "a"}),
    }
    assert make_serializable(record) == {
        "kind": "PTR",
        "count": 3,
        "scores": [0.5, 1.0],
        "released": ["a", "b"],
    }


def test_ledger_sits_next_to_the_results(tmp_path):
    storage = Storage(tmp_path / "runs" / "out.jsonl")
    assert storage.ledger_file.name == "out.jsonl" + LEDGER_SUFFIX
    assert storage.results_file.parent.is_dir()


def test_results_are_appended_and_reset(tmp_path):
    storage = Storage(tmp_path / "out.jsonl")
    storage.save_result({"query": "q1", "answer": "a1"})
    storage.save_result({"query": "q2", "answer": "a2"})
    storage.append_ledger([{"kind": "EM", "epsilon": 0.1}])
    assert [r["answer"] for r in storage.load_results()] == ["a1", "a2"]

    storage.rewrite_results(storage.load_results()[:1])
    assert len(storage.load_results()) == 1

    storage.reset()
    assert storage.load_results() == []
    assert read_jsonl(storage.ledger_file) == []


def test_interrupted_write_keeps_complete_results(tmp_path):
    storage = Storage(tmp_path / "out.jsonl")
    storage.save_result({"query": "q1", "answer": "a1"})
    with open(storage.results_file, "a", encoding="utf-8") as f:
        f.write('{"query": "q2", "ans')
    assert storage.load_results() == [{"query": "q1", "answer": "a1"}]


def test_read_jsonl_rejects_non_objects(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"a": 1}\n\n[1, 2]\n')
    with pytest.raises(ValueError, match="bad.jsonl:3"):
        read_jsonl(path)
