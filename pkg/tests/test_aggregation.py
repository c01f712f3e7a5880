import math
import re
from collections import Counter

import numpy as np
import pytest
from scipy.stats import norm

from src.privicl.core import aggregation
from src.privicl.core.accounting import MechanismKind, PrivacyLedger
from src.privicl.core.aggregation import (
    Exemplar,
    ExemplarStore,
    KsaMethod,
    KsaPrivacy,
    baseline_answer,
    build_keyword_histogram,
    classify,
    esa_generate,
    ksa_generate,
    partition,
)
from src.privicl.core.backend import CompletionRequest, MockBackend
from src.privicl.core.prompts import CLASSIFICATION_PRESETS, GENERATION_PRESETS
from src.privicl.core.text import KeywordTokenizer
from src.privicl.utils.config import EnsembleConfig, KeywordConfig, KeywordDomain, PartitionScheme
from src.privicl.utils.errors import BackendError

SST2 = CLASSIFICATION_PRESETS["sst2"]
SAMSUM = GENERATION_PRESETS["samsum"]
LABELS = ("Negative", "Positive")


@pytest.fixture
def store(sentiment_exemplars, write_records):
    return ExemplarStore.load(write_records("exemplars.jsonl", sentiment_exemplars))


def contexts(n):
    return ExemplarStore(Exemplar(str(i), f"context {i}", f"summary {i}") for i in range(n))


class EventLog:
    def __init__(self):
        self.events = []

    def __call__(self, name, payload):
        self.events.append((name, payload))

    def names(self):
        return [name for name, _ in self.events]

    def payload(self, name):
        return next(p for n, p in self.events if n == name)


def test_store_load_assigns_positional_ids(store):
    assert len(store) == 40
    assert store.ids[:3] == ("1", "2", "3")
    assert len(store.without("1")) == 39
    with pytest.raises(KeyError):
        store.without("missing")


def test_store_rejects_incomplete_records(write_records):
    path = write_records("bad.jsonl", [{"input": "no answer"}])
    with pytest.raises(ValueError):
        ExemplarStore.load(path)
    with pytest.raises(ValueError):
        ExemplarStore([Exemplar("a", "x", "y"), Exemplar("a", "z", "w")])


def test_sequential_partition_uses_every_record(store, rng):
    cfg = EnsembleConfig(n_subsets=10, shots_per_subset=4, scheme=PartitionScheme.SEQUENTIAL)
    groups = partition(store, cfg, rng)
    assert len(groups) == 10
    assert all(len(g) == 4 for g in groups)
    assert {r.id for g in groups for r in g} == set(store.ids)


def test_hashed_partition_is_disjoint_and_bounded(store, rng):
    cfg = EnsembleConfig(n_subsets=8, shots_per_subset=3, subsample_rate=0.5)
    groups = partition(store, cfg, rng)
    ids = [r.id for g in groups for r in g]
    assert len(ids) == len(set(ids))
    assert len(groups) <= 8
    assert all(1 <= len(g) <= 3 for g in groups)


@pytest.mark.parametrize("q", [1.0, 0.3])
def test_removing_a_record_changes_at_most_one_subset(store, q):
    cfg = EnsembleConfig(n_subsets=10, shots_per_subset=4, subsample_rate=q)
    for removed in ("3", "17", "40"):
        before = partition(store, cfg, np.random.default_rng(5))
        after = partition(store.without(removed), cfg, np.random.default_rng(5))
        changed = {frozenset(g) for g in before} ^ {frozenset(g) for g in after}
        assert len(changed) <= 2
        assert all(removed not in {r.id for r in g} for g in after)


def test_hashed_partition_leaves_short_subsets(store):
    cfg = EnsembleConfig(n_subsets=10, shots_per_subset=4)
    sizes = [
        [len(g) for g in partition(store, cfg, np.random.default_rng(seed))]
        for seed in range(200)
    ]
    assert all(max(s) <= 4 for s in sizes)
    assert any(min(s) < 4 for s in sizes)
    # Each bucket holds Bin(40, 0.1) records, cut at 4: E = 10 * 3.2588.
    assert np.mean([sum(s) for s in sizes]) == pytest.approx(32.59, abs=1.0)


def test_hashed_partition_fills_every_subset_from_a_large_store(rng):
    groups = partition(contexts(400), EnsembleConfig(n_subsets=10, shots_per_subset=4), rng)
    assert [len(g) for g in groups] == [4] * 10


@pytest.mark.slow
def test_poisson_subsample_has_the_expected_size():
    cfg = EnsembleConfig(
        n_subsets=8000,
        shots_per_subset=1,
        subsample_rate=0.005,
        scheme=PartitionScheme.SEQUENTIAL,
    )
    store = contexts(8000)
    sizes = [len(partition(store, cfg, np.random.default_rng(seed))) for seed in range(500)]
    assert np.mean(sizes) == pytest.approx(40.0, abs=2.0)


def test_tiny_subsample_yields_empty_ensemble(store, rng, caplog):
    cfg = EnsembleConfig(subsample_rate=1e-12)
    assert partition(store, cfg, rng) == []
    assert "yields no subset" in caplog.text


def test_partition_of_empty_store(rng):
    with pytest.raises(ValueError):
        partition(ExemplarStore([]), EnsembleConfig(), rng)


def test_classify_releases_the_unanimous_label(store, positive_backend, rng):
    cfg = EnsembleConfig(n_subsets=10, shots_per_subset=4, scheme=PartitionScheme.SEQUENTIAL)
    subsets = partition(store, cfg, rng)
    ledger = PrivacyLedger()
    log = EventLog()

    label = classify(
        "a fine film", subsets, positive_backend, LABELS, 0.0, rng,
        template=SST2, ledger=ledger, subsample_rate=1.0, on_event=log,
    )

    assert label == "Positive"
    assert log.payload("votes")["histogram"] == {"Negative": 0, "Positive": 10}
    (entry,) = ledger.entries
    assert entry.kind is MechanismKind.GAUSSIAN
    assert entry.params.sigma == 0.0
    assert entry.params.sensitivity == pytest.approx(np.sqrt(2))


def test_classify_drops_failed_members(store, rng):
    def responder(request):
        if "review number 1 " in request.prompt:
            raise BackendError("flaky")
        return "Negative"

    subsets = partition(store, EnsembleConfig(n_subsets=5), rng)
    backend = MockBackend(responder=responder)
    assert classify("meh", subsets, backend, LABELS, 0.0, rng, template=SST2) == "Negative"


def test_classify_fails_when_every_member_fails(store, rng):
    def responder(request):
        raise BackendError("down")

    subsets = partition(store, EnsembleConfig(n_subsets=3), rng)
    with pytest.raises(BackendError):
        classify("meh", subsets, MockBackend(responder=responder), LABELS, 1.0, rng, template=SST2)


@pytest.mark.slow
def test_noisy_majority_wins_at_the_gaussian_rate(rng):
    def responder(request):
        voter = int(re.search(r"vote (\d+)", request.prompt).group(1))
        return "Positive" if voter < 7 else "Negative"

    subsets = [(Exemplar(str(i), f"vote {i}", "x"),) for i in range(10)]
    backend = MockBackend(responder=responder)
    sigma = 6.8516
    wins = sum(
        classify("a plain film", subsets, backend, LABELS, sigma, rng, template=SST2) == "Positive"
        for _ in range(10_000)
    )
    # Two noisy counts 7 and 3: the majority wins when N(0, 2 sigma^2) > -4.
    assert wins / 10_000 == pytest.approx(norm.cdf(4 / (sigma * math.sqrt(2))), abs=0.02)


def test_neighbouring_stores_shift_votes_by_at_most_one():
    for case in range(100):
        case_rng = np.random.default_rng(case)
        size = int(case_rng.integers(5, 60))
        cfg = EnsembleConfig(
            n_subsets=int(case_rng.integers(1, 12)),
            shots_per_subset=int(case_rng.integers(1, 5)),
            subsample_rate=float(case_rng.choice([1.0, 0.5, 0.1])),
        )
        full = contexts(size)
        removed = str(case_rng.integers(size))
        backend = MockBackend(seed=case)

        def votes(store):
            log = EventLog()
            subsets = partition(store, cfg, np.random.default_rng(1000 + case))
            classify("q", subsets, backend, LABELS, 0.0, case_rng, template=SST2, on_event=log)
            return log.payload("votes")["histogram"]

        before, after = votes(full), votes(full.without(removed))
        shifts = [abs(before[label] - after[label]) for label in LABELS]
        assert max(shifts) <= 1
        assert sum(shifts) <= 2


def esa_backend():
    def responder(request):
        if "alpha" in request.prompt:
            return "x"
        if "beta" in request.prompt:
            return "y"
        return f"cand{request.sample_index}"

    e1, e2, e3 = np.eye(3)
    table = {"x": e1, "y": e2, "cand0": e3, "cand1": e2, "cand2": e1}
    return MockBackend(responder=responder, embedding_table=table, dimension=3)


def test_esa_ties_go_to_the_lowest_candidate(rng):
    subsets = [(Exemplar("a", "alpha", "x"),), (Exemplar("b", "beta", "y"),)]
    ledger = PrivacyLedger()
    log = EventLog()

    answer = esa_generate(
        "what now?", subsets, esa_backend(), 0.0, 2.0, 3, rng,
        template=SAMSUM, ledger=ledger, subsample_rate=0.5, on_event=log,
    )

    assert answer == "cand1"
    assert log.payload("candidates")["scores"] == pytest.approx([0.0, 0.5**0.5, 0.5**0.5])
    (entry,) = ledger.entries
    assert entry.q == 0.5
    assert entry.params.sensitivity == 2.0


def test_esa_picks_the_candidate_closest_to_the_ensemble(rng):
    subsets = [(Exemplar("a", "alpha", "x"),), (Exemplar("c", "alpha again", "x"),)]
    answer = esa_generate("what now?", subsets, esa_backend(), 0.0, 1.0, 3, rng, template=SAMSUM)
    assert answer == "cand2"


def test_esa_without_subsets_answers_zero_shot(rng):
    ledger = PrivacyLedger()
    log = EventLog()
    answer = esa_generate(
        "what now?", [], esa_backend(), 1.0, 1.0, 3, rng,
        template=SAMSUM, ledger=ledger, on_event=log,
    )
    assert answer == "cand0"
    assert log.names() == ["fallback"]
    assert len(ledger) == 0


@pytest.mark.slow
def test_esa_under_huge_noise_picks_orthogonal_candidates_evenly(rng):
    subsets = [(Exemplar("a", "alpha", "x"),)]
    backend = esa_backend()
    answers = Counter(
        esa_generate("what now?", subsets, backend, 1e6, 1.0, 2, rng, template=SAMSUM)
        for _ in range(10_000)
    )
    assert set(answers) == {"cand0", "cand1"}
    assert answers["cand0"] / 10_000 == pytest.approx(0.5, abs=0.02)


@pytest.mark.parametrize("scale", [1e-3, 7.0, 1e6])
def test_esa_answer_ignores_the_scale_of_the_noisy_mean(monkeypatch, scale):
    subsets = [(Exemplar("a", "alpha", "x"),), (Exemplar("b", "beta", "y"),)]
    backend = esa_backend()

    def answers():
        rng = np.random.default_rng(0)
        return [
            esa_generate("what now?", subsets, backend, 1.0, 1.0, 3, rng, template=SAMSUM)
            for _ in range(50)
        ]

    reference = answers()
    assert len(set(reference)) > 1
    unscaled = aggregation.gaussian_vector
    monkeypatch.setattr(
        aggregation, "gaussian_vector", lambda *args: scale * unscaled(*args)
    )
    assert answers() == reference


def test_keyword_histogram_counts_responses_not_occurrences():
    tokenizer = KeywordTokenizer(min_length=1, stopwords=frozenset())
    keywords = build_keyword_histogram(["a b", "b c"], tokenizer)
    assert keywords.tokens == ("a", "b", "c")
    assert keywords.counts_by_token() == {"a": 1, "b": 2, "c": 1}
    assert keywords.hist.ensemble_size == 2

    repeated = build_keyword_histogram(["b b b"], tokenizer)
    assert repeated.counts_by_token() == {"b": 1}


def test_keyword_histogram_with_fixed_vocabulary():
    keywords = build_keyword_histogram(["apple pie", "pie"], vocabulary=["tart", "pie"])
    assert keywords.tokens == ("pie", "tart")
    assert keywords.counts_by_token() == {"pie": 2, "tart": 0}


def keyword_backend(prompts):
    def responder(request):
        prompts.append(request.prompt)
        if "word suggestions" in request.prompt:
            return "guided answer"
        match = re.search(r"context (\d+)", request.prompt)
        if match is None:
            return "zero-shot answer"
        i = int(match.group(1))
        return "paris" + (" france" if i < 6 else "") + (" tower" if i < 3 else "")

    return MockBackend(responder=responder)


def one_shot_subsets(n, rng):
    cfg = EnsembleConfig(n_subsets=n, shots_per_subset=1, scheme=PartitionScheme.SEQUENTIAL)
    return partition(contexts(n), cfg, rng)


def test_ksa_ptr_releases_the_clear_top_keywords(rng):
    prompts = []
    ledger = PrivacyLedger()
    log = EventLog()
    answer = ksa_generate(
        "Where is the tower?",
        one_shot_subsets(10, rng),
        keyword_backend(prompts),
        KsaMethod.PTR,
        KeywordConfig(k_min=1, k_max=3),
        KsaPrivacy(em_epsilon=50.0, ptr_sigma=0.1, ptr_delta=1e-4),
        rng,
        template=SAMSUM,
        ledger=ledger,
        on_event=log,
    )

    assert answer == "guided answer"
    assert log.payload("keywords")["histogram"] == {"france": 6, "paris": 10, "tower": 3}
    assert log.payload("keywords")["released"] == ["paris"]
    assert prompts[-1].endswith("word suggestions: paris")
    assert [e.kind for e in ledger.entries] == [MechanismKind.EM, MechanismKind.PTR]


def test_ksa_ptr_failure_falls_back_to_zero_shot(rng):
    prompts = []
    ledger = PrivacyLedger()
    log = EventLog()
    answer = ksa_generate(
        "Where is the tower?",
        one_shot_subsets(10, rng),
        keyword_backend(prompts),
        KsaMethod.PTR,
        KeywordConfig(k_min=1, k_max=3),
        KsaPrivacy(em_epsilon=1.0, ptr_sigma=1e3, ptr_delta=1e-6),
        rng,
        template=SAMSUM,
        ledger=ledger,
        on_event=log,
    )

    assert answer == "zero-shot answer"
    assert "fallback" in log.names()
    assert len(ledger) == 2


def test_ksa_joint_em_keeps_frequency_order(rng):
    prompts = []
    ledger = PrivacyLedger()
    answer = ksa_generate(
        "Where is the tower?",
        one_shot_subsets(10, rng),
        keyword_backend(prompts),
        KsaMethod.JOINT_EM,
        KeywordConfig(k=2),
        KsaPrivacy(em_epsilon=200.0),
        rng,
        template=SAMSUM,
        ledger=ledger,
    )

    assert answer == "guided answer"
    assert prompts[-1].endswith("ranked by their frequency from high to low: paris, france")
    (entry,) = ledger.entries
    assert entry.kind is MechanismKind.EM and entry.params.epsilon == 200.0


def test_ksa_joint_em_needs_enough_candidate_tokens(rng):
    with pytest.raises(ValueError):
        ksa_generate(
            "tower?",
            one_shot_subsets(4, rng),
            keyword_backend([]),
            KsaMethod.JOINT_EM,
            KeywordConfig(k=2, domain=KeywordDomain.QUERY),
            KsaPrivacy(em_epsilon=1.0),
            rng,
            template=SAMSUM,
        )


def fixed_response_backend(text):
    def responder(request):
        if "word suggestions" in request.prompt:
            return "guided answer"
        if "context" not in request.prompt:
            return "zero-shot answer"
        return text

    return MockBackend(responder=responder)


@pytest.mark.slow
def test_ksa_ptr_releases_a_unanimous_keyword(rng):
    subsets = one_shot_subsets(100, rng)
    backend = fixed_response_backend("paris")
    released = 0
    for _ in range(1000):
        log = EventLog()
        ksa_generate(
            "Where is the tower?",
            subsets,
            backend,
            KsaMethod.PTR,
            KeywordConfig(k_min=1, k_max=1),
            KsaPrivacy(em_epsilon=1.0, ptr_sigma=1.0, ptr_delta=1e-4),
            rng,
            template=SAMSUM,
            on_event=log,
        )
        released += log.payload("keywords")["released"] == ["paris"]
    assert released >= 999


@pytest.mark.slow
def test_ksa_ptr_falls_back_without_a_count_gap(rng):
    subsets = one_shot_subsets(5, rng)
    backend = fixed_response_backend("alpha beta gamma")
    fallbacks = 0
    for _ in range(5000):
        log = EventLog()
        answer = ksa_generate(
            "Where is the tower?",
            subsets,
            backend,
            KsaMethod.PTR,
            KeywordConfig(k_min=1, k_max=2),
            KsaPrivacy(em_epsilon=1.0, ptr_sigma=1.0, ptr_delta=0.05),
            rng,
            template=SAMSUM,
            on_event=log,
        )
        if "fallback" in log.names():
            assert answer == "zero-shot answer"
            fallbacks += 1
    # Gaps are all 0, so the test passes only when N(0, 4) beats its 95% quantile.
    assert fallbacks / 5000 >= 0.94


@pytest.mark.slow
def test_ksa_joint_em_orders_tied_keywords_uniformly(rng):
    subsets = one_shot_subsets(10, rng)
    backend = fixed_response_backend("alpha beta gamma")
    orderings = Counter()
    for _ in range(10_000):
        log = EventLog()
        ksa_generate(
            "Where is the tower?",
            subsets,
            backend,
            KsaMethod.JOINT_EM,
            KeywordConfig(k=3),
            KsaPrivacy(em_epsilon=1.0),
            rng,
            template=SAMSUM,
            on_event=log,
        )
        orderings[tuple(log.payload("keywords")["released"])] += 1
    assert len(orderings) == 6
    for count in orderings.values():
        assert count / 10_000 == pytest.approx(1 / 6, abs=0.02)


@pytest.mark.parametrize(
    ("method", "keywords", "suggestion"),
    [
        (KsaMethod.PTR, KeywordConfig(k_min=1, k_max=3), "word suggestions: paris"),
        (KsaMethod.JOINT_EM, KeywordConfig(k=2), "high to low: paris, france"),
    ],
)
def test_noiseless_ksa_releases_the_exact_keywords(rng, method, keywords, suggestion):
    prompts = []
    ledger = PrivacyLedger()
    answer = ksa_generate(
        "Where is the tower?",
        one_shot_subsets(10, rng),
        keyword_backend(prompts),
        method,
        keywords,
        None,
        rng,
        template=SAMSUM,
        ledger=ledger,
    )
    assert answer == "guided answer"
    assert prompts[-1].endswith(suggestion)
    assert len(ledger) == 0


def test_baseline_answer_uses_a_single_prompt():
    requests = []

    def responder(request):
        requests.append(request)
        return "Positive"

    backend = MockBackend(responder=responder)
    subset = (Exemplar("1", "a lovely film", "Positive"),)
    assert baseline_answer("nice", None, backend, SST2) == "Positive"
    assert baseline_answer("nice", subset, backend, SST2) == "Positive"

    zero, few = requests
    assert "a lovely film" not in zero.prompt
    assert "a lovely film" in few.prompt
    assert zero.constrained_labels == few.constrained_labels == SST2.labels


def test_baseline_answer_generates_freely():
    prompts = []
    backend = keyword_backend(prompts)
    assert baseline_answer("Where is the tower?", None, backend, SAMSUM) == "zero-shot answer"
    subset = (Exemplar("4", "context 4", "summary 4"),)
    assert baseline_answer("Where is the tower?", subset, backend, SAMSUM) == "paris france"


def test_neighbouring_stores_shift_keyword_counts_by_at_most_one():
    backend = MockBackend(seed=3)
    cfg = EnsembleConfig(n_subsets=8, shots_per_subset=2, subsample_rate=0.8)
    full = contexts(24)

    def histogram(store):
        log = EventLog()
        subsets = partition(store, cfg, np.random.default_rng(11))
        ksa_generate(
            "Summarize the meeting",
            subsets,
            backend,
            KsaMethod.PTR,
            KeywordConfig(k_min=1, k_max=3),
            KsaPrivacy(em_epsilon=1.0, ptr_sigma=1.0, ptr_delta=1e-5),
            np.random.default_rng(0),
            template=SAMSUM,
            on_event=log,
        )
        return log.payload("keywords")["histogram"]

    before = histogram(full)
    for removed in ("0", "11", "23"):
        after = histogram(full.without(removed))
        for token in before.keys() | after.keys():
            assert abs(before.get(token, 0) - after.get(token, 0)) <= 1


def test_constrained_requests_reject_duplicate_labels():
    with pytest.raises(ValueError):
        CompletionRequest("prompt", constrained_labels=("A", "A"))
