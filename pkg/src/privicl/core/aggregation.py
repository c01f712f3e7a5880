"""Private aggregation of an ensemble of in-context learners.

For every query the private exemplars are Poisson subsampled and partitioned
into disjoint subsets. Each subset becomes the demonstrations of one prompt,
and the ensemble's responses are released through one of three strategies:

- classify: RNM-Gaussian over label votes.
- esa_generate: noisy mean of response embeddings, answered by the closest
  public zero-shot candidate.
- ksa_generate: private top-k keywords (FindBestK + propose-test-release, or
  the joint exponential mechanism), answered by a keyword-guided zero-shot
  prompt.

Every noisy mechanism run appends one entry to the supplied privacy ledger.
``baseline_answer`` and the noiseless calls give the non-private references.
"""

import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path
from typing import Any

import numpy as np

from src.privicl.core.accounting import MechanismKind, PrivacyLedger
from src.privicl.core.backend import CompletionRequest, Embedding, LLMBackend, stable_hash
from src.privicl.core.mechanisms import (
    NoiseParams,
    VoteHistogram,
    find_best_k,
    gap_profile,
    gaussian_vector,
    joint_em_top_k,
    rnm_gaussian,
    top_k_with_ptr,
    window_regularizer,
)
from src.privicl.core.prompts import PromptTemplate
from src.privicl.core.storage import read_jsonl
from src.privicl.core.text import KeywordTokenizer
from src.privicl.utils.config import EnsembleConfig, KeywordConfig, KeywordDomain, PartitionScheme
from src.privicl.utils.errors import BackendError

logger = logging.getLogger(__name__)

type EventObserver = Callable[[str, dict[str, Any]], None]

CANDIDATE_TEMPERATURE = 1.0
DEFAULT_SENSITIVITY = math.sqrt(2.0)


@dataclass(frozen=True)
class Exemplar:
    """One private demonstration.

    Attributes:
        id: Stable record identifier.
        input_text: Demonstration input.
        answer_text: Demonstration answer.
    """

    id: str
    input_text: str
    answer_text: str


class ExemplarStore:
    """Immutable collection of private exemplars, keyed by id."""

    def __init__(self, records: Iterable[Exemplar]) -> None:
        self._records = tuple(records)
        ids = [r.id for r in self._records]
        if len(set(ids)) != len(ids):
            raise ValueError("exemplar ids must be unique")

    @classmethod
    def load(cls, path: Path | str) -> "ExemplarStore":
        """Load exemplars from JSON lines with ``input``, ``answer`` and optional ``id``.

        Records without an id are identified by their 1-based position.
        """
        records = []
        for position, record in enumerate(read_jsonl(path), start=1):
            try:
                records.append(
                    Exemplar(
                        str(record.get("id", position)),
                        str(record["input"]),
                        str(record["answer"]),
                    )
                )
            except KeyError as e:
                raise ValueError(f"{path}: record {position} lacks field {e}") from e
        return cls(records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Exemplar]:
        return iter(self._records)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self._records)

    def without(self, record_id: str) -> "ExemplarStore":
        """Return a store with one record removed.

        Raises:
            KeyError: If no record has this id.
        """
        if record_id not in self.ids:
            raise KeyError(record_id)
        return ExemplarStore(r for r in self._records if r.id != record_id)


@dataclass(frozen=True)
class KeywordHistogram:
    """Token counts over ensemble responses.

    Attributes:
        hist: Counts keyed by token id. A token counts once per response.
        tokens: Token string of each id, in alphabetical order.
    """

    hist: VoteHistogram
    tokens: tuple[str, ...]

    def counts_by_token(self) -> dict[str, int]:
        return {self.tokens[i]: c for i, c in self.hist.counts.items() if i >= 0}


class KsaMethod(Enum):
    """Keyword selection mechanism."""

    PTR = auto()  # FindBestK then propose-test-release, unordered keywords
    JOINT_EM = auto()  # Joint exponential mechanism, keywords in rank order


@dataclass(frozen=True)
class KsaPrivacy:
    """Noise of one keyword space aggregation.

    Attributes:
        em_epsilon: Epsilon of FindBestK (PTR) or of the joint exponential
            mechanism.
        ptr_sigma: Noise scale of the propose-test-release test.
        ptr_delta: Failure probability of the test.
    """

    em_epsilon: float
    ptr_sigma: float | None = None
    ptr_delta: float | None = None


def _unit_hash(*parts: object) -> float:
    return stable_hash(*parts) / 2.0**64


def partition(
    store: ExemplarStore, cfg: EnsembleConfig, rng: np.random.Generator
) -> list[tuple[Exemplar, ...]]:
    """Poisson subsample the store and split it into disjoint subsets.

    The inclusion coin and the ordering key of each record are hashes of its
    own id and a salt drawn from ``rng``, so a record's fate never depends on
    other records.

    Under ``HASHED`` each sampled record lands in one of ``n_subsets`` buckets
    and a bucket keeps its first ``shots_per_subset`` records. Bucket sizes
    are multinomial, so subsets may be short (or absent) even when the sample
    could fill them all: 40 records in 10 buckets of 4 fill about 32.6 slots.
    Removing one record then changes at most one subset. ``SEQUENTIAL`` cuts
    exact chunks, but one removal can shift every later chunk.

    Args:
        store: Private exemplars.
        cfg: Ensemble shape.
        rng: Random source of the salt.

    Returns:
        At most ``cfg.n_subsets`` pairwise disjoint subsets. May be empty when
        the subsample is too small, which is logged.
    """
    if not len(store):
        raise ValueError("exemplar store is empty")
    salt = int(rng.integers(2**63))
    q = cfg.subsample_rate
    sampled = [r for r in store if q == 1.0 or _unit_hash(salt, "sample", r.id) < q]
    sampled.sort(key=lambda r: stable_hash(salt, "order", r.id))

    if cfg.scheme is PartitionScheme.SEQUENTIAL:
        size = cfg.shots_per_subset
        n_full = min(len(sampled) // size, cfg.n_subsets)
        groups = [tuple(sampled[i * size : (i + 1) * size]) for i in range(n_full)]
    else:
        buckets: dict[int, list[Exemplar]] = defaultdict(list)
        for record in sampled:
            buckets[stable_hash(salt, "bucket", record.id) % cfg.n_subsets].append(record)
        groups = [
            tuple(buckets[b][: cfg.shots_per_subset]) for b in range(cfg.n_subsets) if buckets[b]
        ]

    if not groups:
        logger.warning(
            "Subsample of %d/%d exemplars yields no subset; the ensemble is empty",
            len(sampled), len(store),
        )
    return groups


def _fan_out[T, R](
    call: Callable[[T], R], items: Sequence[T], max_workers: int
) -> list[R | None]:
    """Run ``call`` over ``items`` concurrently, in order. Failed calls give None."""

    def guarded(index_item: tuple[int, T]) -> R | None:
        index, item = index_item
        try:
            return call(item)
        except (BackendError, ValueError) as e:
            logger.warning("Ensemble member %d dropped: %s", index, e)
            return None

    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(items)))) as pool:
        return list(pool.map(guarded, enumerate(items)))


def _demonstrations(subset: Sequence[Exemplar]) -> list[tuple[str, str]]:
    return [(r.input_text, r.answer_text) for r in subset]


def _ensemble_responses(
    query: str,
    subsets: Sequence[Sequence[Exemplar]],
    backend: LLMBackend,
    template: PromptTemplate,
    max_tokens: int,
) -> list[str]:
    requests = [
        CompletionRequest(template.few_shot(_demonstrations(s), query), max_tokens=max_tokens)
        for s in subsets
    ]
    responses = _fan_out(backend.complete, requests, backend.profile.parallelism_cap)
    valid = [r for r in responses if r is not None]
    if subsets and not valid:
        raise BackendError(f"all {len(subsets)} ensemble members failed")
    return valid


def _emit(on_event: EventObserver | None, name: str, **payload: Any) -> None:
    if on_event is not None:
        on_event(name, payload)


def zero_shot_generate(
    query: str,
    backend: LLMBackend,
    template: PromptTemplate,
    max_tokens: int = 64,
    temperature: float = 0.0,
    sample_index: int = 0,
) -> str:
    """Answer from the query alone. Sees no private data and costs no budget."""
    request = CompletionRequest(
        template.zero_shot(query),
        max_tokens=max_tokens,
        temperature=temperature,
        sample_index=sample_index,
    )
    return backend.complete(request)


def baseline_answer(
    query: str,
    subset: Sequence[Exemplar] | None,
    backend: LLMBackend,
    template: PromptTemplate,
    max_tokens: int = 64,
) -> str:
    """Answer from a single prompt, without any privacy.

    With ``subset`` the prompt carries its exemplars (the few-shot baseline);
    without it the query stands alone (the zero-shot baseline, which sees no
    private data). Templates with labels constrain the answer to them.
    """
    prompt = template.few_shot(_demonstrations(subset or ()), query)
    if template.labels:
        request = CompletionRequest(prompt, max_tokens=1, constrained_labels=template.labels)
    else:
        request = CompletionRequest(prompt, max_tokens=max_tokens)
    return backend.complete(request)


def classify(
    query: str,
    subsets: Sequence[Sequence[Exemplar]],
    backend: LLMBackend,
    labels: Sequence[str],
    sigma: float,
    rng: np.random.Generator,
    *,
    template: PromptTemplate,
    ledger: PrivacyLedger | None = None,
    subsample_rate: float = 1.0,
    sensitivity: float = DEFAULT_SENSITIVITY,
    on_event: EventObserver | None = None,
) -> str:
    """Classify a query by RNM-Gaussian over the ensemble's label votes.

    Args:
        query: Query input.
        subsets: Disjoint exemplar subsets, one per ensemble member.
        backend: Language model, queried in constrained-label mode.
        labels: Admissible labels.
        sigma: Noise standard deviation on each vote count.
        rng: Random source.
        template: Classification prompt template.
        ledger: Receives one Gaussian entry.
        subsample_rate: Poisson rate the subsets were drawn with.
        sensitivity: L2 sensitivity of the vote histogram.
        on_event: Observer of raw diagnostics. Not private.

    Returns:
        The released label.

    Raises:
        BackendError: If every ensemble member fails.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    requests = [
        CompletionRequest(
            template.few_shot(_demonstrations(s), query),
            max_tokens=1,
            constrained_labels=tuple(labels),
        )
        for s in subsets
    ]
    votes = _fan_out(backend.complete, requests, backend.profile.parallelism_cap)
    valid = [labels.index(v) for v in votes if v is not None]
    if subsets and not valid:
        raise BackendError(f"all {len(subsets)} ensemble members failed")

    hist = VoteHistogram.from_votes(valid, range(len(labels)))
    _emit(on_event, "votes", histogram={labels[i]: c for i, c in hist.counts.items()})
    released = labels[rnm_gaussian(hist, sigma, rng)]
    if ledger is not None:
        ledger.record(
            MechanismKind.GAUSSIAN, NoiseParams(sigma=sigma, sensitivity=sensitivity), subsample_rate
        )
    logger.info("Released label %r from %d votes", released, len(valid))
    return released


def esa_generate(
    query: str,
    subsets: Sequence[Sequence[Exemplar]],
    backend: LLMBackend,
    sigma: float,
    sensitivity: float,
    n_candidates: int,
    rng: np.random.Generator,
    *,
    template: PromptTemplate,
    max_tokens: int = 64,
    ledger: PrivacyLedger | None = None,
    subsample_rate: float = 1.0,
    on_event: EventObserver | None = None,
) -> str:
    """Embedding space aggregation.

    The ensemble's response embeddings are averaged and privatized with the
    Gaussian mechanism. The answer is the zero-shot candidate with the highest
    cosine similarity to the noisy mean, the lowest index winning ties.

    Args:
        query: Query input.
        subsets: Disjoint exemplar subsets.
        backend: Language model with completion and embedding endpoints.
        sigma: Noise multiplier. Per-coordinate noise is sigma * sensitivity.
        sensitivity: L2 sensitivity of the mean embedding.
        n_candidates: Zero-shot candidates to choose from.
        rng: Random source.
        template: Generation prompt template.
        max_tokens: Completion length.
        ledger: Receives one Gaussian entry, unless there are no subsets.
        subsample_rate: Poisson rate the subsets were drawn with.
        on_event: Observer of raw diagnostics. Not private.
    """
    if n_candidates < 1:
        raise ValueError("ESA needs at least one candidate")

    def candidate(index: int) -> str:
        return zero_shot_generate(
            query, backend, template, max_tokens, CANDIDATE_TEMPERATURE, sample_index=index
        )

    cap = backend.profile.parallelism_cap
    candidates = [c if c is not None else "" for c in _fan_out(candidate, range(n_candidates), cap)]
    if not subsets:
        logger.info("No subsets; answering with zero-shot candidate 0")
        _emit(on_event, "fallback", reason="no subsets")
        return candidates[0]

    def respond(subset: Sequence[Exemplar]) -> Embedding:
        request = CompletionRequest(
            template.few_shot(_demonstrations(subset), query), max_tokens=max_tokens
        )
        return backend.embed(backend.complete(request))

    embedded = [e for e in _fan_out(respond, subsets, cap) if e is not None]
    if not embedded:
        raise BackendError(f"all {len(subsets)} ensemble members failed")

    mean = np.mean([e.values for e in embedded], axis=0)
    noisy = gaussian_vector(mean, sigma, sensitivity, rng)
    if ledger is not None:
        ledger.record(
            MechanismKind.GAUSSIAN,
            NoiseParams(sigma=sigma * sensitivity, sensitivity=sensitivity),
            subsample_rate,
        )

    candidate_embeddings = _fan_out(backend.embed, candidates, cap)
    length = float(np.linalg.norm(noisy)) or 1.0
    scores = np.array(
        [
            float(np.dot(noisy, e.values)) / length if e is not None else -np.inf
            for e in candidate_embeddings
        ]
    )
    best = int(np.argmax(scores))
    _emit(on_event, "candidates", scores=scores.tolist(), members=len(embedded))
    logger.info("Released candidate %d of %d", best, n_candidates)
    return candidates[best]


def build_keyword_histogram(
    responses: Sequence[str],
    tokenizer: Callable[[str], list[str]] | None = None,
    vocabulary: Iterable[str] | None = None,
) -> KeywordHistogram:
    """Count, for each token, the number of responses containing it.

    Args:
        responses: Ensemble responses.
        tokenizer: Text -> tokens. Defaults to KeywordTokenizer().
        vocabulary: Fixed candidate tokens. Tokens outside it are ignored and
            tokens of it that never appear keep a zero count. When unset the
            candidates are the tokens of the responses.

    Returns:
        KeywordHistogram with token ids assigned in alphabetical order.
    """
    tokenizer = tokenizer or KeywordTokenizer()
    per_response = [set(tokenizer(text)) for text in responses]
    if vocabulary is None:
        tokens = sorted(set().union(*per_response))
    else:
        tokens = sorted(set(vocabulary))
    index = {token: i for i, token in enumerate(tokens)}

    counts = dict.fromkeys(range(len(tokens)), 0)
    for seen in per_response:
        for token in seen:
            if token in index:
                counts[index[token]] += 1
    return KeywordHistogram(VoteHistogram(counts, len(responses)), tuple(tokens))


def ksa_generate(
    query: str,
    subsets: Sequence[Sequence[Exemplar]],
    backend: LLMBackend,
    method: KsaMethod,
    k_params: KeywordConfig,
    privacy_params: KsaPrivacy | None,
    rng: np.random.Generator,
    *,
    template: PromptTemplate,
    max_tokens: int = 64,
    ledger: PrivacyLedger | None = None,
    subsample_rate: float = 1.0,
    on_event: EventObserver | None = None,
) -> str:
    """Keyword space aggregation.

    PTR path: FindBestK picks k from the keyword histogram (padded with
    zero-count sentinels up to k_max + 1 candidates), then propose-test-release
    either releases the exact top-k keywords or fails, in which case the
    answer is generated zero-shot. Appends an EM entry and a PTR entry.

    Joint EM path: releases k keywords in estimated frequency order. Appends
    one EM entry.

    The released keywords go into a zero-shot prompt that asks the model to
    use them. Without ``privacy_params`` both paths release their exact,
    noiseless choice and record nothing, which is the non-private aggregate.

    Raises:
        ValueError: If the joint exponential mechanism has fewer than k
            candidate tokens.
        BackendError: If every ensemble member fails, or the final
            reconstruction request fails.
    """
    responses = _ensemble_responses(query, subsets, backend, template, max_tokens)
    tokenizer = KeywordTokenizer.from_words(k_params.min_length, k_params.stopwords)

    if method is KsaMethod.PTR:
        keywords = build_keyword_histogram(responses, tokenizer)
        padded = keywords.hist.with_sentinels(k_params.k_max + 1)
        regularizer = window_regularizer(k_params.k_min, k_params.k_max)
        released: frozenset[int] | None
        if privacy_params is None:
            k = int(np.argmax(gap_profile(padded, regularizer).utilities())) + 1
            released = frozenset(label for label, _ in padded.sorted_items()[:k])
        else:
            if privacy_params.ptr_sigma is None or privacy_params.ptr_delta is None:
                raise ValueError("the PTR path needs ptr_sigma and ptr_delta")
            k = find_best_k(padded, privacy_params.em_epsilon, regularizer, rng)
            released = top_k_with_ptr(
                padded, k, privacy_params.ptr_sigma, privacy_params.ptr_delta, rng
            )
        if ledger is not None and privacy_params is not None:
            ledger.record(
                MechanismKind.EM, NoiseParams(epsilon=privacy_params.em_epsilon), subsample_rate
            )
            ledger.record(
                MechanismKind.PTR,
                NoiseParams(sigma=privacy_params.ptr_sigma, delta=privacy_params.ptr_delta),
                subsample_rate,
            )
        words = sorted(keywords.tokens[i] for i in released or () if i >= 0)
        _emit(
            on_event,
            "keywords",
            histogram=keywords.counts_by_token(),
            k=k,
            released=words if released is not None else None,
        )
        if not words:
            logger.warning("Top-%d keyword test failed; answering zero-shot", k)
            _emit(on_event, "fallback", reason="keyword test failed")
            return zero_shot_generate(query, backend, template, max_tokens)
        prompt = template.with_keywords(query, words, ranked=False)
    else:
        vocabulary = tokenizer(query) if k_params.domain is KeywordDomain.QUERY else None
        keywords = build_keyword_histogram(responses, tokenizer, vocabulary)
        if len(keywords.tokens) < k_params.k:
            raise ValueError(
                f"joint selection of {k_params.k} keywords needs at least {k_params.k} "
                f"candidate tokens, got {len(keywords.tokens)}"
            )
        sequence: Sequence[int]
        if privacy_params is None:
            sequence = [label for label, _ in keywords.hist.sorted_items()[: k_params.k]]
        else:
            sequence = joint_em_top_k(keywords.hist, k_params.k, privacy_params.em_epsilon, rng)
        if ledger is not None and privacy_params is not None:
            ledger.record(
                MechanismKind.EM, NoiseParams(epsilon=privacy_params.em_epsilon), subsample_rate
            )
        words = [keywords.tokens[i] for i in sequence]
        _emit(on_event, "keywords", histogram=keywords.counts_by_token(), released=words)
        prompt = template.with_keywords(query, words, ranked=True)

    logger.info("Released %d keywords", len(words))
    return backend.complete(CompletionRequest(prompt, max_tokens=max_tokens))
