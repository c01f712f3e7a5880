"""Query loop behind the pipeline subcommands.

The runner loads exemplars and queries, fixes the noise of every query up
front (calibrated for the declared query count in target mode), then answers
queries in order. Before each query (or batch of parallel queries) it projects
the ledger with the entries the query will add and stops if the projection
would exceed the target budget. Ledger entries are appended before the result
they paid for, so an interrupted run never under-reports spending.

Baseline runs answer without noise and write no ledger: zero-shot costs
nothing, the few-shot and noiseless aggregate baselines are not private.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from src.privicl.core.accounting import (
    DEFAULT_ORDERS,
    LedgerEntry,
    MechanismKind,
    PrivacyLedger,
    calibrate_em_epsilon,
    calibrate_ptr_sigma,
    calibrate_sigma,
)
from src.privicl.core.aggregation import (
    ExemplarStore,
    KsaMethod,
    KsaPrivacy,
    baseline_answer,
    classify,
    esa_generate,
    ksa_generate,
    partition,
)
from src.privicl.core.backend import LLMBackend, make_backend
from src.privicl.core.mechanisms import NoiseParams
from src.privicl.core.metrics import ScoreReport, score_corpus
from src.privicl.core.storage import LEDGER_SUFFIX, Storage, read_jsonl
from src.privicl.utils.config import AccountantConfig, Baseline, RunConfig, TaskKind
from src.privicl.utils.errors import BudgetExhaustedError, ConfigError

logger = logging.getLogger(__name__)

# Used when explicit-noise KSA-PTR runs leave ptr_delta unset.
DEFAULT_PTR_DELTA = 1e-6
# Relative slack of the budget check; projections equal to the target pass.
BUDGET_TOLERANCE = 1e-9


@dataclass(frozen=True)
class NoisePlan:
    """Noise every query of a run uses.

    Attributes:
        sigma: Gaussian noise standard deviation, on each vote count
            (classify) or on each embedding coordinate (ESA).
        sensitivity: L2 sensitivity of the Gaussian release.
        em_epsilon: Epsilon of FindBestK or of the joint exponential mechanism.
        ptr_sigma: Noise scale of the propose-test-release test.
        ptr_delta: Failure probability of the test.
    """

    sigma: float | None = None
    sensitivity: float = math.sqrt(2.0)
    em_epsilon: float | None = None
    ptr_sigma: float | None = None
    ptr_delta: float | None = None

    def query_entries(self, task: TaskKind, q: float) -> list[LedgerEntry]:
        """Ledger entries one query of ``task`` appends."""
        match task:
            case TaskKind.CLASSIFY | TaskKind.ESA:
                params = NoiseParams(sigma=self.sigma, sensitivity=self.sensitivity)
                return [LedgerEntry(MechanismKind.GAUSSIAN, params, q)]
            case TaskKind.KSA_JEM:
                return [LedgerEntry(MechanismKind.EM, NoiseParams(epsilon=self.em_epsilon), q)]
            case TaskKind.KSA_PTR:
                return [
                    LedgerEntry(MechanismKind.EM, NoiseParams(epsilon=self.em_epsilon), q),
                    LedgerEntry(
                        MechanismKind.PTR,
                        NoiseParams(sigma=self.ptr_sigma, delta=self.ptr_delta),
                        q,
                    ),
                ]
        raise ValueError(f"{task.name} answers no queries")


def resolve_noise(config: RunConfig, n_queries: int) -> NoisePlan:
    """Fix the per-query noise of a run.

    In target mode, Gaussian noise (or the exponential mechanism epsilon) is
    calibrated so that n_queries queries spend exactly the target. KSA-PTR
    gives half the target to FindBestK and calibrates the test noise so the
    pair spends the whole target; its test failure probability defaults to
    delta / (4 n_queries).

    Raises:
        ConfigError: If explicit mode lacks the noise the task needs.
        PrivacyAccountingError: If the target cannot be reached.
    """
    privacy = config.privacy
    task = config.task
    q = config.ensemble.subsample_rate
    orders = tuple(config.accountant.orders) if config.accountant.orders else DEFAULT_ORDERS

    if privacy.is_target_mode:
        eps, delta = privacy.epsilon, privacy.delta
        assert eps is not None
        match task:
            case TaskKind.CLASSIFY | TaskKind.ESA:
                sigma = calibrate_sigma(
                    eps, delta, q, n_queries, privacy.sensitivity, config.accountant
                )
                return NoisePlan(sigma=sigma, sensitivity=privacy.sensitivity)
            case TaskKind.KSA_JEM:
                return NoisePlan(em_epsilon=calibrate_em_epsilon(eps, delta, n_queries, orders))
            case TaskKind.KSA_PTR:
                em_epsilon = calibrate_em_epsilon(eps / 2, delta, n_queries, orders)
                ptr_delta = privacy.ptr_delta or delta / (4 * n_queries)
                ptr_sigma = calibrate_ptr_sigma(
                    eps, delta, q, n_queries, em_epsilon, ptr_delta, config.accountant
                )
                return NoisePlan(em_epsilon=em_epsilon, ptr_sigma=ptr_sigma, ptr_delta=ptr_delta)
        raise ConfigError(f"{task.name} has no noise to calibrate")

    required = {
        TaskKind.CLASSIFY: ("sigma",),
        TaskKind.ESA: ("sigma",),
        TaskKind.KSA_JEM: ("em_epsilon",),
        TaskKind.KSA_PTR: ("em_epsilon", "ptr_sigma"),
    }.get(task, ())
    missing = [name for name in required if getattr(privacy, name) is None]
    if missing:
        raise ConfigError(f"{task.name} in explicit-noise mode needs {', '.join(missing)}")
    return NoisePlan(
        sigma=privacy.sigma,
        sensitivity=privacy.sensitivity,
        em_epsilon=privacy.em_epsilon,
        ptr_sigma=privacy.ptr_sigma,
        ptr_delta=(privacy.ptr_delta or DEFAULT_PTR_DELTA) if task is TaskKind.KSA_PTR else None,
    )


def calibrate(config: RunConfig) -> dict[str, float]:
    """Noise parameters that make ``config.n_queries`` queries spend the target.

    Returns:
        ``{"sigma": ...}`` for gaussian, ``{"em_epsilon": ...}`` for em, and
        em_epsilon, ptr_sigma and ptr_delta for ptr.
    """
    task = {
        "gaussian": TaskKind.CLASSIFY,
        "em": TaskKind.KSA_JEM,
        "ptr": TaskKind.KSA_PTR,
    }[config.mechanism]
    n_queries = config.n_queries or 1
    plan = resolve_noise(replace(config, task=task), n_queries)
    values = {
        "sigma": plan.sigma,
        "em_epsilon": plan.em_epsilon,
        "ptr_sigma": plan.ptr_sigma,
        "ptr_delta": plan.ptr_delta,
    }
    return {name: value for name, value in values.items() if value is not None}


def report_budget(
    ledger: PrivacyLedger, delta: float, config: AccountantConfig | None = None
) -> tuple[float, float]:
    """Total (epsilon, delta) of a ledger, infinite when any entry had no noise."""
    if any(entry.params.sigma == 0 for entry in ledger.entries):
        logger.warning("Ledger holds noiseless releases; the run is not private")
        return math.inf, delta
    return ledger.total(delta, config)


def account(config: RunConfig) -> tuple[float, float]:
    """Budget spent according to a ledger file."""
    path = config.ledger_path or f"{config.output_path}{LEDGER_SUFFIX}"
    if not Path(path).exists():
        raise ConfigError(f"Ledger file {path} does not exist")
    ledger = PrivacyLedger.load(path)
    logger.info("Loaded %d ledger entries from %s", len(ledger), path)
    return report_budget(ledger, config.privacy.delta, config.accountant)


def score(config: RunConfig) -> ScoreReport:
    """Score the answers of a results file against a reference file.

    References are read from the ``reference`` field of each line, or
    ``answer`` when absent, so both query files and exemplar files work.
    """
    results = read_jsonl(config.output_path)  # type: ignore[arg-type]
    references = read_jsonl(config.reference_path)  # type: ignore[arg-type]
    if len(results) != len(references):
        raise ConfigError(
            f"{len(results)} results but {len(references)} references; files must align"
        )
    try:
        answers = [str(r["answer"]) for r in results]
        refs = [str(r["reference"] if "reference" in r else r["answer"]) for r in references]
    except KeyError as e:
        raise ConfigError(f"Record lacks field {e}") from e
    return score_corpus(answers, refs, with_accuracy=True)


def load_queries(path: Path | str) -> list[dict[str, Any]]:
    """Load query records, each carrying a ``query`` field."""
    records = read_jsonl(path)
    for number, record in enumerate(records, start=1):
        if "query" not in record:
            raise ConfigError(f"{path}: record {number} has no 'query' field")
    return records


@dataclass(frozen=True)
class RunSummary:
    """Outcome of a pipeline run.

    Attributes:
        processed: Queries answered in this invocation.
        fallbacks: Answers produced by the zero-shot fallback.
        epsilon: Total epsilon of the ledger.
        delta: Reporting delta.
    """

    processed: int
    fallbacks: int
    epsilon: float
    delta: float


@dataclass(frozen=True)
class _Outcome:
    record: dict[str, Any]
    entries: tuple[LedgerEntry, ...]


class PipelineRunner:
    """Answers the queries of one pipeline run."""

    def __init__(self, config: RunConfig, backend: LLMBackend | None = None) -> None:
        """Initialize the runner.

        Args:
            config: Validated run configuration of a pipeline task.
            backend: Backend override, built from the profile when None.
        """
        config.validate()
        if not config.is_pipeline:
            raise ConfigError(f"{config.task.name} is not a pipeline task")
        for path in (config.exemplar_path, config.query_path):
            if not Path(path).exists():  # type: ignore[arg-type]
                raise ConfigError(f"Input file {path} does not exist")
        self.config = config
        self.store = ExemplarStore.load(config.exemplar_path)  # type: ignore[arg-type]
        self.queries = load_queries(config.query_path)  # type: ignore[arg-type]
        self.n_queries = config.n_queries or len(self.queries)
        self.backend = backend or make_backend(config.backend, config.seed or 0)
        self.template = config.templates.resolve(generation=config.task is not TaskKind.CLASSIFY)
        self.storage = Storage(config.output_path)  # type: ignore[arg-type]
        self.ledger = PrivacyLedger()
        self.plan = NoisePlan()
        if config.privacy_off_debug:
            logger.warning("NON-PRIVATE debug mode: raw histograms are written to the results")

    def run(self) -> RunSummary:
        """Answer every pending query.

        Raises:
            BudgetExhaustedError: Before the first query the budget cannot
                cover. Earlier results and ledger entries are kept.
            BackendError: If a query cannot be answered.
        """
        start, fallbacks = self._restore()
        if start >= len(self.queries):
            logger.info("Nothing to do: %d of %d queries answered", start, len(self.queries))
            return self._summary(0, fallbacks)

        if self.config.baseline is Baseline.NONE:
            self.plan = resolve_noise(self.config, max(self.n_queries, 1))
            logger.info("Noise plan: %s", self.plan)
        else:
            self.plan = NoisePlan(sigma=0.0)
            logger.warning(
                "NON-PRIVATE %s baseline: no noise and no ledger",
                self.config.baseline.name.lower(),
            )
        batch_size = self.config.parallel_queries
        processed = 0
        index = start
        while index < len(self.queries):
            batch = list(range(index, min(index + batch_size, len(self.queries))))
            allowed = self._affordable(len(batch))
            for outcome in self._answer_all(batch[:allowed]):
                if outcome.entries:
                    self.storage.append_ledger(entry.to_record() for entry in outcome.entries)
                for entry in outcome.entries:
                    self.ledger.append(entry)
                self.storage.save_result(outcome.record)
                fallbacks += outcome.record["fallback"]
                processed += 1
            if allowed < len(batch):
                self._stop(batch[allowed])
            index += allowed

        summary = self._summary(processed, fallbacks)
        logger.info(
            "Answered %d queries (%d fallbacks), epsilon=%.4f delta=%g",
            processed, fallbacks, summary.epsilon, summary.delta,
        )
        return summary

    def close(self) -> None:
        self.backend.close()

    def _restore(self) -> tuple[int, int]:
        if not self.config.resume:
            self.storage.reset()
            return 0, 0
        results = self.storage.load_results()
        # Drops a line cut short by an interruption.
        self.storage.rewrite_results(results)
        self.ledger = PrivacyLedger.load(self.storage.ledger_file)
        logger.info(
            "Resuming after %d answered queries with %d ledger entries",
            len(results), len(self.ledger),
        )
        return len(results), sum(bool(r.get("fallback")) for r in results)

    def _summary(self, processed: int, fallbacks: int) -> RunSummary:
        delta = self.config.privacy.delta
        match self.config.baseline:
            case Baseline.NONE:
                epsilon, delta = report_budget(self.ledger, delta, self.config.accountant)
            case Baseline.ZERO_SHOT:
                epsilon, delta = 0.0, 0.0
            case _:
                epsilon = math.inf
        return RunSummary(processed, fallbacks, epsilon, delta)

    def _projected_epsilon(self, n_queries: int) -> float:
        entries = self.plan.query_entries(self.config.task, self.config.ensemble.subsample_rate)
        projected = self.ledger.projected(entries * n_queries)
        return projected.total(self.config.privacy.delta, self.config.accountant, warn=False)[0]

    def _affordable(self, n_queries: int) -> int:
        """Largest number of the next ``n_queries`` queries the budget covers."""
        target = self.config.privacy.epsilon
        if target is None:
            return n_queries
        limit = target * (1 + BUDGET_TOLERANCE)
        for count in range(n_queries, 0, -1):
            if self._projected_epsilon(count) <= limit:
                return count
        return 0

    def _stop(self, index: int) -> None:
        target = self.config.privacy.epsilon
        assert target is not None
        delta = self.config.privacy.delta
        spent = self.ledger.total(delta, self.config.accountant, warn=False)[0]
        logger.error("Stopping before query %d: budget exhausted", index)
        raise BudgetExhaustedError(spent, self._projected_epsilon(1), target)

    def _answer_all(self, indices: Sequence[int]) -> list[_Outcome]:
        if len(indices) <= 1:
            return [self._answer(i) for i in indices]
        with ThreadPoolExecutor(max_workers=len(indices)) as pool:
            return list(pool.map(self._answer, indices))

    def _answer(self, index: int) -> _Outcome:
        """Answer one query with its own random sources and ledger."""
        config = self.config
        seed = config.seed or 0
        query = str(self.queries[index]["query"])
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
        partition_rng = np.random.default_rng(
            np.random.SeedSequence([seed, config.ensemble.seed], spawn_key=(index,))
        )
        baseline = config.baseline
        subsets = (
            []
            if baseline is Baseline.ZERO_SHOT
            else partition(self.store, config.ensemble, partition_rng)
        )

        ledger = PrivacyLedger()
        events: dict[str, Any] = {}

        def observe(name: str, payload: dict[str, Any]) -> None:
            events[name] = payload

        plan = self.plan
        q = config.ensemble.subsample_rate
        common: dict[str, Any] = {
            "template": self.template,
            "ledger": ledger if baseline is Baseline.NONE else None,
            "subsample_rate": q,
            "on_event": observe,
        }
        if baseline in (Baseline.ZERO_SHOT, Baseline.FEW_SHOT):
            subset = subsets[0] if subsets else None
            if baseline is Baseline.FEW_SHOT and subset is None:
                observe("fallback", {"reason": "no subsets"})
            answer = baseline_answer(query, subset, self.backend, self.template, config.max_tokens)
            return _Outcome(self._record(index, query, answer, events), ())

        match config.task:
            case TaskKind.CLASSIFY:
                answer = classify(
                    query, subsets, self.backend, self.template.labels, plan.sigma, rng,
                    sensitivity=plan.sensitivity, **common,
                )
            case TaskKind.ESA:
                assert plan.sigma is not None
                answer = esa_generate(
                    query, subsets, self.backend, plan.sigma / plan.sensitivity,
                    plan.sensitivity, config.n_candidates, rng,
                    max_tokens=config.max_tokens, **common,
                )
            case TaskKind.KSA_PTR | TaskKind.KSA_JEM:
                method = KsaMethod.PTR if config.task is TaskKind.KSA_PTR else KsaMethod.JOINT_EM
                privacy: KsaPrivacy | None = None
                if baseline is Baseline.NONE:
                    assert plan.em_epsilon is not None
                    privacy = KsaPrivacy(plan.em_epsilon, plan.ptr_sigma, plan.ptr_delta)
                answer = ksa_generate(
                    query, subsets, self.backend, method, config.keywords, privacy, rng,
                    max_tokens=config.max_tokens, **common,
                )
            case _:
                raise ConfigError(f"{config.task.name} answers no queries")

        return _Outcome(self._record(index, query, answer, events), ledger.entries)

    def _record(
        self, index: int, query: str, answer: str, events: dict[str, Any]
    ) -> dict[str, Any]:
        record: dict[str, Any] = {
            "query": query,
            "answer": answer,
            "fallback": "fallback" in events,
        }
        if self.config.baseline is not Baseline.NONE:
            record["baseline"] = self.config.baseline.name.lower()
        if self.config.privacy_off_debug:
            record["diagnostics"] = events
            logger.debug("NON-PRIVATE query %d diagnostics: %s", index, events)
        logger.info("Answered query %d", index)
        return record
