"""Run configuration for PrivICL.

This module defines the dataclasses that hold every configurable parameter of a
run: ensemble shape, privacy target or explicit noise, backend profile, keyword
tokenization, accountant resolution and prompt templates. A whole RunConfig is
saved to and loaded from one TOML file.
"""

import math
import tomllib
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum, auto
from pathlib import Path
from typing import Any

import tomli_w

from src.privicl.core.prompts import (
    CLASSIFICATION_PRESETS,
    GENERATION_PRESETS,
    PromptTemplate,
)
from src.privicl.utils.errors import ConfigError


class TaskKind(Enum):
    """What a run does."""

    CLASSIFY = auto()  # RNM-Gaussian over label votes
    ESA = auto()  # Embedding space aggregation
    KSA_PTR = auto()  # Keyword space aggregation, FindBestK + propose-test-release
    KSA_JEM = auto()  # Keyword space aggregation, joint exponential mechanism
    CALIBRATE = auto()
    ACCOUNT = auto()
    SCORE = auto()


class Baseline(Enum):
    """Non-private reference answers a pipeline run can produce instead."""

    NONE = auto()  # The private pipeline itself
    ZERO_SHOT = auto()  # Query alone, epsilon = 0
    FEW_SHOT = auto()  # One prompt with one subset of exemplars, epsilon = inf
    AGGREGATE = auto()  # The ensemble aggregated without noise, epsilon = inf


class PartitionScheme(Enum):
    """How sampled exemplars are split into disjoint subsets."""

    HASHED = auto()  # Bucket by keyed hash; a removed record touches one subset only
    SEQUENTIAL = auto()  # Keyed shuffle, then fixed-size chunks


class KeywordDomain(Enum):
    """Candidate tokens for the joint exponential mechanism."""

    RESPONSES = auto()  # Tokens that appear in ensemble responses
    QUERY = auto()  # Public tokens of the query itself


class BackendKind(Enum):
    MOCK = auto()
    HTTP = auto()


@dataclass
class EnsembleConfig:
    """Shape of the ensemble built for every query.

    Attributes:
        n_subsets: Maximum number N of disjoint exemplar subsets.
        shots_per_subset: Exemplars per subset.
        subsample_rate: Poisson inclusion probability q of each record.
        seed: Base seed of the partition.
        scheme: Partition scheme.
    """

    n_subsets: int = 10
    shots_per_subset: int = 4
    subsample_rate: float = 1.0
    seed: int = 0
    scheme: PartitionScheme = PartitionScheme.HASHED

    def validate(self) -> None:
        if self.n_subsets < 1:
            raise ConfigError(f"n_subsets must be >= 1, got {self.n_subsets}")
        if self.shots_per_subset < 1:
            raise ConfigError(f"shots_per_subset must be >= 1, got {self.shots_per_subset}")
        if not 0 < self.subsample_rate <= 1:
            raise ConfigError(f"subsample_rate must lie in (0, 1], got {self.subsample_rate}")


@dataclass
class PrivacyConfig:
    """Privacy target or explicit noise.

    Target mode sets ``epsilon`` and ``delta``; noise is then calibrated for the
    declared query count. Explicit mode sets the noise directly (``sigma`` for
    Gaussian releases, ``em_epsilon`` for exponential mechanisms, ``ptr_sigma``
    for the propose-test-release test). ``delta`` is always the delta the final
    budget is reported at.

    Attributes:
        epsilon: Target epsilon over the whole run.
        delta: Target (or reporting) delta.
        sigma: Explicit Gaussian noise standard deviation.
        em_epsilon: Explicit epsilon of each exponential mechanism call.
        ptr_sigma: Explicit noise scale of the propose-test-release test.
        ptr_delta: Failure probability of each test. Derived from ``delta``
            and the query count when unset.
        sensitivity: L2 sensitivity of Gaussian releases.
    """

    epsilon: float | None = None
    delta: float = 1e-5
    sigma: float | None = None
    em_epsilon: float | None = None
    ptr_sigma: float | None = None
    ptr_delta: float | None = None
    sensitivity: float = math.sqrt(2.0)

    @property
    def is_target_mode(self) -> bool:
        return self.epsilon is not None

    @property
    def has_explicit_noise(self) -> bool:
        return any(v is not None for v in (self.sigma, self.em_epsilon, self.ptr_sigma))

    def validate(self) -> None:
        if self.is_target_mode == self.has_explicit_noise:
            raise ConfigError(
                "Supply exactly one of a privacy target (epsilon) or explicit noise "
                "(sigma / em_epsilon / ptr_sigma)"
            )
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.ptr_delta is not None and not 0 < self.ptr_delta < 1:
            raise ConfigError(f"ptr_delta must lie in (0, 1), got {self.ptr_delta}")
        if not self.sensitivity > 0:
            raise ConfigError(f"sensitivity must be > 0, got {self.sensitivity}")


@dataclass
class AccountantConfig:
    """Numerical resolution of the accountants.

    Attributes:
        mesh: Grid spacing of privacy-loss distributions.
        tail_mass: Probability mass allowed outside the truncation bounds.
        orders: Renyi orders. ``None`` uses the built-in grid.
    """

    mesh: float = 1e-4
    tail_mass: float = 1e-12
    orders: list[float] | None = None


@dataclass
class KeywordConfig:
    """Keyword space aggregation parameters.

    Attributes:
        min_length: Shortest token that is counted.
        stopwords: Tokens never counted. ``None`` uses the built-in list.
        k_min: Smallest k FindBestK may choose.
        k_max: Largest k FindBestK may choose.
        k: Number of keywords the joint exponential mechanism releases.
        domain: Candidate tokens of the joint exponential mechanism.
    """

    min_length: int = 2
    stopwords: list[str] | None = None
    k_min: int = 15
    k_max: int = 30
    k: int = 10
    domain: KeywordDomain = KeywordDomain.RESPONSES


@dataclass
class TemplateConfig:
    """Prompt templates, by preset name with optional overrides.

    Attributes:
        classification: Classification preset (sst2, agnews, trec).
        generation: Generation preset (samsum, docvqa).
        labels: Overrides the classification preset's labels.
        input_cue: Overrides the input cue of the active preset.
        answer_cue: Overrides the answer cue of the active preset.
        instruction: Overrides the instruction of the active preset.
    """

    classification: str = "sst2"
    generation: str = "samsum"
    labels: list[str] | None = None
    input_cue: str | None = None
    answer_cue: str | None = None
    instruction: str | None = None

    def resolve(self, generation: bool) -> PromptTemplate:
        """Return the active template with overrides applied."""
        presets, name = (
            (GENERATION_PRESETS, self.generation)
            if generation
            else (CLASSIFICATION_PRESETS, self.classification)
        )
        if name not in presets:
            raise ConfigError(f"Unknown template preset {name!r}; choose from {sorted(presets)}")
        base = presets[name]
        return PromptTemplate(
            input_cue=self.input_cue if self.input_cue is not None else base.input_cue,
            answer_cue=self.answer_cue if self.answer_cue is not None else base.answer_cue,
            instruction=self.instruction if self.instruction is not None else base.instruction,
            labels=tuple(self.labels) if self.labels is not None else base.labels,
        )


@dataclass
class BackendProfile:
    """Connection settings of an LLM backend.

    Attributes:
        kind: MOCK or HTTP.
        endpoint_url: Base URL of an OpenAI-compatible API.
        model_name: Completion model.
        embedding_model_name: Embedding model.
        request_timeout: Seconds before a request times out.
        max_retries: Retries after the first attempt.
        parallelism_cap: Maximum in-flight requests.
        embedding_dimension: Expected embedding length.
        api_key_env: Environment variable holding the API key.
        label_token_ids: Label -> single token id, enables logit-bias mode.
        mock_table: JSON file mapping prompt suffixes to mock responses.
    """

    kind: BackendKind = BackendKind.MOCK
    endpoint_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-3.5-turbo-instruct"
    embedding_model_name: str = "text-embedding-ada-002"
    request_timeout: float = 30.0
    max_retries: int = 5
    parallelism_cap: int = 8
    embedding_dimension: int = 1536
    api_key_env: str = "OPENAI_API_KEY"
    label_token_ids: dict[str, int] | None = None
    mock_table: str | None = None

    def validate(self) -> None:
        if self.parallelism_cap < 1:
            raise ConfigError(f"parallelism_cap must be >= 1, got {self.parallelism_cap}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.embedding_dimension < 1:
            raise ConfigError(
                f"embedding_dimension must be >= 1, got {self.embedding_dimension}"
            )


@dataclass
class RunConfig:
    """Configuration of one CLI run.

    Attributes:
        task: What the run does.
        seed: Base seed. Mandatory for pipeline runs.
        exemplar_path: JSON-lines file of private exemplars.
        query_path: JSON-lines file of queries.
        output_path: JSON-lines results file. The ledger sits next to it.
        reference_path: JSON-lines references, for scoring.
        ledger_path: Ledger file of the account task. Defaults to the one
            next to ``output_path``.
        mechanism: What the calibrate task calibrates: gaussian, em or ptr.
        n_queries: Declared query count used for calibration. Defaults to the
            number of queries in the query file.
        n_candidates: Zero-shot candidates generated per ESA query.
        max_tokens: Completion length of generation tasks.
        parallel_queries: Queries processed concurrently.
        resume: Continue after the queries already in the results file.
        privacy_off_debug: Record raw histograms. Not private.
        baseline: Answer with a non-private reference instead of the
            private pipeline. Baseline runs write no ledger.
    """

    task: TaskKind = TaskKind.CLASSIFY
    seed: int | None = None
    exemplar_path: str | None = None
    query_path: str | None = None
    output_path: str | None = None
    reference_path: str | None = None
    ledger_path: str | None = None
    mechanism: str = "gaussian"
    n_queries: int | None = None
    n_candidates: int = 4
    max_tokens: int = 64
    parallel_queries: int = 1
    resume: bool = False
    privacy_off_debug: bool = False
    baseline: Baseline = Baseline.NONE

    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    backend: BackendProfile = field(default_factory=BackendProfile)
    keywords: KeywordConfig = field(default_factory=KeywordConfig)
    accountant: AccountantConfig = field(default_factory=AccountantConfig)
    templates: TemplateConfig = field(default_factory=TemplateConfig)

    @property
    def is_pipeline(self) -> bool:
        return self.task in (TaskKind.CLASSIFY, TaskKind.ESA, TaskKind.KSA_PTR, TaskKind.KSA_JEM)

    def validate(self) -> None:
        """Check cross-field consistency.

        Raises:
            ConfigError: On any inconsistency.
        """
        if self.task is TaskKind.CALIBRATE:
            if self.mechanism not in ("gaussian", "em", "ptr"):
                raise ConfigError(f"Unknown calibration mechanism {self.mechanism!r}")
            if not self.privacy.is_target_mode:
                raise ConfigError("Calibration needs a target epsilon")
            self.ensemble.validate()
            return
        if self.task is TaskKind.ACCOUNT and not (self.ledger_path or self.output_path):
            raise ConfigError("account needs a ledger path")
        if self.task is TaskKind.SCORE and not (self.output_path and self.reference_path):
            raise ConfigError("score needs a results path and a reference path")
        if not self.is_pipeline:
            return
        if self.seed is None or self.seed < 0:
            raise ConfigError("A non-negative seed is required for pipeline runs")
        for name in ("exemplar_path", "query_path", "output_path"):
            if getattr(self, name) is None:
                raise ConfigError(f"{name} is required for {self.task.name.lower()} runs")
        if self.n_candidates < 1:
            raise ConfigError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.parallel_queries < 1:
            raise ConfigError(f"parallel_queries must be >= 1, got {self.parallel_queries}")
        self.ensemble.validate()
        if self.baseline is Baseline.NONE:
            if self.parallel_queries > 1 and not self.privacy.is_target_mode:
                raise ConfigError("--parallel-queries needs a privacy target calibrated up front")
            self.privacy.validate()
        elif self.privacy.is_target_mode or self.privacy.has_explicit_noise:
            raise ConfigError(
                f"The {self.baseline.name.lower()} baseline takes no privacy target or noise"
            )
        self.backend.validate()
        if self.keywords.k < 1 or not 1 <= self.keywords.k_min <= self.keywords.k_max:
            raise ConfigError("Keyword k, k_min and k_max must satisfy 1 <= k_min <= k_max")

    def save(self, path: Path | str) -> None:
        """Save configuration to a TOML file.

        Args:
            path: Path to the TOML file.
        """
        with open(path, "wb") as f:
            tomli_w.dump(_to_toml(asdict(self)), f)

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        """Load configuration from a TOML file.

        Args:
            path: Path to the TOML file.

        Returns:
            RunConfig: Loaded configuration.
        """
        with open(path, "rb") as f:
            data = tomllib.load(f)
        return _from_dict(cls, data)


def _to_toml(obj: Any) -> Any:
    # TOML has no null, and Enums are stored by name
    if isinstance(obj, Enum):
        return obj.name
    if isinstance(obj, dict):
        return {k: _to_toml(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_to_toml(v) for v in obj]
    return obj


def _from_dict[T](cls: type[T], data: dict[str, Any]) -> T:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")

    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint) and isinstance(hint, type):
            if not isinstance(value, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _from_dict(hint, value)
        elif isinstance(hint, type) and issubclass(hint, Enum):
            try:
                kwargs[name] = hint[str(value).upper().replace("-", "_")]
            except KeyError:
                # Fallback to default if invalid enum name
                continue
        else:
            kwargs[name] = value
    return cls(**kwargs)
