"""Differential privacy primitives used to aggregate ensemble responses.

This module holds the pure, seeded building blocks: report-noisy-max with
Gaussian noise, the vector Gaussian mechanism, the exponential mechanism
realised through Gumbel noise, FindBestK over histogram gaps, top-k release
via propose-test-release, and the joint exponential mechanism over ordered
top-k sequences.

Every function takes its randomness from an explicit ``numpy.random.Generator``
and keeps no state, so identical seeds and inputs give identical outputs.
"""

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
from numpy.typing import ArrayLike
from scipy.stats import norm

from src.privicl.utils.errors import EmptyHistogramError, InfeasibleSelectionError

type Regularizer = Callable[[int], float]

# Add/remove one ensemble member moves H_(k) and H_(k+1) by one each.
GAP_SENSITIVITY = 2.0
# Top-k is stable on every neighbour once the k-th gap exceeds this value.
PTR_STABILITY_GAP = 2.0
# Uniform draws are kept inside (0, 1) so the Gumbel transform stays finite.
GUMBEL_CLAMP = 1e-300


@dataclass(frozen=True)
class VoteHistogram:
    """Per-label counts produced by an ensemble of responses.

    Attributes:
        counts: Mapping from opaque integer label id to a non-negative count.
        ensemble_size: Number of ensemble members that voted. No count may
            exceed it. Zero only for the degenerate empty ensemble.
    """

    counts: Mapping[int, int]
    ensemble_size: int

    def __post_init__(self) -> None:
        if self.ensemble_size < 0:
            raise ValueError(f"ensemble_size must be >= 0, got {self.ensemble_size}")
        for label, count in self.counts.items():
            if count < 0:
                raise ValueError(f"count for label {label} is negative: {count}")
            if count > self.ensemble_size:
                raise ValueError(
                    f"count {count} for label {label} exceeds ensemble size "
                    f"{self.ensemble_size}"
                )
        object.__setattr__(self, "counts", MappingProxyType(dict(self.counts)))

    @classmethod
    def from_votes(cls, votes: Iterable[int], label_ids: Sequence[int]) -> "VoteHistogram":
        """Build a classification histogram, one vote per ensemble member.

        Args:
            votes: Label id chosen by each ensemble member.
            label_ids: Every admissible label id. Labels without votes get 0.

        Returns:
            VoteHistogram whose counts sum to the number of votes.
        """
        counts = dict.fromkeys(label_ids, 0)
        size = 0
        for vote in votes:
            if vote not in counts:
                raise ValueError(f"vote for unknown label id {vote}")
            counts[vote] += 1
            size += 1
        return cls(counts, size)

    @classmethod
    def from_counts(cls, counts: Mapping[int, int]) -> "VoteHistogram":
        """Wrap raw counts, taking their sum as the ensemble size."""
        return cls(counts, sum(counts.values()))

    @property
    def labels(self) -> tuple[int, ...]:
        """Label ids in ascending order."""
        return tuple(sorted(self.counts))

    def sorted_items(self) -> list[tuple[int, int]]:
        """Return (label, count) pairs by count descending, then label ascending."""
        return sorted(self.counts.items(), key=lambda item: (-item[1], item[0]))

    def with_sentinels(self, n_candidates: int) -> "VoteHistogram":
        """Pad with zero-count sentinel labels up to ``n_candidates`` entries.

        Sentinels get negative ids below every existing label, so they stand
        for the unseen part of an unbounded domain.
        """
        missing = n_candidates - len(self.counts)
        if missing <= 0:
            return self
        start = min(min(self.counts, default=0), 0) - 1
        padded = dict(self.counts)
        for offset in range(missing):
            padded[start - offset] = 0
        return VoteHistogram(padded, self.ensemble_size)


@dataclass(frozen=True)
class GapProfile:
    """Gaps between consecutive sorted counts and a data-independent regularizer.

    Attributes:
        gaps: ``gaps[k - 1]`` holds d_k = H_(k) - H_(k+1) for k = 1 .. m - 1.
        regularizer: Function k -> r(k), fixed before seeing the data.
    """

    gaps: np.ndarray
    regularizer: Regularizer

    def utilities(self) -> np.ndarray:
        """Return d_k + r(k) for every k, as an array indexed by k - 1."""
        bonus = np.array(
            [self.regularizer(k) for k in range(1, len(self.gaps) + 1)], dtype=float
        )
        return self.gaps.astype(float) + bonus


@dataclass(frozen=True)
class JointUtilityMatrix:
    """Perturbed utilities of the joint exponential mechanism.

    Attributes:
        entries: Array of shape (k, d). ``entries[i, j]`` is
            -(c_i - c_j) - (d(k - i) + j) / (2dk) with 1-based i and j over
            counts sorted so that c_1 >= c_2 >= ... >= c_d.
        item_order: Sorted rank (0-based) -> original label id.
    """

    entries: np.ndarray
    item_order: tuple[int, ...]

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class NoiseParams:
    """Noise parameters of one mechanism invocation.

    Only the fields relevant to the mechanism are set: Gaussian releases
    carry ``sigma`` and ``sensitivity``, exponential mechanisms carry
    ``epsilon``, and propose-test-release carries ``sigma`` and ``delta``.

    Attributes:
        sigma: Gaussian noise standard deviation. Zero is allowed so tests can
            run noiselessly. The accountant refuses it.
        epsilon: Pure-DP parameter of an exponential mechanism.
        delta: Failure probability of a propose-test-release step.
        sensitivity: L2 sensitivity of the released statistic.
    """

    sigma: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    sensitivity: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma is not None and not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be > 0, got {self.sensitivity}")

    @property
    def noise_multiplier(self) -> float:
        """Noise standard deviation in units of sensitivity."""
        if self.sigma is None:
            raise ValueError("noise multiplier needs sigma")
        return self.sigma / self.sensitivity


def zero_regularizer(k: int) -> float:
    """Regularizer that leaves every k feasible."""
    return 0.0


def window_regularizer(k_min: int = 15, k_max: int = 30) -> Regularizer:
    """Regularizer that allows only k in [k_min, k_max].

    Args:
        k_min: Smallest admissible number of tokens.
        k_max: Largest admissible number of tokens.

    Returns:
        Function returning 0 inside the window and -inf outside it.
    """
    if not 1 <= k_min <= k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")

    def regularizer(k: int) -> float:
        return 0.0 if k_min <= k <= k_max else -math.inf

    return regularizer


def gumbel_noise(scale: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. Gumbel(0, scale) noise by inverse CDF."""
    uniform = np.clip(rng.uniform(size=size), GUMBEL_CLAMP, 1.0 - np.finfo(float).epsneg)
    return -scale * np.log(-np.log(uniform))


def rnm_gaussian(hist: VoteHistogram, sigma: float, rng: np.random.Generator) -> int:
    """Report-noisy-max with Gaussian noise.

    Args:
        hist: Vote histogram to aggregate.
        sigma: Standard deviation of the noise added to each count. Zero gives
            the exact argmax.
        rng: Random source.

    Returns:
        Label id with the largest noisy count. Ties go to the lowest label id.

    Raises:
        EmptyHistogramError: If the histogram has no labels.
    """
    if not hist.counts:
        raise EmptyHistogramError("no responses to aggregate")
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")

    labels = hist.labels
    noisy = np.array([hist.counts[label] for label in labels], dtype=float)
    if sigma > 0:
        noisy += rng.normal(0.0, sigma, size=len(labels))
    return labels[int(np.argmax(noisy))]


def gaussian_vector(
    mean: ArrayLike, sigma: float, sensitivity: float, rng: np.random.Generator
) -> np.ndarray:
    """Vector Gaussian mechanism.

    Args:
        mean: Vector to privatize.
        sigma: Noise multiplier.
        sensitivity: L2 sensitivity of ``mean``. Per-coordinate noise has
            standard deviation ``sigma * sensitivity``.
        rng: Random source.

    Returns:
        ``mean`` plus independent Gaussian noise, not renormalized.
    """
    values = np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("mean has non-finite entries")
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be > 0, got {sensitivity}")
    if sigma == 0:
        return values.copy()
    return values + rng.normal(0.0, sigma * sensitivity, size=values.shape)


def exponential_via_gumbel(
    utilities: ArrayLike, scale: float, rng: np.random.Generator
) -> int:
    """Exponential mechanism sampled by adding Gumbel noise and taking the argmax.

    The output follows P(i) proportional to exp(utilities[i] / scale) over the
    finite entries. Entries equal to -inf are never selected.

    Args:
        utilities: One utility per candidate. -inf marks infeasible entries.
        scale: Gumbel scale, i.e. 2 * sensitivity / epsilon for the standard
            mechanism.
        rng: Random source.

    Returns:
        Index of the selected candidate.

    Raises:
        InfeasibleSelectionError: If every utility is -inf.
    """
    values = np.asarray(utilities, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("utilities must be a non-empty 1-D sequence")
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise ValueError("utilities must be finite or -inf")
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")

    feasible = np.isfinite(values)
    if not feasible.any():
        raise InfeasibleSelectionError("every candidate has utility -inf")
    noisy = np.where(feasible, values + gumbel_noise(scale, values.size, rng), -np.inf)
    return int(np.argmax(noisy))


def gap_profile(hist: VoteHistogram, regularizer: Regularizer) -> GapProfile:
    """Compute d_k = H_(k) - H_(k+1) over the descending sort of the counts."""
    counts = np.array([count for _, count in hist.sorted_items()], dtype=np.int64)
    if counts.size < 2:
        raise ValueError("gap profile needs at least two candidates")
    return GapProfile(gaps=counts[:-1] - counts[1:], regularizer=regularizer)


def find_best_k(
    hist: VoteHistogram,
    epsilon: float,
    regularizer: Regularizer | None,
    rng: np.random.Generator,
) -> int:
    """Privately choose the k whose gap H_(k) - H_(k+1) is largest.

    Runs the exponential mechanism over k with utility d_k + r(k) and Gumbel
    scale 4 / epsilon, which is epsilon-DP for the sensitivity-2 gaps.

    Args:
        hist: Token histogram with at least two candidates.
        epsilon: Privacy parameter of the selection.
        regularizer: Data-independent r(k). ``None`` uses the default window
            [15, 30].
        rng: Random source.

    Returns:
        Selected k (1-based).

    Raises:
        InfeasibleSelectionError: If r(k) is -inf for every defined gap.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    profile = gap_profile(hist, regularizer or window_regularizer())
    scale = 2.0 * GAP_SENSITIVITY / epsilon
    return exponential_via_gumbel(profile.utilities(), scale, rng) + 1


def ptr_threshold_offset(sigma: float, delta: float) -> float:
    """Return the (1 - delta)-quantile of a centred Gaussian with std 2 * sigma."""
    if sigma == 0:
        return 0.0
    return float(norm.ppf(1.0 - delta, loc=0.0, scale=2.0 * sigma))


def top_k_with_ptr(
    hist: VoteHistogram,
    k: int,
    sigma: float,
    delta: float,
    rng: np.random.Generator,
) -> frozenset[int] | None:
    """Release the exact top-k labels when a private stability test passes.

    The test computes max(2, d_k) + N(0, 4 sigma^2) minus the (1 - delta)
    quantile of N(0, (2 sigma)^2) and passes when the result exceeds 2. A
    histogram with exactly k candidates is padded with one zero-count entry.

    Args:
        hist: Token histogram.
        k: Number of labels to release.
        sigma: Noise scale of the test.
        delta: Failure probability of the test.
        rng: Random source.

    Returns:
        The unordered set of the k highest-count labels (ties broken by
        label id), or ``None`` when the test fails. The caller then falls
        back to zero-shot generation.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")

    items = hist.sorted_items()
    counts = [count for _, count in items]
    if len(counts) == k:
        counts.append(0)
    if k >= len(counts):
        raise ValueError(f"k={k} needs at least {k + 1} candidates, got {len(items)}")

    gap = counts[k - 1] - counts[k]
    noise = rng.normal(0.0, 2.0 * sigma) if sigma > 0 else 0.0
    noisy_gap = max(PTR_STABILITY_GAP, gap) + noise - ptr_threshold_offset(sigma, delta)
    if noisy_gap > PTR_STABILITY_GAP:
        return frozenset(label for label, _ in items[:k])
    return None


def joint_utility_matrix(hist: VoteHistogram, k: int) -> JointUtilityMatrix:
    """Build the tie-broken utility matrix of the joint exponential mechanism."""
    items = hist.sorted_items()
    d = len(items)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if d < k:
        raise ValueError(f"joint selection of k={k} needs at least k candidates, got {d}")

    counts = np.array([count for _, count in items], dtype=float)
    rows = np.arange(1, k + 1)[:, np.newaxis]
    cols = np.arange(1, d + 1)[np.newaxis, :]
    # The fractional term is < 1/2 and data-independent: it only splits ties.
    entries = -(counts[:k, np.newaxis] - counts[np.newaxis, :]) - (
        d * (k - rows) + cols
    ) / (2 * d * k)
    return JointUtilityMatrix(entries=entries, item_order=tuple(label for label, _ in items))


@dataclass(frozen=True)
class _SortedCells:
    rows: np.ndarray
    cols: np.ndarray
    utilities: np.ndarray
    log_counts: np.ndarray = field(repr=False)


def _sorted_cells(matrix: JointUtilityMatrix) -> _SortedCells:
    """Sort cells by decreasing utility and count the sequences each one heads.

    ``log_counts[a]`` is log m(U_(a)), the log-number of size-k sequences whose
    smallest utility is the a-th largest cell. It is -inf before every row has
    been reached.
    """
    k, d = matrix.k, matrix.d
    order = np.argsort(-matrix.entries, axis=None, kind="stable")
    rows, cols = np.unravel_index(order, (k, d))
    log_counts = np.full(d * k, -np.inf)

    # n[r] is the number of free items for row r below the current threshold.
    n = np.zeros(k, dtype=np.int64)
    seen: set[int] = set()
    start = -1
    for a in range(d * k):
        n[rows[a]] = cols[a] + 1 - rows[a]
        seen.add(int(rows[a]))
        if len(seen) == k:
            start = a
            break
    if start < 0:
        raise RuntimeError("row counts were never filled")

    # Every n[r] >= 1 from here on, so the running product never divides by 0.
    log_n = np.log(n.astype(float))
    log_p = float(log_n.sum())
    log_counts[start] = log_p - log_n[rows[start]]
    for a in range(start + 1, d * k):
        r = rows[a]
        log_p -= log_n[r]
        log_counts[a] = log_p
        n[r] = cols[a] + 1 - r
        log_n[r] = math.log(n[r])
        log_p += log_n[r]

    return _SortedCells(rows, cols, matrix.entries.ravel()[order], log_counts)


def joint_em_top_k(
    counts: VoteHistogram, k: int, epsilon: float, rng: np.random.Generator
) -> tuple[int, ...]:
    """Joint exponential mechanism over ordered size-k label sequences.

    A single epsilon-DP release: a utility cell is sampled with probability
    proportional to m(U) * exp(epsilon * ceil(U) / 2), then the rest of the
    sequence is completed uniformly among sequences headed by that cell.

    Args:
        counts: Histogram over at least k candidates.
        k: Sequence length.
        epsilon: Privacy parameter.
        rng: Random source.

    Returns:
        k distinct label ids, in estimated rank order.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    matrix = joint_utility_matrix(counts, k)
    cells = _sorted_cells(matrix)

    log_weights = cells.log_counts + epsilon * np.ceil(cells.utilities) / 2.0
    chosen = exponential_via_gumbel(log_weights, 1.0, rng)
    head_row, head_col = int(cells.rows[chosen]), int(cells.cols[chosen])
    threshold = cells.utilities[chosen]

    sequence = [-1] * k
    sequence[head_row] = head_col
    for row in range(k):
        if row == head_row:
            continue
        # Rows decrease left to right, so the admissible items form a prefix.
        prefix = int(np.count_nonzero(matrix.entries[row] > threshold))
        taken = set(sequence)
        options = [j for j in range(prefix) if j not in taken]
        sequence[row] = int(rng.choice(options))

    return tuple(matrix.item_order[j] for j in sequence)
