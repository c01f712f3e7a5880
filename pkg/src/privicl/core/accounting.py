"""Privacy accounting and noise calibration.

Gaussian releases (RNM-Gaussian votes and noisy embeddings, possibly Poisson
subsampled) are tracked with privacy-loss random variables discretized on a
uniform grid and composed by FFT. Exponential mechanisms and the
propose-test-release test are tracked with (approximate) Renyi DP curves. The
two tracks are converted to (epsilon, delta) separately and added.

Every reported epsilon is an upper bound: each elementary distribution
dominates the true privacy loss, tails are moved up, and truncated mass is
charged to delta.
"""

import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path
from typing import Any

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gammaln, logsumexp
from scipy.stats import norm

from src.privicl.core.mechanisms import NoiseParams
from src.privicl.core.storage import read_jsonl, write_jsonl
from src.privicl.utils.config import AccountantConfig
from src.privicl.utils.errors import PrivacyAccountingError

logger = logging.getLogger(__name__)

DEFAULT_MESH = 1e-4
DEFAULT_TAIL_MASS = 1e-12
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    sorted(
        {round(1.0 + k / 10.0, 1) for k in range(1, 41)}
        | {float(a) for a in range(2, 65)}
        | {128.0, 256.0, 1024.0, 1e6}
    )
)
# Mass below this is trimmed from composed distributions (pessimistically).
NEGLIGIBLE_MASS = 1e-15
MAX_GRID_POINTS = 5_000_000
CALIBRATION_TOLERANCE = 1e-3
SIGMA_RANGE = (1e-2, 1e4)
EM_EPSILON_RANGE = (1e-6, 1e2)


class MechanismKind(Enum):
    """Mechanism families recorded in the ledger."""

    GAUSSIAN = auto()  # Accounted with privacy-loss distributions
    EM = auto()  # Pure-DP exponential mechanism, accounted in RDP
    PTR = auto()  # Propose-test-release, approximate RDP


@dataclass(frozen=True)
class PrvDistribution:
    """Discretized privacy-loss random variable.

    Attributes:
        grid_origin: Loss value of the first grid point.
        mesh: Grid spacing.
        masses: Probability of each grid point.
        mass_at_plus_infinity: Probability of an infinite privacy loss.
        rounding_slack: Largest upward shift introduced by moving mass up onto
            a coarser grid with ``regrid``. Adds up under composition.
    """

    grid_origin: float
    mesh: float
    masses: np.ndarray
    mass_at_plus_infinity: float = 0.0
    rounding_slack: float = 0.0

    def __post_init__(self) -> None:
        if not self.mesh > 0:
            raise ValueError(f"mesh must be > 0, got {self.mesh}")
        if self.masses.ndim != 1 or self.masses.size == 0:
            raise ValueError("masses must be a non-empty 1-D array")
        if not 0 <= self.mass_at_plus_infinity <= 1:
            raise ValueError(f"mass at +inf must lie in [0, 1], got {self.mass_at_plus_infinity}")
        if abs(self.total_mass() - 1.0) > 1e-9:
            raise ValueError(f"masses sum to {self.total_mass()}, expected 1")

    @classmethod
    def point_mass(cls, mesh: float, value: float = 0.0) -> "PrvDistribution":
        """Distribution of a mechanism whose privacy loss is always ``value``."""
        return cls(grid_origin=value, mesh=mesh, masses=np.ones(1))

    @property
    def values(self) -> np.ndarray:
        return self.grid_origin + self.mesh * np.arange(self.masses.size)

    def total_mass(self) -> float:
        return float(self.masses.sum()) + self.mass_at_plus_infinity

    def mean(self) -> float:
        if self.mass_at_plus_infinity > 0:
            return math.inf
        return float(np.dot(self.values, self.masses))

    def regrid(self, mesh: float) -> "PrvDistribution":
        """Move every mass up to the next multiple of ``mesh``."""
        if not mesh > 0:
            raise ValueError(f"mesh must be > 0, got {mesh}")
        index = np.ceil(self.values / mesh - 1e-12).astype(np.int64)
        start = int(index[0])
        masses = np.bincount(index - start, weights=self.masses)
        return PrvDistribution(
            grid_origin=start * mesh,
            mesh=mesh,
            masses=masses,
            mass_at_plus_infinity=self.mass_at_plus_infinity,
            rounding_slack=self.rounding_slack + mesh,
        )


@dataclass(frozen=True)
class RdpCurve:
    """Renyi DP guarantee over a grid of orders.

    Attributes:
        orders: Sorted orders, all > 1.
        eps_values: epsilon(order) for each order.
        delta_approx: Failure mass of an approximate RDP guarantee, 0 for
            pure RDP.
    """

    orders: tuple[float, ...]
    eps_values: tuple[float, ...]
    delta_approx: float = 0.0

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.eps_values) or not self.orders:
            raise ValueError("orders and eps_values must be non-empty and of equal length")
        if any(a <= 1 for a in self.orders):
            raise ValueError("every order must be > 1")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(not e >= 0 for e in self.eps_values):
            raise ValueError("eps_values must be non-negative")
        if not 0 <= self.delta_approx <= 1:
            raise ValueError(f"delta_approx must lie in [0, 1], got {self.delta_approx}")

    @classmethod
    def zero(cls, orders: Sequence[float] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), (0.0,) * len(orders))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise PrivacyAccountingError("cannot compose RDP curves on different orders")
        return RdpCurve(
            self.orders,
            tuple(a + b for a, b in zip(self.eps_values, other.eps_values)),
            min(1.0, self.delta_approx + other.delta_approx),
        )

    def scaled(self, count: int) -> "RdpCurve":
        """Compose the curve with itself ``count`` times."""
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        return RdpCurve(
            self.orders,
            tuple(count * e for e in self.eps_values),
            min(1.0, count * self.delta_approx),
        )


@dataclass(frozen=True)
class LedgerEntry:
    """One line of the privacy ledger.

    Attributes:
        kind: Mechanism family.
        params: Noise of the invocation. Gaussian entries store the noise
            standard deviation as ``sigma`` together with the sensitivity.
        q: Poisson subsampling rate of the data the mechanism saw.
        count: Number of identical invocations.
    """

    kind: MechanismKind
    params: NoiseParams
    q: float = 1.0
    count: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        required = {
            MechanismKind.GAUSSIAN: ("sigma",),
            MechanismKind.EM: ("epsilon",),
            MechanismKind.PTR: ("sigma", "delta"),
        }[self.kind]
        missing = [name for name in required if getattr(self.params, name) is None]
        if missing:
            raise ValueError(f"{self.kind.name} entry needs {', '.join(missing)}")

    def to_record(self) -> dict[str, Any]:
        """Serialize with the documented key order."""
        return {
            "kind": self.kind,
            "sigma": self.params.sigma,
            "epsilon": self.params.epsilon,
            "q": self.q,
            "delta": self.params.delta,
            "sensitivity": self.params.sensitivity,
            "count": self.count,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "LedgerEntry":
        try:
            kind = MechanismKind[record["kind"]]
            params = NoiseParams(
                sigma=record.get("sigma"),
                epsilon=record.get("epsilon"),
                delta=record.get("delta"),
                sensitivity=record.get("sensitivity", 1.0),
            )
            return cls(kind, params, float(record.get("q", 1.0)), int(record.get("count", 1)))
        except (KeyError, TypeError, ValueError) as e:
            raise PrivacyAccountingError(f"Malformed ledger record {record!r}: {e}") from e


class PrivacyLedger:
    """Append-only record of mechanism invocations.

    Appends follow a single-writer contract: the caller serializes them.
    """

    def __init__(self, entries: Iterable[LedgerEntry] = ()) -> None:
        self._entries: list[LedgerEntry] = list(entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def append(self, entry: LedgerEntry) -> None:
        self._entries.append(entry)

    def record(
        self, kind: MechanismKind, params: NoiseParams, q: float = 1.0, count: int = 1
    ) -> LedgerEntry:
        """Build an entry, append it and return it."""
        entry = LedgerEntry(kind, params, q, count)
        self.append(entry)
        return entry

    def projected(self, entries: Iterable[LedgerEntry]) -> "PrivacyLedger":
        """Return a copy with ``entries`` appended. The ledger itself is untouched."""
        return PrivacyLedger([*self._entries, *entries])

    def total(
        self, delta: float, config: AccountantConfig | None = None, warn: bool = True
    ) -> tuple[float, float]:
        return ledger_total(self, delta, config, warn)

    def save(self, path: Path | str) -> None:
        write_jsonl(path, (entry.to_record() for entry in self._entries))

    @classmethod
    def load(cls, path: Path | str) -> "PrivacyLedger":
        """Load a ledger file. A missing file gives an empty ledger."""
        return cls(LedgerEntry.from_record(record) for record in read_jsonl(path))


def _loss_to_output(y: np.ndarray, sigma: float, q: float) -> np.ndarray:
    """Invert the increasing map from mechanism output o to privacy loss.

    The loss is log(1 - q + q exp((2o - 1) / (2 sigma^2))). Loss values at or
    below log(1 - q) map to -inf.
    """
    if q == 1.0:
        return sigma**2 * y + 0.5
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        small = np.log(np.expm1(y) + q)
        large = y + np.log1p(-(1.0 - q) * np.exp(-y))
        log_ratio = np.where(y > 0, large, small) - math.log(q)
    return np.where(np.isnan(log_ratio), -np.inf, sigma**2 * log_ratio + 0.5)


def _output_to_loss(o: float, sigma: float, q: float) -> float:
    z = (2.0 * o - 1.0) / (2.0 * sigma**2)
    if q == 1.0:
        return z
    return float(np.logaddexp(math.log1p(-q), math.log(q) + z))


def _log_interval_mass(lo: np.ndarray, hi: np.ndarray, loc: float, sigma: float) -> np.ndarray:
    """Log-probability of each interval (lo, hi] under N(loc, sigma^2)."""
    a = (lo - loc) / sigma
    b = (hi - loc) / sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        # Differences of the smaller of CDF and survival function keep precision.
        log_cdf_b = norm.logcdf(b)
        via_cdf = log_cdf_b + np.log1p(-np.exp(norm.logcdf(a) - log_cdf_b))
        log_sf_a = norm.logsf(a)
        via_sf = log_sf_a + np.log1p(-np.exp(norm.logsf(b) - log_sf_a))
    log_mass = np.where(b <= 0, via_cdf, via_sf)
    return np.where(np.isnan(log_mass), -np.inf, log_mass)


def subsampled_gaussian_prv(
    sigma: float,
    q: float,
    mesh: float = DEFAULT_MESH,
    truncation_bound: float | None = None,
    tail_mass: float = DEFAULT_TAIL_MASS,
) -> PrvDistribution:
    """Discretize the privacy loss of the Poisson-subsampled Gaussian mechanism.

    The mechanism output is o ~ P = (1 - q) N(0, sigma^2) + q N(1, sigma^2)
    against the reference Q = N(0, sigma^2), i.e. unit sensitivity. The loss is
    monotone in o, so the P and Q mass between consecutive grid points is
    evaluated exactly through the map from loss back to output. Each
    interval's P mass is then split between its two end points so that both
    its P mass and its Q mass are kept. The resulting delta(epsilon) equals the
    true one at every grid point and lies above it in between, so reported
    epsilons are upper bounds and the discretization adds no systematic
    upward drift under composition.

    Args:
        sigma: Noise multiplier (standard deviation over sensitivity).
        q: Sampling rate in (0, 1].
        mesh: Grid spacing.
        truncation_bound: Outputs are truncated at this many standard
            deviations beyond each component mean. Derived from
            ``tail_mass`` when unset.
        tail_mass: Mass allowed outside the truncation bounds.

    Returns:
        The discretized distribution, on a grid whose top point is the upper
        truncation bound. Mass below the lowest point sits on it. Above the
        top point, delta at the top point goes to ``mass_at_plus_infinity``
        and the rest of the tail sits on the top point.

    Raises:
        PrivacyAccountingError: If the grid would exceed MAX_GRID_POINTS.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if not mesh > 0:
        raise ValueError(f"mesh must be > 0, got {mesh}")

    bound = truncation_bound if truncation_bound is not None else float(norm.isf(tail_mass / 2))
    loss_lo = _output_to_loss(-bound * sigma, sigma, q)
    loss_hi = _output_to_loss(1.0 + bound * sigma, sigma, q)
    spread = loss_hi - loss_lo

    n_points = math.ceil(spread / mesh) + 1
    if n_points > MAX_GRID_POINTS:
        raise PrivacyAccountingError(
            f"sigma={sigma:g}, q={q:g} needs {n_points} grid points at mesh {mesh:g}"
        )
    if mesh > spread / 10:
        logger.warning(
            "PRV mesh %g is coarse against the loss spread %g (sigma=%g, q=%g)",
            mesh, spread, sigma, q,
        )

    grid = loss_hi - mesh * np.arange(n_points - 1, -1, -1)
    o = _loss_to_output(grid, sigma, q)
    # Interval j is (o[j-1], o[j]]: the first is unbounded below, the last above.
    lo = np.concatenate(([-np.inf], o))
    hi = np.concatenate((o, [np.inf]))
    log_q_mass = _log_interval_mass(lo, hi, 0.0, sigma)
    log_p_mass = math.log(q) + _log_interval_mass(lo, hi, 1.0, sigma)
    if q < 1.0:
        log_p_mass = np.logaddexp(math.log1p(-q) + log_q_mass, log_p_mass)
    p_mass = np.exp(log_p_mass)

    # log(e^y Q(I) / P(I)) for the lower end y of each interval, in [-mesh, 0].
    with np.errstate(invalid="ignore"):
        log_ratio = grid + log_q_mass[1:] - log_p_mass[1:]
    log_ratio = np.clip(np.where(np.isnan(log_ratio), 0.0, log_ratio), -mesh, 0.0)

    inner = p_mass[1:-1]
    to_lower = inner * np.expm1(mesh + log_ratio[:-1]) / math.expm1(mesh)
    to_upper = np.clip(inner - to_lower, 0.0, None)
    to_top = p_mass[-1] * math.exp(log_ratio[-1])
    mass_inf = float(p_mass[-1] * -math.expm1(log_ratio[-1]))

    masses = np.zeros(n_points)
    masses[0] += p_mass[0]
    masses[:-1] += to_lower
    masses[1:] += to_upper
    masses[-1] += to_top
    masses *= (1.0 - mass_inf) / masses.sum()

    return PrvDistribution(
        grid_origin=float(grid[0]),
        mesh=mesh,
        masses=masses,
        mass_at_plus_infinity=mass_inf,
    )


def _trimmed(
    origin: float, mesh: float, masses: np.ndarray, mass_inf: float, slack: float
) -> PrvDistribution:
    """Clip FFT noise, drop negligible tails pessimistically and renormalize."""
    np.clip(masses, 0.0, None, out=masses)
    finite = 1.0 - mass_inf
    masses *= finite / masses.sum()

    head = np.cumsum(masses)
    tail = np.cumsum(masses[::-1])[::-1]
    first = int(np.searchsorted(head, NEGLIGIBLE_MASS, side="right"))
    last = masses.size - 1 - int(np.searchsorted(tail[::-1], NEGLIGIBLE_MASS, side="right"))
    if first > last:
        first = last = int(np.argmax(masses))

    kept = masses[first : last + 1].copy()
    # Lower tail moves up to the first kept point, upper tail goes to +inf.
    kept[0] += head[first - 1] if first > 0 else 0.0
    moved_up = tail[last + 1] if last + 1 < masses.size else 0.0
    mass_inf = min(1.0, mass_inf + moved_up)
    kept *= (1.0 - mass_inf) / kept.sum()

    return PrvDistribution(
        grid_origin=origin + first * mesh,
        mesh=mesh,
        masses=kept,
        mass_at_plus_infinity=mass_inf,
        rounding_slack=slack,
    )


def _convolve(a: PrvDistribution, b: PrvDistribution) -> PrvDistribution:
    size = a.masses.size + b.masses.size - 1
    if size > MAX_GRID_POINTS:
        raise PrivacyAccountingError(f"composition needs {size} grid points")
    masses = fftconvolve(a.masses, b.masses)
    mass_inf = 1.0 - (1.0 - a.mass_at_plus_infinity) * (1.0 - b.mass_at_plus_infinity)
    return _trimmed(
        a.grid_origin + b.grid_origin,
        a.mesh,
        masses,
        mass_inf,
        a.rounding_slack + b.rounding_slack,
    )


def _self_compose(prv: PrvDistribution, count: int) -> PrvDistribution:
    """Exponentiation by squaring."""
    result: PrvDistribution | None = None
    base = prv
    while count:
        if count & 1:
            result = base if result is None else _convolve(result, base)
        count >>= 1
        if count:
            base = _convolve(base, base)
    assert result is not None
    return result


def compose_prvs(
    prvs: Sequence[PrvDistribution], counts: Sequence[int], regrid: bool = False
) -> PrvDistribution:
    """Distribution of the sum of independent privacy losses.

    Args:
        prvs: Distributions to compose.
        counts: How many times each distribution is composed.
        regrid: Allow distributions on different meshes. They are then moved
            onto the coarsest mesh first.

    Returns:
        The composed distribution.

    Raises:
        PrivacyAccountingError: If meshes differ and ``regrid`` is False.
    """
    if not prvs or len(prvs) != len(counts):
        raise ValueError("need one count per distribution and at least one distribution")
    if any(c < 1 for c in counts):
        raise ValueError("counts must be >= 1")

    mesh = max(p.mesh for p in prvs)
    if any(not math.isclose(p.mesh, mesh, rel_tol=1e-9) for p in prvs):
        if not regrid:
            raise PrivacyAccountingError("distributions have different meshes; pass regrid=True")
        prvs = [p if math.isclose(p.mesh, mesh, rel_tol=1e-9) else p.regrid(mesh) for p in prvs]

    result: PrvDistribution | None = None
    for prv, count in zip(prvs, counts):
        powered = _self_compose(prv, count)
        result = powered if result is None else _convolve(result, powered)
    assert result is not None
    logger.debug(
        "Composed %d distributions (%d invocations) into %d grid points",
        len(prvs), sum(counts), result.masses.size,
    )
    return result


def prv_to_epsilon(prv: PrvDistribution, delta: float) -> float:
    """Smallest epsilon with E[(1 - e^(epsilon - Y))+] + P(Y = inf) <= delta.

    Solved exactly on the grid: between consecutive grid points the left-hand
    side is S - e^epsilon T for suffix sums S and T.

    Raises:
        PrivacyAccountingError: If delta does not exceed the mass at +inf.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    mass_inf = prv.mass_at_plus_infinity
    if delta <= mass_inf:
        raise PrivacyAccountingError(
            f"delta={delta:g} is unachievable: infinite-loss mass is {mass_inf:g}"
        )

    y = prv.values
    p = prv.masses
    suffix = np.cumsum(p[::-1])[::-1]
    with np.errstate(divide="ignore"):
        log_terms = np.log(p) - y
    log_suffix_t = np.logaddexp.accumulate(log_terms[::-1])[::-1]

    # delta(y_k) uses the points strictly above y_k.
    above = np.append(suffix[1:], 0.0)
    log_above_t = np.append(log_suffix_t[1:], -np.inf)
    delta_at_grid = above + mass_inf - np.exp(y + log_above_t)

    k = int(np.argmax(delta_at_grid <= delta))
    epsilon = math.log(suffix[k] + mass_inf - delta) - log_suffix_t[k]
    return max(0.0, epsilon)


def _log_cosh(x: float) -> float:
    x = abs(x)
    return x + math.log1p(math.exp(-2.0 * x)) - math.log(2.0)


def em_rdp_curve(epsilon0: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Renyi DP of an epsilon0-DP exponential mechanism.

    epsilon(a) = min(a epsilon0^2 / 2,
                     log(cosh((2a - 1) epsilon0 / 2) / cosh(epsilon0 / 2)) / (a - 1)),
    the second term being the sinh form of the bound rewritten so it does not
    overflow for large a epsilon0.
    """
    if not epsilon0 > 0:
        raise ValueError(f"epsilon0 must be > 0, got {epsilon0}")
    if any(a <= 1 for a in orders):
        raise ValueError("every order must be > 1")
    values = []
    for a in orders:
        tight = (_log_cosh((2 * a - 1) * epsilon0 / 2) - _log_cosh(epsilon0 / 2)) / (a - 1)
        values.append(max(0.0, min(a * epsilon0**2 / 2, tight)))
    return RdpCurve(tuple(orders), tuple(values))


def ptr_rdp(sigma: float, delta_fail: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Approximate RDP of the propose-test-release top-k step: a / (2 sigma^2)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 < delta_fail < 1:
        raise ValueError(f"delta_fail must lie in (0, 1), got {delta_fail}")
    return RdpCurve(tuple(orders), tuple(a / (2 * sigma**2) for a in orders), delta_fail)


def effective_sampling_rate(q: float, delta: float) -> float:
    """Subsampling rate q(1 - delta) / (1 - q delta) of an approximate RDP mechanism."""
    return q * (1.0 - delta) / (1.0 - q * delta)


def _log_binom(n: float, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def poisson_subsampled_rdp_bound(curve: RdpCurve, q: float) -> np.ndarray:
    """Upper bound on the RDP of a mechanism run on a Poisson subsample.

    For integer order a the bound is (1 / (a - 1)) log of
        (1 - q)^(a-1) (a q - q + 1)
        + C(a, 2) q^2 (1 - q)^(a-2) e^eps(2)
        + 3 sum_{l=3..a} C(a, l) (1 - q)^(a-l) q^l e^((l-1) eps(l)).
    Fractional orders use the bound at the next integer. eps(l) at orders the
    curve does not tabulate is bounded by the next tabulated order.

    Returns:
        One bound per order of ``curve``. Infinite where the curve does not
        reach high enough orders.
    """
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    orders = np.asarray(curve.orders)
    eps = np.asarray(curve.eps_values)
    log_q, log_1mq = math.log(q), math.log1p(-q)

    bounds = np.empty(orders.size)
    for i, order in enumerate(orders):
        a = max(2, math.ceil(order))
        ells = np.arange(2, a + 1, dtype=float)
        at = np.searchsorted(orders, ells, side="left")
        if at[-1] >= orders.size:
            bounds[i] = math.inf
            continue
        eps_l = eps[at]
        log_terms = (
            _log_binom(a, ells) + ells * log_q + (a - ells) * log_1mq + (ells - 1) * eps_l
        )
        log_terms[1:] += math.log(3.0)
        head = (a - 1) * log_1mq + math.log(a * q - q + 1)
        bounds[i] = logsumexp(np.append(log_terms, head)) / (a - 1)
    return np.maximum(bounds, 0.0)


def amplify_approx_rdp(curve: RdpCurve, q: float) -> RdpCurve:
    """Amplify a delta-approximate RDP curve by Poisson subsampling at rate q.

    The bound is evaluated at rate q(1 - delta) / (1 - q delta) and the failure
    mass becomes q delta. The result never exceeds the input curve.
    """
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if not curve.delta_approx < 1:
        raise ValueError("delta_approx must be < 1")
    if q == 1.0:
        return curve
    rate = effective_sampling_rate(q, curve.delta_approx)
    bound = poisson_subsampled_rdp_bound(curve, rate)
    amplified = np.minimum(np.asarray(curve.eps_values), bound)
    return RdpCurve(curve.orders, tuple(float(e) for e in amplified), q * curve.delta_approx)


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an (approximate) RDP curve to (epsilon, delta).

    epsilon = min over orders of eps(a) + log(1 / (delta - delta_approx)) / (a - 1).

    Raises:
        PrivacyAccountingError: If delta does not exceed ``curve.delta_approx``.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    residual = delta - curve.delta_approx
    if not residual > 0:
        raise PrivacyAccountingError(
            f"delta={delta:g} does not exceed the approximate-RDP mass {curve.delta_approx:g}"
        )
    orders = np.asarray(curve.orders)
    eps = np.asarray(curve.eps_values) + math.log(1.0 / residual) / (orders - 1.0)
    return max(0.0, float(np.min(eps))), delta


def _gaussian_track(
    entries: Sequence[LedgerEntry], config: AccountantConfig
) -> PrvDistribution:
    # Full-batch Gaussians merge exactly into one Gaussian.
    full_batch = 0.0
    grouped: dict[tuple[float, float], int] = defaultdict(int)
    for entry in entries:
        z = entry.params.noise_multiplier
        if entry.q == 1.0:
            full_batch += entry.count / z**2
        else:
            grouped[(z, entry.q)] += entry.count

    prvs, counts = [], []
    if full_batch > 0:
        merged = full_batch**-0.5
        prvs.append(
            subsampled_gaussian_prv(merged, 1.0, config.mesh, tail_mass=config.tail_mass)
        )
        counts.append(1)
    for (z, q), count in sorted(grouped.items()):
        prvs.append(subsampled_gaussian_prv(z, q, config.mesh, tail_mass=config.tail_mass))
        counts.append(count)
    return compose_prvs(prvs, counts)


def _rdp_track(entries: Sequence[LedgerEntry], orders: Sequence[float]) -> RdpCurve:
    grouped: dict[tuple[MechanismKind, NoiseParams, float], int] = defaultdict(int)
    for entry in entries:
        grouped[(entry.kind, entry.params, entry.q)] += entry.count

    total = RdpCurve.zero(orders)
    for (kind, params, q), count in grouped.items():
        if kind is MechanismKind.EM:
            # No amplification is claimed for subsampled exponential mechanisms.
            curve = em_rdp_curve(params.epsilon, orders)  # type: ignore[arg-type]
        else:
            curve = amplify_approx_rdp(ptr_rdp(params.sigma, params.delta, orders), q)  # type: ignore[arg-type]
        total = total + curve.scaled(count)
    return total


def ledger_total(
    ledger: PrivacyLedger,
    delta: float,
    config: AccountantConfig | None = None,
    warn: bool = True,
) -> tuple[float, float]:
    """Total (epsilon, delta) of a ledger.

    Gaussian entries are composed as privacy-loss distributions, exponential
    mechanism and propose-test-release entries as RDP curves. When both tracks
    are present delta is split evenly between them and their epsilons add.

    Args:
        ledger: Ledger to total.
        delta: Reporting delta.
        config: Accountant resolution.
        warn: Log a warning when truncated tails use up much of delta.

    Raises:
        PrivacyAccountingError: For entries with zero noise, or a delta the
            ledger cannot reach.
    """
    return _total(ledger, delta, config, warn)


def _total(
    ledger: PrivacyLedger, delta: float, config: AccountantConfig | None, warn: bool
) -> tuple[float, float]:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    config = config or AccountantConfig()
    orders = tuple(config.orders) if config.orders else DEFAULT_ORDERS

    entries = ledger.entries
    if not entries:
        return 0.0, delta
    for entry in entries:
        if entry.params.sigma == 0:
            raise PrivacyAccountingError(
                f"{entry.kind.name} entry with sigma=0 has infinite privacy cost"
            )

    gaussian = [e for e in entries if e.kind is MechanismKind.GAUSSIAN]
    others = [e for e in entries if e.kind is not MechanismKind.GAUSSIAN]
    track_delta = delta / 2 if gaussian and others else delta

    epsilon = 0.0
    if gaussian:
        prv = _gaussian_track(gaussian, config)
        gaussian_eps = prv_to_epsilon(prv, track_delta)
        if warn and prv.mass_at_plus_infinity > 0.1 * track_delta:
            logger.warning(
                "Truncated tails hold %.3g of the %.3g delta budget; "
                "consider a smaller tail_mass",
                prv.mass_at_plus_infinity, track_delta,
            )
        epsilon += gaussian_eps
    if others:
        epsilon += rdp_to_dp(_rdp_track(others, orders), track_delta)[0]
    return epsilon, delta


def _bisect_log(
    evaluate: Callable[[float], float],
    target: float,
    lo: float,
    hi: float,
    decreasing: bool,
    what: str,
) -> float:
    """Find x in [lo, hi] with evaluate(x) in [target (1 - tol), target].

    ``evaluate`` is the privacy cost of parameter x, decreasing in x for noise
    scales and increasing for per-call epsilons.
    """
    costly, cheap = (lo, hi) if decreasing else (hi, lo)
    if not evaluate(costly) > target or evaluate(cheap) > target:
        raise PrivacyAccountingError(
            f"Target epsilon={target:g} is not bracketed by {what} in [{lo:g}, {hi:g}]"
        )

    log_lo, log_hi = math.log(lo), math.log(hi)
    safe = cheap
    for _ in range(200):
        mid = math.exp((log_lo + log_hi) / 2)
        value = evaluate(mid)
        if target * (1 - CALIBRATION_TOLERANCE) <= value <= target:
            return mid
        if (value > target) == decreasing:
            log_lo = math.log(mid)
        else:
            log_hi = math.log(mid)
        if value <= target:
            safe = mid
        if log_hi - log_lo < 1e-12:
            break
    logger.warning("Calibration of %s stopped outside the tolerance band", what)
    return safe


def calibrate_sigma(
    target_eps: float,
    target_delta: float,
    q: float,
    n_queries: int,
    sensitivity: float = 1.0,
    config: AccountantConfig | None = None,
) -> float:
    """Noise for n_queries subsampled Gaussian releases to cost target_eps.

    Args:
        target_eps: Budget epsilon.
        target_delta: Budget delta.
        q: Subsampling rate.
        n_queries: Number of releases.
        sensitivity: L2 sensitivity of each release.
        config: Accountant resolution.

    Returns:
        Noise standard deviation sigma = multiplier * sensitivity, such that
        the ledger of the run reports epsilon within
        [target_eps (1 - 1e-3), target_eps].

    Raises:
        PrivacyAccountingError: If no multiplier in [1e-2, 1e4] brackets the
            target.
    """
    if not target_eps > 0:
        raise ValueError(f"target_eps must be > 0, got {target_eps}")
    if n_queries < 1:
        raise ValueError(f"n_queries must be >= 1, got {n_queries}")

    def evaluate(z: float) -> float:
        ledger = PrivacyLedger(
            [
                LedgerEntry(
                    MechanismKind.GAUSSIAN,
                    NoiseParams(sigma=z * sensitivity, sensitivity=sensitivity),
                    q,
                    n_queries,
                )
            ]
        )
        try:
            return _total(ledger, target_delta, config, warn=False)[0]
        except PrivacyAccountingError:
            # Grids too large to build only occur at tiny, very costly noise.
            return math.inf

    z = _bisect_log(evaluate, target_eps, *SIGMA_RANGE, decreasing=True, what="sigma")
    logger.info(
        "Calibrated noise multiplier %.4f for eps=%g, delta=%g, q=%g, n=%d",
        z, target_eps, target_delta, q, n_queries,
    )
    return z * sensitivity


def calibrate_em_epsilon(
    target_eps: float,
    target_delta: float,
    n_queries: int,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Per-call epsilon0 of n_queries exponential mechanisms costing target_eps."""
    if not target_eps > 0:
        raise ValueError(f"target_eps must be > 0, got {target_eps}")
    if n_queries < 1:
        raise ValueError(f"n_queries must be >= 1, got {n_queries}")

    def evaluate(epsilon0: float) -> float:
        return rdp_to_dp(em_rdp_curve(epsilon0, orders).scaled(n_queries), target_delta)[0]

    epsilon0 = _bisect_log(
        evaluate, target_eps, *EM_EPSILON_RANGE, decreasing=False, what="epsilon0"
    )
    logger.info(
        "Calibrated EM epsilon0 %.5f for eps=%g, delta=%g, n=%d",
        epsilon0, target_eps, target_delta, n_queries,
    )
    return epsilon0


def calibrate_ptr_sigma(
    target_eps: float,
    target_delta: float,
    q: float,
    n_queries: int,
    em_epsilon: float,
    ptr_delta: float,
    config: AccountantConfig | None = None,
) -> float:
    """Noise of the propose-test-release test given a FindBestK epsilon.

    Each query spends one exponential mechanism at ``em_epsilon`` and one test;
    the returned sigma makes the joint ledger cost target_eps.
    """
    def evaluate(sigma: float) -> float:
        ledger = PrivacyLedger(
            [
                LedgerEntry(MechanismKind.EM, NoiseParams(epsilon=em_epsilon), q, n_queries),
                LedgerEntry(
                    MechanismKind.PTR, NoiseParams(sigma=sigma, delta=ptr_delta), q, n_queries
                ),
            ]
        )
        try:
            return _total(ledger, target_delta, config, warn=False)[0]
        except PrivacyAccountingError:
            return math.inf

    sigma = _bisect_log(evaluate, target_eps, *SIGMA_RANGE, decreasing=True, what="PTR sigma")
    logger.info("Calibrated PTR sigma %.4f (delta_fail=%g)", sigma, ptr_delta)
    return sigma
