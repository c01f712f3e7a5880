"""
This script prints the calibrated Gaussian noise for the usual experiment grid:
epsilon in {1, 3, 8}, delta = 1e-5, sampling rate q in {0.005, 1} and
n in {1, 1000, 10000} queries. Each row also re-accounts the returned sigma so
you can check it lands just under the target.

Run it from the repository root:
    uv run python -m scripts.calibration_table

Large n at q = 0.005 takes a while with the default mesh.
"""

import itertools
import math

from src.privicl.core.accounting import LedgerEntry, MechanismKind, PrivacyLedger, calibrate_sigma
from src.privicl.core.mechanisms import NoiseParams

EPSILONS = (1.0, 3.0, 8.0)
DELTA = 1e-5
SAMPLING_RATES = (0.005, 1.0)
QUERY_COUNTS = (1, 1_000, 10_000)
SENSITIVITY = math.sqrt(2.0)  # Classification votes


def calibration_table():
    print(f"{'eps':>5} {'q':>6} {'n':>6} {'sigma':>10} {'accounted':>10}")
    for eps, q, n in itertools.product(EPSILONS, SAMPLING_RATES, QUERY_COUNTS):
        sigma = calibrate_sigma(eps, DELTA, q, n, SENSITIVITY)
        entry = LedgerEntry(
            MechanismKind.GAUSSIAN, NoiseParams(sigma=sigma, sensitivity=SENSITIVITY), q, n
        )
        accounted, _ = PrivacyLedger([entry]).total(DELTA, warn=False)
        print(f"{eps:>5g} {q:>6g} {n:>6d} {sigma:>10.4f} {accounted:>10.4f}")


if __name__ == "__main__":
    calibration_table()
