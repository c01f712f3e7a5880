import math

import numpy as np
import pytest

from src.privicl.core.accounting import (
    DEFAULT_MESH,
    DEFAULT_ORDERS,
    LedgerEntry,
    MechanismKind,
    PrivacyLedger,
    PrvDistribution,
    RdpCurve,
    amplify_approx_rdp,
    calibrate_em_epsilon,
    calibrate_ptr_sigma,
    calibrate_sigma,
    compose_prvs,
    effective_sampling_rate,
    em_rdp_curve,
    ledger_total,
    prv_to_epsilon,
    ptr_rdp,
    rdp_to_dp,
    subsampled_gaussian_prv,
)
from src.privicl.core.mechanisms import NoiseParams
from src.privicl.utils.config import AccountantConfig
from src.privicl.utils.errors import PrivacyAccountingError
from tests.conftest import gaussian_epsilon


def gaussian_entry(sigma, q=1.0, count=1, sensitivity=1.0):
    return LedgerEntry(
        MechanismKind.GAUSSIAN, NoiseParams(sigma=sigma, sensitivity=sensitivity), q, count
    )


@pytest.mark.parametrize("sigma", [0.5, 1.0, 4.0, 6.8516])
@pytest.mark.parametrize("delta", [1e-5, 1e-6])
def test_full_batch_gaussian_matches_analytic_oracle(sigma, delta):
    prv = subsampled_gaussian_prv(sigma, 1.0)
    assert prv_to_epsilon(prv, delta) == pytest.approx(gaussian_epsilon(sigma, delta), rel=0.02)


def test_prv_epsilon_is_an_upper_bound():
    sigma, delta = 1.0, 1e-5
    oracle = gaussian_epsilon(sigma, delta)
    assert prv_to_epsilon(subsampled_gaussian_prv(sigma, 1.0), delta) >= oracle - 1e-9
    assert prv_to_epsilon(subsampled_gaussian_prv(sigma, 1.0, mesh=0.05), delta) >= oracle - 1e-9


def test_fft_composition_matches_noise_scaling():
    delta = 1e-5
    composed = compose_prvs([subsampled_gaussian_prv(4.0, 1.0)], [4])
    single = subsampled_gaussian_prv(2.0, 1.0)
    assert prv_to_epsilon(composed, delta) == pytest.approx(
        prv_to_epsilon(single, delta), rel=0.01
    )


def halving_gap(sigma, q, n, delta=1e-5):
    coarse, fine = (
        prv_to_epsilon(compose_prvs([subsampled_gaussian_prv(sigma, q, mesh=mesh)], [n]), delta)
        for mesh in (DEFAULT_MESH, DEFAULT_MESH / 2)
    )
    return abs(coarse - fine) / fine


@pytest.mark.parametrize(("sigma", "n"), [(1.0, 1000), (0.8, 10_000)])
def test_mesh_halving_is_stable(sigma, n):
    assert halving_gap(sigma, 0.005, n) < 0.005


@pytest.mark.slow
def test_mesh_halving_is_stable_at_calibrated_noise():
    sigma = calibrate_sigma(1.0, 1e-5, 0.005, 10_000)
    assert halving_gap(sigma, 0.005, 10_000) < 0.005


def test_many_compositions_do_not_drift():
    delta = 1e-5
    composed = compose_prvs([subsampled_gaussian_prv(100.0, 1.0)], [10_000])
    oracle = gaussian_epsilon(1.0, delta)
    assert prv_to_epsilon(composed, delta) == pytest.approx(oracle, rel=0.005)
    assert prv_to_epsilon(composed, delta) >= oracle - 1e-9


def test_subsampling_amplifies():
    delta = 1e-5
    eps = [
        prv_to_epsilon(compose_prvs([subsampled_gaussian_prv(1.0, q, mesh=1e-3)], [100]), delta)
        for q in (0.01, 0.1, 1.0)
    ]
    assert eps[0] < eps[1] < eps[2]


def test_prv_masses_sum_to_one():
    prv = subsampled_gaussian_prv(1.5, 0.05)
    assert prv.total_mass() == pytest.approx(1.0, abs=1e-9)
    assert prv.mean() >= 0


def test_prv_distribution_validates_mass():
    with pytest.raises(ValueError):
        PrvDistribution(0.0, 1e-3, np.array([0.5, 0.4]))


def test_compose_refuses_mismatched_meshes_unless_regridding():
    a = subsampled_gaussian_prv(2.0, 1.0, mesh=1e-3)
    b = subsampled_gaussian_prv(2.0, 1.0, mesh=2e-3)
    with pytest.raises(PrivacyAccountingError):
        compose_prvs([a, b], [1, 1])
    merged = compose_prvs([a, b], [1, 1], regrid=True)
    assert merged.mesh == pytest.approx(2e-3)
    assert merged.rounding_slack == pytest.approx(2e-3)


def test_unachievable_delta():
    prv = PrvDistribution(0.0, 1e-3, np.array([0.9]), mass_at_plus_infinity=0.1)
    with pytest.raises(PrivacyAccountingError):
        prv_to_epsilon(prv, 0.05)


def test_em_rdp_spot_value():
    curve = em_rdp_curve(1.0, (2.0,))
    assert curve.eps_values[0] == pytest.approx(0.7357, abs=1e-3)


def test_em_rdp_never_exceeds_pure_dp_bound():
    curve = em_rdp_curve(0.5)
    assert all(e <= 0.5 + 1e-12 for e in curve.eps_values)


def test_rdp_to_dp_on_linear_curve():
    orders = DEFAULT_ORDERS
    curve = RdpCurve(orders, tuple(a / 2 for a in orders))
    epsilon, delta = rdp_to_dp(curve, 1e-5)
    oracle = min(a / 2 + math.log(1e5) / (a - 1) for a in orders)
    continuous_minimum = 0.5 + math.sqrt(2 * math.log(1e5))
    assert delta == 1e-5
    assert epsilon == pytest.approx(oracle, rel=1e-12)
    assert epsilon >= continuous_minimum - 1e-9
    assert epsilon == pytest.approx(5.3026, abs=1e-3)


def test_rdp_to_dp_needs_delta_above_failure_mass():
    curve = ptr_rdp(1.0, 1e-3)
    with pytest.raises(PrivacyAccountingError):
        rdp_to_dp(curve, 1e-4)


def test_effective_sampling_rate_formula():
    q, d = 0.01, 1e-4
    assert effective_sampling_rate(q, d) == pytest.approx(q * (1 - d) / (1 - q * d), abs=1e-9)


def test_amplification_never_hurts_and_scales_failure_mass():
    curve = ptr_rdp(2.0, 1e-6)
    amplified = amplify_approx_rdp(curve, 0.01)
    assert amplify_approx_rdp(curve, 1.0) is curve
    assert all(a <= b for a, b in zip(amplified.eps_values, curve.eps_values))
    assert amplified.delta_approx == pytest.approx(1e-8)
    assert amplified.eps_values[curve.orders.index(2.0)] < 0.01 * curve.eps_values[
        curve.orders.index(2.0)
    ]


def test_rdp_curve_composition():
    a = ptr_rdp(2.0, 1e-6, (2.0, 4.0))
    total = (a + a).scaled(3)
    assert total.eps_values == pytest.approx((6 * 2 / 8, 6 * 4 / 8))
    assert total.delta_approx == pytest.approx(6e-6)


def test_empty_ledger_costs_nothing():
    assert ledger_total(PrivacyLedger(), 1e-5) == (0.0, 1e-5)


def test_ledger_merges_full_batch_gaussians():
    delta = 1e-5
    ledger = PrivacyLedger([gaussian_entry(4.0, count=3), gaussian_entry(4.0)])
    single = PrivacyLedger([gaussian_entry(2.0)])
    assert ledger.total(delta)[0] == pytest.approx(single.total(delta)[0], rel=1e-9)


def test_ledger_uses_sensitivity():
    delta = 1e-5
    scaled = PrivacyLedger([gaussian_entry(2 * math.sqrt(2), sensitivity=math.sqrt(2))])
    unit = PrivacyLedger([gaussian_entry(2.0)])
    assert scaled.total(delta)[0] == pytest.approx(unit.total(delta)[0], rel=1e-6)


def test_ledger_refuses_noiseless_entries():
    with pytest.raises(PrivacyAccountingError):
        PrivacyLedger([gaussian_entry(0.0)]).total(1e-5)


def test_ledger_splits_delta_between_tracks():
    delta = 1e-5
    em = LedgerEntry(MechanismKind.EM, NoiseParams(epsilon=0.1), count=10)
    gauss = gaussian_entry(5.0)
    both = PrivacyLedger([em, gauss]).total(delta)[0]
    expected = (
        PrivacyLedger([gauss]).total(delta / 2)[0] + PrivacyLedger([em]).total(delta / 2)[0]
    )
    assert both == pytest.approx(expected)


def test_ledger_entry_requires_mechanism_fields():
    with pytest.raises(ValueError):
        LedgerEntry(MechanismKind.EM, NoiseParams(sigma=1.0))
    with pytest.raises(ValueError):
        LedgerEntry(MechanismKind.PTR, NoiseParams(sigma=1.0))


def test_ledger_save_and_load(tmp_path):
    path = tmp_path / "run.ledger.jsonl"
    ledger = PrivacyLedger()
    ledger.record(MechanismKind.GAUSSIAN, NoiseParams(sigma=3.0, sensitivity=1.5), 0.5)
    ledger.record(MechanismKind.PTR, NoiseParams(sigma=2.0, delta=1e-6), 0.5)
    ledger.save(path)

    first = path.read_text().splitlines()[0]
    assert first.index('"kind"') < first.index('"sigma"') < first.index('"epsilon"')
    assert first.index('"q"') < first.index('"delta"') < first.index('"count"')
    assert PrivacyLedger.load(path).entries == ledger.entries


def test_malformed_ledger_record():
    with pytest.raises(PrivacyAccountingError):
        LedgerEntry.from_record({"kind": "LAPLACE"})


def test_projection_leaves_ledger_untouched():
    ledger = PrivacyLedger([gaussian_entry(5.0)])
    projected = ledger.projected([gaussian_entry(5.0)])
    assert len(ledger) == 1 and len(projected) == 2


CALIBRATION_GRID = [
    pytest.param(epsilon, q, n, marks=pytest.mark.slow if q < 1 and n > 1 else ())
    for epsilon in (1.0, 3.0, 8.0)
    for q in (1.0, 0.005)
    for n in (1, 1000, 10_000)
]


@pytest.mark.parametrize(("epsilon", "q", "n"), CALIBRATION_GRID)
def test_calibrate_sigma_round_trip(epsilon, q, n):
    delta = 1e-5
    sensitivity = math.sqrt(2)
    sigma = calibrate_sigma(epsilon, delta, q, n, sensitivity)
    spent = PrivacyLedger([gaussian_entry(sigma, q, n, sensitivity)]).total(delta, warn=False)[0]
    assert epsilon * (1 - 1e-3) <= spent <= epsilon


def test_calibrated_sigma_beats_the_classical_bound():
    sigma = calibrate_sigma(1.0, 1e-5, 1.0, 1, math.sqrt(2))
    assert sigma <= 6.8516


def test_calibration_rejects_unbracketed_targets():
    with pytest.raises(PrivacyAccountingError):
        calibrate_sigma(1e-9, 1e-5, 1.0, 1)


def test_calibrate_em_epsilon_round_trip():
    epsilon0 = calibrate_em_epsilon(2.0, 1e-5, 100)
    spent = rdp_to_dp(em_rdp_curve(epsilon0).scaled(100), 1e-5)[0]
    assert 2.0 * (1 - 1e-3) <= spent <= 2.0


def test_calibrate_ptr_sigma_fills_the_remaining_budget():
    delta, n, q = 1e-5, 50, 0.5
    em_epsilon = calibrate_em_epsilon(1.5, delta, n)
    ptr_delta = delta / (4 * n)
    sigma = calibrate_ptr_sigma(3.0, delta, q, n, em_epsilon, ptr_delta)
    ledger = PrivacyLedger(
        [
            LedgerEntry(MechanismKind.EM, NoiseParams(epsilon=em_epsilon), q, n),
            LedgerEntry(MechanismKind.PTR, NoiseParams(sigma=sigma, delta=ptr_delta), q, n),
        ]
    )
    assert 3.0 * (1 - 1e-3) <= ledger.total(delta, AccountantConfig())[0] <= 3.0
