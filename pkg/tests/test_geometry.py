import csv
import math

import mpmath
import numpy as np
import pytest

from mcgdiff.geometry import (CSV_SCHEMA, ManifoldSpec, adversarial_operator, band_radius, check_concentration,
                              check_projector, check_tangency, epsilon_from_prime, run_default_suite,
                              tweedie_jacobian_vjp, write_csv)
from mcgdiff.operators import Dense, WeightSpec
from mcgdiff.schedule import NoiseLevel, ParameterError, make_ve_schedule

# eps(0.01) from the band expression in 50-digit arithmetic
EPS_001 = 0.10453610171872608
BOUND_400_4 = 0.9618737714167767   # 1 - 2 exp(-396 * 0.01)
BOUND_100_2 = 0.24937780229720092  # 1 - 2 exp(-98 * 0.01)


def test_band_radius_example():
    assert band_radius(2.0, 50, 5) == pytest.approx(13.416407864998738, rel=1e-15)


def test_epsilon_frozen_and_rechecked():
    assert epsilon_from_prime(0.01) == pytest.approx(EPS_001, rel=1e-14)
    mpmath.mp.dps = 50
    e = mpmath.mpf("0.01")
    ref = min(1 - mpmath.sqrt(1 - 2 * mpmath.sqrt(e)), mpmath.sqrt(1 + 2 * mpmath.sqrt(e) + 2 * e) - 1)
    assert float(ref) == pytest.approx(EPS_001, rel=1e-15)
    with pytest.raises(ParameterError):
        epsilon_from_prime(0.3)


def test_bounds_frozen():
    assert 1 - 2 * math.exp(-396 * 0.01) == pytest.approx(BOUND_400_4, rel=1e-15)
    assert 1 - 2 * math.exp(-98 * 0.01) == pytest.approx(BOUND_100_2, rel=1e-15)


def test_degenerate_manifold_rejected():
    with pytest.raises(ParameterError):
        ManifoldSpec.random(5, 5, 0)
    with pytest.raises(ParameterError):
        ManifoldSpec(3, 1, np.array([[2.0], [0.0], [0.0]]), np.zeros(3))


def test_free_coordinate_is_normal():
    spec = ManifoldSpec.random(20, 4, 1, free_coordinate=7)
    assert np.all(spec.tangent_basis[7] == 0.0)
    assert abs(spec.offset @ spec.tangent_basis).max() < 1e-12


@pytest.mark.parametrize("n,l,bound", [(400, 4, BOUND_400_4), (100, 2, BOUND_100_2)])
def test_concentration_exceeds_bound(n, l, bound):
    spec = ManifoldSpec.random(n, l, 3)
    res = check_concentration(spec, None, NoiseLevel(1.0, 0.5, 0.0), 100_000, 0.01, 4)
    assert res.sample_count == 100_000
    assert 1 - res.delta_target == pytest.approx(bound, rel=1e-12)
    assert res.empirical_fraction_in_band > bound
    assert res.passed


def test_concentration_on_schedule_level():
    spec = ManifoldSpec.random(60, 3, 5)
    s = make_ve_schedule(100, 0.01, 10.0)
    res = check_concentration(spec, s, 50, 5000, 0.01, 6)
    assert res.i == 50
    assert res.r_i == pytest.approx(s.b_at(50) * math.sqrt(57))
    with pytest.raises(ParameterError):
        check_concentration(spec, s, 50, 10, 0.01, 6)


def _oracle(tau=1.0):
    spec = ManifoldSpec.random(50, 5, 8)
    s = make_ve_schedule(1000, 0.01, 50.0)
    return spec, s, spec.gaussian_model(tau, s)


@pytest.mark.parametrize("b", [1.0, 0.1, 0.01])
def test_projector_matches_closed_form(b):
    spec, s, m = _oracle()
    pr = check_projector(spec, m, s, NoiseLevel(1.0, b, 0.0), 9)
    c = 1.0 / (1.0 + b * b)
    assert pr.asymmetry <= 1e-10
    assert pr.range_normal <= 1e-10
    assert pr.closed_form_error <= 1e-8
    assert pr.idempotence == pytest.approx(c * (1 - c), abs=1e-8)


def test_projector_idempotence_decreases():
    spec, s, m = _oracle()
    vals = [check_projector(spec, m, s, NoiseLevel(1.0, b, 0.0), 9).idempotence for b in (1.0, 0.1, 0.01)]
    assert vals[0] > vals[1] > vals[2]


def test_jacobian_assembly_on_schedule_level():
    spec, s, m = _oracle(tau=2.0)
    lv = s.level(400)
    x = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_allclose(tweedie_jacobian_vjp(m, x, lv), m.tweedie_jacobian(lv), atol=1e-12)


def test_tangency_mcg_vs_naive():
    spec = ManifoldSpec.random(50, 5, 11, free_coordinate=0)
    s = make_ve_schedule(1000, 0.01, 50.0)
    m = spec.gaussian_model(1.0, s)
    H = adversarial_operator(spec, 0)
    assert 0 in H.kept
    y = H.apply(spec.offset + spec.tangent_basis @ np.ones(5))
    for b in (1.0, 0.3, 0.01):
        tr = check_tangency(spec, m, s, H, WeightSpec.IDENTITY, y, NoiseLevel(1.0, b, 0.0), 10, 12)
        assert tr.mcg_ratio <= 1e-8
        assert tr.naive_ratio >= 0.1


def test_tangency_negated_jacobian_breaks():
    spec = ManifoldSpec.random(50, 5, 11, free_coordinate=0)
    s = make_ve_schedule(1000, 0.01, 50.0)
    m = spec.gaussian_model(1.0, s)
    H = adversarial_operator(spec, 0)
    y = H.apply(spec.offset)
    tr = check_tangency(spec, m, s, H, WeightSpec.IDENTITY, y, NoiseLevel(1.0, 0.5, 0.0), 5, 1,
                        negate_jacobian=True)
    assert tr.mcg_ratio > 1e-3


def test_tangency_zero_residual_convention():
    spec = ManifoldSpec.random(6, 2, 2)
    s = make_ve_schedule(10, 0.01, 1.0)
    m = spec.gaussian_model(1.0, s)
    H = Dense(np.zeros((2, 6)))
    tr = check_tangency(spec, m, s, H, WeightSpec.IDENTITY, np.zeros(2), NoiseLevel(1.0, 0.5, 0.0), 3, 0)
    assert tr.mcg_ratio == 0.0 and tr.naive_ratio == 0.0


@pytest.fixture(scope="module")
def suite():
    return run_default_suite(0)


def test_default_suite_passes(suite):
    failed = [r for r in suite if not r.passed]
    assert not failed, failed
    assert {r.check for r in suite} >= {"concentration", "projector_symmetry", "projector_range",
                                         "projector_idempotence_decreasing", "tangency_mcg", "tangency_naive"}


def test_default_suite_mutation_fails():
    records = run_default_suite(0, negate_jacobian=True, concentration_samples=2000)
    assert not all(r.passed for r in records if r.check == "tangency_mcg")
    assert all(r.passed for r in records if r.check.startswith("projector"))


def test_default_suite_seed_stable(suite):
    other = run_default_suite(1)
    assert [(r.check, r.params, r.passed) for r in other] == [(r.check, r.params, r.passed) for r in suite]


def test_default_suite_deterministic(suite):
    again = run_default_suite(0)
    assert [r.statistic for r in again] == [r.statistic for r in suite]


def test_csv_output(tmp_path, suite):
    path = tmp_path / "geometry.csv"
    write_csv(suite, path)
    lines = path.read_text().splitlines()
    assert lines[0] == f"# schema: {CSV_SCHEMA}"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == len(suite)
    assert float(rows[0]["statistic"]) == suite[0].statistic
    assert rows[0]["passed"] == "True"
