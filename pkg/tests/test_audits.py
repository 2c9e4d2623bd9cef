import numpy as np
import pytest

from utils.audits import LEMMAS, audit_grid, audit_stability, inequality_audit, weight_integral
from utils.custom_types import AuditSpec
from utils.errors import DomainError, UnsupportedLemmaError
from utils.tensors import blowup_limit

HARD_LEMMAS = [
    "integral_weight_ratio",
    "monotone_power_difference",
    "v_power_bounds",
    "v_convexity",
    "v_sandwich",
    "mean_minimality",
    "hessian_bounds",
]


@pytest.fixture
def audit_spec(params_factory):
    def factory(p=3.0, mu=0.0, samples=200, **kwargs):
        return AuditSpec(params=params_factory(p=p, mu=mu), samples=samples, **kwargs)

    return factory


class TestWeightIntegral:
    def test_constant_segment(self):
        xi = np.array([[[0.6, 0.2], [0.2, -0.4]]])
        assert weight_integral(xi, xi, 0.0, 1.0, 0.0)[0] == pytest.approx(np.sum(xi**2), rel=1e-12)

    @pytest.mark.parametrize("r", [0.0, 0.5, 2.0])
    def test_zero_exponent_integrates_the_jacobi_weight(self, r):
        rng = np.random.default_rng(0)
        xi, eta = rng.standard_normal((2, 3, 2, 2))
        np.testing.assert_allclose(weight_integral(xi, eta, 0.5, 0.0, r), 1.0 / (r + 1.0), rtol=1e-12)

    def test_segment_through_zero_with_negative_exponent(self):
        xi = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        assert weight_integral(xi, -xi, 0.0, -0.25, 0.0)[0] == pytest.approx(2.0, rel=1e-8)


class TestInequalityAudit:
    @pytest.mark.parametrize("lemma_id", HARD_LEMMAS)
    @pytest.mark.parametrize(("p", "mu"), [(1.5, 0.0), (1.5, 1.0), (3.0, 0.0), (3.0, 1.0)])
    def test_hard_statements_hold(self, audit_spec, lemma_id, p, mu):
        audit = inequality_audit(lemma_id, audit_spec(p=p, mu=mu))
        assert audit.hard
        assert not audit.violated, audit.witness
        assert audit.samples == 200

    @pytest.mark.parametrize("gamma", [-0.25, 0.5])
    def test_weight_ratio_across_exponents(self, audit_spec, gamma):
        audit = inequality_audit("integral_weight_ratio", audit_spec(p=1.5, mu=0.1, gamma=gamma))
        assert not audit.violated
        assert audit.bound_hi == (1.0 if gamma >= 0 else 16.0)

    def test_blowup_convergence_at_positive_shift(self, audit_spec):
        audit = inequality_audit("blowup_convergence", audit_spec(p=3.0, mu=1.0))
        assert not audit.violated
        assert len(audit.witness["sup_gaps"]) == 10
        assert audit.witness["monotone"]

    def test_blowup_gap_must_shrink_at_every_step(self, audit_spec, monkeypatch):
        gaps = [1.0, 0.1, 0.9, 0.05, 0.8, 0.01, 0.7, 0.001, 0.6, 0.5]

        def zigzag(xi, bp, params, C):
            step = round(-np.log2(bp.scale)) - 1
            return blowup_limit(xi, bp, params, C) + gaps[step]

        monkeypatch.setattr("utils.audits.blowup_integrand", zigzag)
        audit = inequality_audit("blowup_convergence", audit_spec(p=3.0, mu=1.0, samples=20))
        assert audit.violated
        assert not audit.witness["monotone"]
        assert audit.witness["excess"] == pytest.approx(0.8)

    def test_zero_exponent_power_difference_is_one(self, audit_spec):
        audit = inequality_audit("monotone_power_difference", audit_spec(gamma=0.0))
        assert audit.empirical_lo == pytest.approx(1.0, rel=1e-12)
        assert audit.empirical_hi == pytest.approx(1.0, rel=1e-12)

    def test_ranged_statement_reports_without_bounds(self, audit_spec):
        audit = inequality_audit("v_quasi_triangle", audit_spec(p=1.5, mu=1.0))
        assert not audit.hard
        assert not audit.violated
        assert audit.bound_lo is None and audit.bound_hi is None
        assert audit.empirical_lo <= audit.empirical_hi

    def test_unknown_lemma(self, audit_spec):
        with pytest.raises(UnsupportedLemmaError):
            inequality_audit("not_a_lemma", audit_spec())

    def test_blowup_needs_positive_shift(self, audit_spec):
        with pytest.raises(DomainError):
            inequality_audit("blowup_sandwich", audit_spec(mu=0.0))

    def test_same_seed_same_audit(self, audit_spec):
        spec = audit_spec(p=1.5, mu=0.1, seed=7)
        assert inequality_audit("hessian_bounds", spec).model_dump() == inequality_audit(
            "hessian_bounds", spec
        ).model_dump()

    def test_registry_covers_every_statement(self):
        assert len(LEMMAS) == 22
        assert all(lemma.lemma_id == key for key, lemma in LEMMAS.items())

    @pytest.mark.slow
    def test_superquadratic_convexity_at_scale(self, audit_spec):
        audit = inequality_audit("v_convexity", audit_spec(p=3.0, mu=0.0, samples=100_000))
        assert not audit.violated


class TestAuditGrid:
    def test_zero_shift_points_are_skipped(self):
        records = audit_grid(["blowup_sandwich"], [3.0], [0.0, 1.0], [2], samples=20, seed=0)
        skipped, ran = records
        assert skipped.skipped is not None
        assert skipped.samples == 0
        assert np.isnan(skipped.empirical_lo) and np.isnan(skipped.empirical_hi)
        assert ran.skipped is None
        assert ran.samples == 20
        assert (ran.p, ran.mu, ran.dim) == (3.0, 1.0, 2)

    def test_grid_order_and_size(self):
        records = audit_grid(["v_sandwich", "hessian_bounds"], [1.5, 3.0], [0.0], [2, 3], samples=10, seed=1)
        assert len(records) == 8
        assert [r.lemma_id for r in records[:4]] == ["v_sandwich"] * 4
        assert [(r.dim, r.p) for r in records[:4]] == [(2, 1.5), (2, 3.0), (3, 1.5), (3, 3.0)]

    def test_unknown_lemma_fails_before_sampling(self):
        with pytest.raises(UnsupportedLemmaError):
            audit_grid(["v_sandwich", "nope"], [2.0], [0.0], [2], samples=10, seed=0)

    def test_stability_records_the_drift(self):
        (record,) = audit_grid(["v_sandwich"], [3.0], [1.0], [2], samples=50, seed=0, stability=True)
        assert record.stability_drift is not None
        assert record.stability_drift >= 0


class TestAuditStability:
    def test_second_run_doubles_the_samples(self, audit_spec):
        first, second, drift = audit_stability("v_power_bounds", audit_spec(samples=100))
        assert second.samples == 2 * first.samples
        assert drift >= 0
