import numpy as np
import pytest

from utils.assembly import apply_dirichlet
from utils.custom_types import FlagThresholds
from utils.errors import DecayFitError, DomainError
from utils.diagnostics import (
    caccioppoli_report,
    comparison_report,
    decay_exponent,
    excess,
    excess_decay_table,
    grad_v_field,
    integrability_curve,
    korn_ratio,
    linearization_experiment,
    mean_minimality_check,
    singular_flags,
)
from utils.mesh import Ball, DiscreteField, affine_field, ball_volume, interpolate
from utils.solver import minimize

A = np.array([[0.4, 0.1], [0.1, -0.3]])
SKEW = np.array([[0.0, 0.7], [-0.7, 0.0]])
ORIGIN = [0.0, 0.0]


def square(x):
    return np.stack([x[:, 0] ** 2, np.zeros(len(x))], axis=1)


def smooth(x):
    return np.stack([np.sin(x[:, 0]) * x[:, 1], 0.5 * x[:, 0] ** 2 + 0.2 * x[:, 1]], axis=1)


@pytest.fixture
def centered_mesh(mesh_factory):
    return mesh_factory(cells=128, lower=-1.0, upper=1.0)


@pytest.fixture
def coarse_mesh(mesh_factory):
    return mesh_factory(cells=32, lower=-1.0, upper=1.0)


class TestExcess:
    def test_square_excess_is_r_squared(self, centered_mesh, solution_factory):
        sol = solution_factory(interpolate(centered_mesh, square))
        assert excess(sol, Ball(ORIGIN, 0.5)) == pytest.approx(0.25, rel=0.02)

    def test_decay_table_ratios(self, centered_mesh, solution_factory):
        sol = solution_factory(interpolate(centered_mesh, square))
        table = excess_decay_table(sol, ORIGIN, r0=0.5, tau=0.5, levels=1)
        assert table.radii == [0.5, 0.25]
        assert len(table.excess) == 2
        assert table.ratios[0] == pytest.approx(0.25, rel=0.05)
        assert table.flagged == [False]

    def test_tau_out_of_range(self, coarse_mesh, solution_factory):
        sol = solution_factory(interpolate(coarse_mesh, square))
        with pytest.raises(DomainError):
            excess_decay_table(sol, ORIGIN, r0=0.5, tau=1.0, levels=1)

    def test_affine_field_has_no_excess(self, coarse_mesh, solution_factory, params_factory):
        sol = solution_factory(affine_field(coarse_mesh, A, shift=[1.0, 0.5]), params_factory(p=3.0, mu=0.5))
        assert excess(sol, Ball(ORIGIN, 0.5)) <= 1e-20

    def test_rigid_motions_do_not_change_the_excess(
        self, mesh_factory, field_factory, solution_factory, params_factory
    ):
        mesh = mesh_factory(cells=16)
        field = field_factory(mesh, seed=3)
        moved = DiscreteField(mesh, field.values + affine_field(mesh, SKEW, [2.0, -1.0]).values)
        params = params_factory(p=3.0, mu=1.0)
        ball = Ball([0.5, 0.5], 0.3)
        assert excess(solution_factory(moved, params), ball) == pytest.approx(
            excess(solution_factory(field, params), ball), rel=1e-10
        )

    @pytest.mark.slow
    def test_minimizer_with_smooth_data_decays_at_every_level(
        self, mesh_factory, params_factory, spec_factory
    ):
        mesh = mesh_factory(cells=64)
        spec = spec_factory(mesh, params_factory(p=3.0, mu=1.0), dirichlet=smooth)
        solution = minimize(spec, apply_dirichlet(DiscreteField.zeros(mesh), spec))
        assert solution.converged
        table = excess_decay_table(solution, [0.5, 0.5], r0=0.3, tau=0.5, levels=2, bound_constant=1.5)
        assert table.radii[-1] >= 4 * mesh.spacing.max()
        assert table.flagged == [False, False]


class TestDecayExponent:
    RADII = (0.25, 0.35, 0.5, 0.7)

    def test_square_mass_grows_like_rho_to_the_fourth(self, centered_mesh, solution_factory):
        fit = decay_exponent(solution_factory(interpolate(centered_mesh, square)), ORIGIN, self.RADII)
        assert fit.fitted_gamma == pytest.approx(4.0, rel=0.05)
        assert fit.radii == sorted(self.RADII)

    def test_affine_mass_grows_like_the_area(self, centered_mesh, solution_factory):
        fit = decay_exponent(solution_factory(affine_field(centered_mesh, A)), ORIGIN, self.RADII)
        assert fit.fitted_gamma == pytest.approx(2.0, rel=0.03)

    def test_needs_three_radii(self, coarse_mesh, solution_factory):
        with pytest.raises(DecayFitError):
            decay_exponent(solution_factory(interpolate(coarse_mesh, square)), ORIGIN, [0.3, 0.5])


class TestGradV:
    def test_square_has_constant_gradient(self, mesh_factory, solution_factory):
        mesh = mesh_factory(cells=16, lower=-1.0, upper=1.0)
        _, nodal = grad_v_field(solution_factory(interpolate(mesh, square)))
        h = mesh.spacing[0]
        deep = np.all(np.abs(mesh.nodes) < 1.0 - 2.5 * h, axis=1)
        np.testing.assert_allclose(nodal[deep], 2.0, atol=1e-9)

    def test_affine_field_is_flat(self, coarse_mesh, solution_factory):
        per_element, nodal = grad_v_field(solution_factory(affine_field(coarse_mesh, A)))
        assert np.abs(per_element).max() <= 1e-12
        assert np.abs(nodal).max() <= 1e-12

    def test_integrability_curve_at_zero_exponent_is_the_volume(self, coarse_mesh, solution_factory):
        ball = Ball(ORIGIN, 0.5)
        curve = integrability_curve(solution_factory(interpolate(coarse_mesh, square)), ball, [0.0, 2.0])
        assert curve.integrals[0] == pytest.approx(ball_volume(ball, coarse_mesh), rel=1e-12)
        assert curve.integrals[1] > 0


class TestCaccioppoli:
    def test_affine_quadratic_field_is_trivial(self, coarse_mesh, solution_factory):
        sol = solution_factory(affine_field(coarse_mesh, A))
        report = caccioppoli_report(sol, sol.spec, ORIGIN, 0.3, lam=1.0)
        assert report.branch == "super"
        assert report.lhs <= 1e-20
        assert report.empirical_c == 0.0
        assert report.by_product_ratio is None

    def test_subquadratic_terms(self, coarse_mesh, solution_factory, params_factory):
        g = interpolate(coarse_mesh, lambda x: 0.3 * np.ones_like(x))
        sol = solution_factory(
            interpolate(coarse_mesh, smooth), params_factory(p=1.5, mu=1.0, kappa=1.0), g=g
        )
        report = caccioppoli_report(sol, sol.spec, ORIGIN, 0.3, lam=0.0)
        assert report.branch == "sub"
        assert set(report.rhs_terms) == {"oscillation", "fidelity", "v_mass", "shift"}
        assert all(term >= 0 for term in report.rhs_terms.values())
        assert report.rhs_terms["shift"] == pytest.approx(0.3**2)
        assert report.by_product_ratio is not None
        assert np.isfinite(report.by_product_ratio)

    @pytest.mark.parametrize("lam", [0.5, 0.4], ids=["open-endpoint", "below-lambda0"])
    def test_superquadratic_lambda_range(self, coarse_mesh, solution_factory, params_factory, lam):
        sol = solution_factory(interpolate(coarse_mesh, smooth), params_factory(p=3.0))
        with pytest.raises(DomainError):
            caccioppoli_report(sol, sol.spec, ORIGIN, 0.3, lam=lam)

    def test_superquadratic_at_unit_lambda(self, coarse_mesh, solution_factory, params_factory):
        sol = solution_factory(interpolate(coarse_mesh, smooth), params_factory(p=3.0, kappa=1.0))
        report = caccioppoli_report(sol, sol.spec, ORIGIN, 0.3, lam=1.0)
        assert set(report.rhs_terms) == {"oscillation", "fidelity", "fidelity_gradient"}
        assert report.lhs > 0


class TestComparisonReport:
    def test_quadratic_reference_at_the_mean_is_the_excess(
        self, coarse_mesh, solution_factory, params_factory
    ):
        field = interpolate(coarse_mesh, lambda x: np.stack([x[:, 0] ** 2, x[:, 0] * x[:, 1]], axis=1))
        sol = solution_factory(field, params_factory(p=2.0, mu=1.0))
        ball = Ball(ORIGIN, 0.5)
        report = comparison_report(sol, sol.spec, ball)
        assert len(report.rhs1) == 1
        assert report.rhs1[0] == pytest.approx(report.excess_u * ball_volume(ball, coarse_mesh), rel=1e-10)
        assert report.gap2 >= -1e-10
        assert report.lhs2 >= 0

    def test_explicit_reference_matrices(self, coarse_mesh, solution_factory, params_factory):
        sol = solution_factory(interpolate(coarse_mesh, smooth), params_factory(p=3.0, mu=1.0))
        report = comparison_report(
            sol, sol.spec, Ball(ORIGIN, 0.5), xi_list=[np.zeros((2, 2)), A], include_mean_strain=False
        )
        assert len(report.lhs1) == 2
        assert report.xi_list[1] == A.tolist()

    def test_needs_positive_shift(self, coarse_mesh, solution_factory):
        sol = solution_factory(interpolate(coarse_mesh, smooth))
        with pytest.raises(DomainError):
            comparison_report(sol, sol.spec, Ball(ORIGIN, 0.5))

    def test_mean_minimality(self, mesh_factory, field_factory, solution_factory, params_factory):
        mesh = mesh_factory(cells=16)
        sol = solution_factory(field_factory(mesh, seed=5), params_factory(p=3.0, mu=0.5))
        around_mean, around_v_of_mean = mean_minimality_check(sol, Ball([0.5, 0.5], 0.3))
        assert around_mean <= around_v_of_mean + 1e-14

    @staticmethod
    def _oscillatory_report(mesh, params_factory, spec_factory):
        g = interpolate(mesh, lambda x: np.stack([np.sin(5 * x[:, 0]), x[:, 0] * x[:, 1]], axis=1))
        spec = spec_factory(mesh, params_factory(p=3.0, mu=1.0, kappa=5.0), g=g)
        solution = minimize(spec, DiscreteField.zeros(mesh))
        return comparison_report(solution, spec, Ball([0.5, 0.5], 0.3))

    def test_energy_gap_of_a_minimizer_is_nonnegative(self, mesh_factory, params_factory, spec_factory):
        report = self._oscillatory_report(mesh_factory(cells=16), params_factory, spec_factory)
        assert report.gap2 >= -1e-10
        assert report.lhs2 > 0

    @pytest.mark.slow
    def test_distance_to_gap_ratio_is_stable_under_refinement(
        self, mesh_factory, params_factory, spec_factory
    ):
        coarse, fine = (
            self._oscillatory_report(mesh_factory(cells=cells), params_factory, spec_factory)
            for cells in (16, 32)
        )
        for report in (coarse, fine):
            assert report.gap2 > 0
            assert report.ratio2 == pytest.approx(report.lhs2 / report.gap2)
        assert abs(fine.ratio2 - coarse.ratio2) <= 0.1 * coarse.ratio2


class TestKornRatio:
    def test_zero_field(self, mesh_factory):
        assert korn_ratio(DiscreteField.zeros(mesh_factory(cells=4))) == 0.0

    def test_rotation_beats_a_stretch(self, mesh_factory):
        mesh = mesh_factory(cells=8)
        assert korn_ratio(affine_field(mesh, SKEW)) > korn_ratio(affine_field(mesh, np.eye(2)))


class TestSingularFlags:
    def test_kink_line_is_flagged(self, coarse_mesh, solution_factory):
        field = interpolate(coarse_mesh, lambda x: np.stack([np.maximum(x[:, 0], 0.0), 0 * x[:, 0]], axis=1))
        flags = singular_flags(solution_factory(field), thresholds=FlagThresholds(oscillation=0.19))
        h = coarse_mesh.spacing[0]
        evaluated = np.all(np.abs(coarse_mesh.nodes) < 0.5 - 1e-12, axis=1)
        assert flags.radii_sweep == [8 * h, 4 * h]
        np.testing.assert_array_equal(flags.evaluated, evaluated)
        expected = evaluated & (np.abs(coarse_mesh.nodes[:, 0]) <= h + 1e-12)
        np.testing.assert_array_equal(flags.sigma1, expected)

    def test_infinite_thresholds_flag_nothing(self, coarse_mesh, solution_factory):
        field = interpolate(coarse_mesh, lambda x: np.stack([np.maximum(x[:, 0], 0.0), 0 * x[:, 0]], axis=1))
        inf = float("inf")
        thresholds = FlagThresholds(oscillation=inf, divergence=inf, u_oscillation=inf)
        flags = singular_flags(solution_factory(field), thresholds=thresholds)
        assert flags.counts() == {"sigma1": 0, "sigma2": 0, "sigma3": 0, "sigma4": 0}

    def test_affine_field_is_regular(self, mesh_factory, solution_factory):
        mesh = mesh_factory(cells=32)
        flags = singular_flags(solution_factory(affine_field(mesh, A, shift=[0.5, 0.5])))
        assert flags.counts() == {"sigma1": 0, "sigma2": 0, "sigma3": 0, "sigma4": 0}

    def test_smooth_oscillation_decays(self, mesh_factory, solution_factory):
        mesh = mesh_factory(cells=24, lower=-1.0, upper=1.0)
        field = interpolate(
            mesh, lambda x: np.stack([x[:, 0] ** 2 - x[:, 1] ** 2, -2 * x[:, 0] * x[:, 1]], axis=1)
        )
        assert singular_flags(solution_factory(field)).counts()["sigma1"] == 0

    def test_quadratic_minimizer_has_no_oscillation_set(self, mesh_factory, params_factory, spec_factory):
        mesh = mesh_factory(cells=24, lower=-1.0, upper=1.0)
        spec = spec_factory(
            mesh,
            params_factory(p=2.0),
            dirichlet=lambda x: np.stack([x[:, 0] ** 2 - x[:, 1] ** 2, -2 * x[:, 0] * x[:, 1]], axis=1),
        )
        solution = minimize(spec, apply_dirichlet(DiscreteField.zeros(mesh), spec))
        assert solution.converged
        assert singular_flags(solution).counts()["sigma1"] == 0


class TestLinearization:
    @pytest.fixture
    def mesh(self, mesh_factory):
        return mesh_factory(cells=8)

    def test_quadratic_energy_is_already_linear(self, mesh, params_factory, spec_factory):
        spec = spec_factory(mesh, params_factory(p=2.0, mu=1.0))
        perturbation = interpolate(mesh, lambda x: np.stack([x[:, 0] * x[:, 1], np.sin(x[:, 0])], axis=1))
        report = linearization_experiment(A, perturbation, [0.5, 0.25], spec)
        assert max(report.rescaled_error) <= 1e-10
        assert report.linear_residual <= 1e-10

    def test_affine_perturbation_is_exact(self, mesh, params_factory, spec_factory):
        spec = spec_factory(mesh, params_factory(p=3.0, mu=1.0))
        perturbation = affine_field(mesh, np.array([[0.2, 0.05], [0.05, 0.1]]))
        report = linearization_experiment(A, perturbation, [0.5, 0.25, 0.125], spec)
        assert report.lambda_sequence == [0.5, 0.25, 0.125]
        assert max(report.rescaled_error) <= 1e-12

    @pytest.mark.parametrize(
        ("mu", "kappa", "lams"),
        [(0.0, 0.0, [0.5, 0.25]), (1.0, 1.0, [0.5, 0.25]), (1.0, 0.0, [0.25, 0.5])],
        ids=["no-shift", "fidelity", "increasing"],
    )
    def test_rejected_setups(self, mesh, params_factory, spec_factory, mu, kappa, lams):
        spec = spec_factory(mesh, params_factory(p=3.0, mu=mu, kappa=kappa))
        with pytest.raises(DomainError):
            linearization_experiment(A, DiscreteField.zeros(mesh), lams, spec)

    def test_rescaled_error_decays_with_lambda(self, mesh, params_factory, spec_factory):
        spec = spec_factory(mesh, params_factory(p=3.0, mu=1.0))
        bump = np.exp(-((mesh.nodes[:, 0] - 0.5) ** 2 + mesh.nodes[:, 1] ** 2) / 0.1)
        perturbation = DiscreteField(mesh, 0.5 * np.stack([bump, 0.5 * bump], axis=1))
        lams = [0.5, 0.25, 0.125, 0.0625]
        report = linearization_experiment(np.diag([1.0, 0.0]), perturbation, lams, spec)
        errors = report.rescaled_error
        assert report.monotone
        assert all(b < a for a, b in zip(errors, errors[1:], strict=False))
        assert errors[-1] / errors[0] <= 0.25
        assert errors[-1] > 0
