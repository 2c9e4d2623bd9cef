import numpy as np
import pytest

from utils.assembly import (
    FIDELITY_HESSIAN_FLOOR,
    apply_dirichlet,
    assemble_energy,
    assemble_gradient,
    assemble_hessian,
    element_energy,
    energy_terms,
    free_gradient_norm,
    satisfies_dirichlet,
    split_gradient,
)
from utils.errors import DomainError, MeshMismatchError, UndefinedHessianError
from utils.mesh import DiscreteField, affine_field, interpolate
from utils.tensors import ElasticTensor

SKEW = np.array([[0.0, 0.8], [-0.8, 0.0]])

DERIVATIVE_CASES = [
    (1.5, 0.0, 0.0, None),
    (1.5, 1.0, 2.0, None),
    (2.0, 0.0, 1.0, None),
    (3.0, 0.0, 0.0, None),
    (3.0, 1.0, 2.0, 10.0),
    (4.0, 0.5, 1.0, None),
]
DERIVATIVE_IDS = ["sub-plain", "sub-shifted-fidelity", "quadratic", "super-plain", "super-penalized", "quartic"]


def oscillating_datum(mesh):
    return interpolate(mesh, lambda x: np.stack([np.sin(3 * x[:, 0]), np.cos(2 * x[:, 1])], axis=1))


@pytest.fixture
def spec_for(mesh_factory, params_factory, spec_factory):
    def factory(p, mu, kappa, level, cells=4):
        mesh = mesh_factory(cells=cells)
        return spec_factory(
            mesh,
            params_factory(p=p, mu=mu, kappa=kappa),
            ElasticTensor.isotropic(2, lame=0.6, shear=0.5),
            g=oscillating_datum(mesh),
            penalty_level=level,
        )

    return factory


class TestEnergy:
    def test_rigid_field_at_the_datum_has_zero_energy(self, mesh_factory, params_factory, spec_factory):
        mesh = mesh_factory(cells=4)
        rigid = affine_field(mesh, SKEW, shift=[0.2, -0.1])
        spec = spec_factory(mesh, params_factory(p=3.0, mu=1.0, kappa=5.0), g=rigid)
        assert assemble_energy(rigid, spec) == pytest.approx(0.0, abs=1e-14)

    def test_affine_quadratic_energy(self, mesh_factory, params_factory, spec_factory):
        mesh = mesh_factory(cells=5, lower=-1.0, upper=1.0)
        a = np.array([[0.4, 0.3], [0.3, -0.2]])
        spec = spec_factory(mesh, params_factory(p=2.0))
        expected = 0.5 * np.sum(a**2) * mesh.box_volume
        assert assemble_energy(affine_field(mesh, a), spec) == pytest.approx(expected, rel=1e-12)

    def test_terms_add_up(self, spec_for, field_factory):
        spec = spec_for(3.0, 1.0, 2.0, 10.0)
        field = field_factory(spec.mesh, seed=1)
        terms = energy_terms(field, spec)
        assert set(terms) == {"elastic", "fidelity", "penalty"}
        assert assemble_energy(field, spec) == pytest.approx(sum(terms.values()))

    def test_elastic_term_is_the_element_sum(self, spec_for, field_factory):
        spec = spec_for(1.5, 0.0, 0.0, None)
        field = field_factory(spec.mesh, seed=2)
        assert energy_terms(field, spec)["elastic"] == pytest.approx(element_energy(field, spec).sum())

    def test_quadratic_fidelity_is_exact_at_low_order(
        self, mesh_factory, params_factory, spec_factory, field_factory
    ):
        mesh = mesh_factory(cells=3)
        params = params_factory(p=2.0, kappa=1.5)
        field = field_factory(mesh, seed=4)
        low = energy_terms(field, spec_factory(mesh, params, quadrature_order=2))["fidelity"]
        high = energy_terms(field, spec_factory(mesh, params, quadrature_order=6))["fidelity"]
        assert low == pytest.approx(high, rel=1e-12)

    def test_penalty_never_lowers_the_energy(self, spec_for, field_factory):
        spec = spec_for(1.5, 0.0, 1.0, None)
        field = field_factory(spec.mesh, seed=5)
        penalized = spec.with_penalty(1.0)
        assert assemble_energy(field, penalized) >= assemble_energy(field, spec)
        rigid = affine_field(spec.mesh, SKEW)
        assert energy_terms(rigid, penalized)["penalty"] == pytest.approx(0.0, abs=1e-20)

    def test_elastic_energy_ignores_rigid_motions(self, spec_for, field_factory):
        spec = spec_for(3.0, 1.0, 0.0, None)
        field = field_factory(spec.mesh, seed=6)
        moved = DiscreteField(spec.mesh, field.values + affine_field(spec.mesh, SKEW, [1.0, -2.0]).values)
        assert energy_terms(moved, spec)["elastic"] == pytest.approx(
            energy_terms(field, spec)["elastic"], rel=1e-12
        )

    def test_field_from_another_mesh(self, spec_for, mesh_factory):
        spec = spec_for(2.0, 0.0, 0.0, None)
        with pytest.raises(MeshMismatchError):
            assemble_energy(DiscreteField.zeros(mesh_factory(cells=4)), spec)


class TestDerivatives:
    @pytest.mark.parametrize(("p", "mu", "kappa", "level"), DERIVATIVE_CASES, ids=DERIVATIVE_IDS)
    def test_gradient_matches_energy_differences(self, spec_for, field_factory, p, mu, kappa, level):
        spec = spec_for(p, mu, kappa, level)
        # offset keeps u - g away from zero, where the p < 2 fidelity is not smooth
        field = field_factory(spec.mesh, seed=7, offset=3.0)
        direction = np.random.default_rng(8).standard_normal(spec.mesh.num_dofs)
        step = 1e-5
        plus = assemble_energy(field.with_dofs(field.dofs + step * direction), spec)
        minus = assemble_energy(field.with_dofs(field.dofs - step * direction), spec)
        fd = (plus - minus) / (2 * step)
        assert assemble_gradient(field, spec) @ direction == pytest.approx(fd, rel=1e-5, abs=1e-8)

    @pytest.mark.parametrize(("p", "mu", "kappa", "level"), DERIVATIVE_CASES, ids=DERIVATIVE_IDS)
    def test_hessian_matches_gradient_differences(self, spec_for, field_factory, p, mu, kappa, level):
        spec = spec_for(p, mu, kappa, level)
        field = field_factory(spec.mesh, seed=9, offset=3.0)
        direction = np.random.default_rng(10).standard_normal(spec.mesh.num_dofs)
        step = 1e-6
        plus = assemble_gradient(field.with_dofs(field.dofs + step * direction), spec)
        minus = assemble_gradient(field.with_dofs(field.dofs - step * direction), spec)
        fd = (plus - minus) / (2 * step)
        action = assemble_hessian(field, spec) @ direction
        assert np.linalg.norm(action - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_hessian_is_symmetric(self, spec_for, field_factory):
        spec = spec_for(3.0, 1.0, 2.0, 10.0)
        hess = assemble_hessian(field_factory(spec.mesh, seed=11), spec)
        assert abs(hess - hess.T).max() < 1e-12 * abs(hess).max()

    def test_quadratic_hessian_is_constant(self, spec_for, field_factory):
        spec = spec_for(2.0, 0.0, 0.0, None)
        first = assemble_hessian(field_factory(spec.mesh, seed=12), spec)
        second = assemble_hessian(field_factory(spec.mesh, seed=13), spec)
        assert abs(first - second).max() < 1e-12

    def test_rigid_motions_are_in_the_kernel(self, spec_for, field_factory):
        spec = spec_for(3.0, 1.0, 0.0, None)
        hess = assemble_hessian(field_factory(spec.mesh, seed=14), spec)
        rigid = affine_field(spec.mesh, SKEW, shift=[0.5, 0.25]).dofs
        assert np.linalg.norm(hess @ rigid) <= 1e-10 * abs(hess).max() * np.linalg.norm(rigid)

    def test_undefined_hessian_at_zero_strain(self, spec_for):
        spec = spec_for(1.5, 0.0, 0.0, None)
        with pytest.raises(UndefinedHessianError):
            assemble_hessian(DiscreteField.zeros(spec.mesh), spec)

    def test_penalty_level_makes_zero_strain_admissible(self, spec_for):
        spec = spec_for(1.5, 0.0, 0.0, 10.0)
        hess = assemble_hessian(DiscreteField.zeros(spec.mesh), spec)
        assert abs(hess - spec.mesh.jump_penalty / 10.0).max() < 1e-14

    def test_subquadratic_fidelity_curvature_is_capped_at_the_datum(self, spec_for):
        p, kappa = 1.5, 2.0
        spec = spec_for(p, 1.0, kappa, None)
        plain = spec_for(p, 1.0, 0.0, None)
        hess = assemble_hessian(DiscreteField(spec.mesh, spec.g.values.copy()), spec)
        elastic = assemble_hessian(DiscreteField(plain.mesh, plain.g.values.copy()), plain)
        fidelity = (hess - elastic).toarray()
        assert np.all(np.isfinite(fidelity))
        assert fidelity.min() >= 0.0
        expected = kappa * p * FIDELITY_HESSIAN_FLOOR ** (p - 2.0) * spec.mesh.dim * spec.mesh.box_volume
        assert fidelity.sum() == pytest.approx(expected, rel=1e-10)


class TestDirichlet:
    def test_apply_and_check(self, mesh_factory, spec_factory, field_factory):
        mesh = mesh_factory(cells=4)
        spec = spec_factory(mesh, dirichlet=lambda x: x @ SKEW.T + 1.0)
        field = apply_dirichlet(field_factory(mesh), spec)
        assert satisfies_dirichlet(field, spec)
        assert not satisfies_dirichlet(DiscreteField.zeros(mesh), spec)

    def test_dirichlet_from_a_field(self, mesh_factory, spec_factory):
        mesh = mesh_factory(cells=3)
        data = affine_field(mesh, np.eye(2))
        spec = spec_factory(mesh, dirichlet=data)
        np.testing.assert_array_equal(spec.dirichlet_values, data.values[mesh.boundary_nodes])

    def test_split_gradient(self, spec_for, field_factory):
        spec = spec_for(3.0, 1.0, 1.0, None)
        field = field_factory(spec.mesh, seed=15)
        grad = assemble_gradient(field, spec)
        free, reactions = split_gradient(grad, spec)
        assert np.all(free[spec.fixed_dofs] == 0)
        np.testing.assert_array_equal(free[spec.free_dofs], grad[spec.free_dofs])
        np.testing.assert_array_equal(reactions, grad[spec.fixed_dofs])
        assert free_gradient_norm(field, spec) == pytest.approx(np.linalg.norm(free))


class TestProblemSpec:
    def test_dimension_mismatch(self, mesh_factory, params_factory, spec_factory):
        with pytest.raises(MeshMismatchError):
            spec_factory(mesh_factory(cells=2), params_factory(dim=3))

    def test_quadrature_order_floor(self, mesh_factory, spec_factory):
        with pytest.raises(DomainError):
            spec_factory(mesh_factory(cells=2), quadrature_order=1)

    def test_non_positive_penalty_level(self, mesh_factory, spec_factory):
        with pytest.raises(DomainError):
            spec_factory(mesh_factory(cells=2), penalty_level=0.0)

    def test_infinite_level_switches_the_penalty_off(self, mesh_factory, spec_factory):
        spec = spec_factory(mesh_factory(cells=2), penalty_level=5.0)
        assert spec.with_penalty(float("inf")).penalty_level is None
