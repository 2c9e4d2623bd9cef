"""Energy, gradient and Hessian of the discrete p-growth functional.

F(u) = sum_e |e| f(e(u)|_e) + kappa int |u - g|^p [+ (1/2L) jump penalty]
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

from utils.custom_types import GrowthParams
from utils.errors import DomainError, MeshMismatchError, UndefinedHessianError
from utils.mesh import (
    DiscreteField,
    Mesh,
    element_strains,
    quadrature,
)
from utils.tensors import (
    ElasticTensor,
    energy_density,
    shifted_power,
    stress,
    tangent,
)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

# |u - g| floor inside the fidelity Hessian for p < 2
FIDELITY_HESSIAN_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Discrete minimization problem.

    Attributes:
        mesh: The mesh every field lives on.
        params: Growth exponent, shift and fidelity weight.
        C: Elastic tensor.
        g: Fidelity datum.
        fixed_nodes: Nodes whose values are prescribed; the box boundary by default.
        dirichlet_values: Prescribed values at fixed_nodes, shape (len(fixed_nodes), dim).
        penalty_level: L of the jump-penalized functional, None for the plain one.
        quadrature_order: Degree of the simplex quadrature for the fidelity term.
    """

    mesh: Mesh
    params: GrowthParams
    C: ElasticTensor
    g: DiscreteField
    fixed_nodes: IntArray
    dirichlet_values: FloatArray
    penalty_level: float | None = None
    quadrature_order: int = 2
    free_dofs: IntArray = field(init=False, repr=False)
    fixed_dofs: IntArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mesh = self.mesh
        if self.params.dim != mesh.dim or self.C.dim != mesh.dim:
            raise MeshMismatchError(
                f"Params dim {self.params.dim} / tensor dim {self.C.dim} vs mesh dim {mesh.dim}"
            )
        if self.g.mesh is not mesh:
            raise MeshMismatchError("Fidelity datum lives on another mesh")
        if self.quadrature_order < 2:
            raise DomainError(f"quadrature_order must be >= 2, got {self.quadrature_order}")
        if self.penalty_level is not None and not self.penalty_level > 0:
            raise DomainError(f"L must be positive, got {self.penalty_level}")
        nodes = np.asarray(self.fixed_nodes, dtype=np.int64).reshape(-1)
        values = np.asarray(self.dirichlet_values, dtype=float).reshape(-1, mesh.dim)
        if values.shape[0] != nodes.size or np.unique(nodes).size != nodes.size:
            raise MeshMismatchError("One Dirichlet value per distinct fixed node is required")
        order = np.argsort(nodes, kind="stable")
        fixed = nodes[order]
        object.__setattr__(self, "fixed_nodes", fixed)
        object.__setattr__(self, "dirichlet_values", values[order])
        mask = np.zeros((mesh.num_nodes, mesh.dim), dtype=bool)
        mask[fixed] = True
        flat = mask.reshape(-1)
        object.__setattr__(self, "fixed_dofs", np.flatnonzero(flat))
        object.__setattr__(self, "free_dofs", np.flatnonzero(~flat))

    def with_penalty(self, level: float | None) -> ProblemSpec:
        """Same problem with the jump penalty at level L (None or inf switches it off)."""
        if level is not None and np.isinf(level):
            level = None
        return replace(self, penalty_level=level)


def make_problem(
    mesh: Mesh,
    params: GrowthParams,
    C: ElasticTensor | None = None,
    g: DiscreteField | None = None,
    dirichlet: Callable[[FloatArray], ArrayLike] | DiscreteField | None = None,
    penalty_level: float | None = None,
    quadrature_order: int = 2,
) -> ProblemSpec:
    """Problem on the box with Dirichlet data on the whole boundary.

    dirichlet may be a function of the node coordinates or a field whose
    boundary values are used; None clamps the boundary to zero.
    """
    boundary = mesh.boundary_nodes
    if dirichlet is None:
        values = np.zeros((boundary.size, mesh.dim))
    elif isinstance(dirichlet, DiscreteField):
        values = dirichlet.values[boundary]
    else:
        values = np.asarray(dirichlet(mesh.nodes[boundary]), dtype=float)
    return ProblemSpec(
        mesh=mesh,
        params=params,
        C=C if C is not None else ElasticTensor.identity(mesh.dim),
        g=g if g is not None else DiscreteField.zeros(mesh),
        fixed_nodes=boundary,
        dirichlet_values=values,
        penalty_level=penalty_level,
        quadrature_order=quadrature_order,
    )


def apply_dirichlet(field: DiscreteField, spec: ProblemSpec) -> DiscreteField:
    _check_mesh(field, spec)
    out = field.copy()
    out.values[spec.fixed_nodes] = spec.dirichlet_values
    return out


def satisfies_dirichlet(field: DiscreteField, spec: ProblemSpec, atol: float = 1e-12) -> bool:
    return bool(np.allclose(field.values[spec.fixed_nodes], spec.dirichlet_values, atol=atol, rtol=0))


def _check_mesh(field: DiscreteField, spec: ProblemSpec) -> None:
    if field.mesh is not spec.mesh:
        raise MeshMismatchError


def _fidelity_residual(field: DiscreteField, spec: ProblemSpec) -> tuple[FloatArray, FloatArray]:
    quad = quadrature(spec.mesh, spec.quadrature_order)
    diff = DiscreteField(spec.mesh, field.values - spec.g.values)
    return quad.field_values(diff), quad.weights


def energy_terms(field: DiscreteField, spec: ProblemSpec) -> dict[str, float]:
    """Elastic, fidelity and penalty contributions of the discrete energy."""
    _check_mesh(field, spec)
    mesh = spec.mesh
    strains = element_strains(field)
    elastic = float(np.dot(mesh.volumes, energy_density(strains, spec.params, spec.C)))
    fidelity = 0.0
    if spec.params.kappa > 0:
        d, w = _fidelity_residual(field, spec)
        norm_p = shifted_power(np.einsum("eqi,eqi->eq", d, d), 0.5 * spec.params.p)
        fidelity = spec.params.kappa * float(np.sum(w * norm_p))
    penalty = 0.0
    if spec.penalty_level is not None:
        u = field.dofs
        penalty = float(u @ (mesh.jump_penalty @ u)) / (2.0 * spec.penalty_level)
    return {"elastic": elastic, "fidelity": fidelity, "penalty": penalty}


def assemble_energy(field: DiscreteField, spec: ProblemSpec) -> float:
    terms = energy_terms(field, spec)
    return terms["elastic"] + terms["fidelity"] + terms["penalty"]


def element_energy(field: DiscreteField, spec: ProblemSpec) -> FloatArray:
    """Elastic energy per element, |e| f(e(u)) (no fidelity or penalty)."""
    _check_mesh(field, spec)
    return spec.mesh.volumes * energy_density(element_strains(field), spec.params, spec.C)


def _scatter(mesh: Mesh, local: FloatArray) -> FloatArray:
    """Sum per-element nodal contributions (E, dim + 1, dim) into a dof vector."""
    dofs = mesh.elements[:, :, None] * mesh.dim + np.arange(mesh.dim)
    return np.bincount(dofs.reshape(-1), weights=local.reshape(-1), minlength=mesh.num_dofs)


def assemble_gradient(field: DiscreteField, spec: ProblemSpec) -> FloatArray:
    """Full dof gradient of assemble_energy, constrained dofs included.

    Use split_gradient to separate the free part from the reaction channel.
    """
    _check_mesh(field, spec)
    mesh = spec.mesh
    sigma = stress(element_strains(field), spec.params, spec.C)
    local = np.einsum("e,eij,eaj->eai", mesh.volumes, sigma, mesh.shape_gradients)
    grad = _scatter(mesh, local)
    if spec.params.kappa > 0:
        p = spec.params.p
        d, w = _fidelity_residual(field, spec)
        factor = shifted_power(np.einsum("eqi,eqi->eq", d, d), 0.5 * (p - 2.0))
        quad = quadrature(mesh, spec.quadrature_order)
        local = spec.params.kappa * p * np.einsum(
            "eq,eq,eqi,qa->eai", w, factor, d, quad.bary
        )
        grad += _scatter(mesh, local)
    if spec.penalty_level is not None:
        grad += (mesh.jump_penalty @ field.dofs) / spec.penalty_level
    return grad


def split_gradient(grad: FloatArray, spec: ProblemSpec) -> tuple[FloatArray, FloatArray]:
    """Free-dof gradient (fixed entries zeroed) and the reactions at fixed dofs."""
    free = grad.copy()
    free[spec.fixed_dofs] = 0.0
    return free, grad[spec.fixed_dofs].copy()


def free_gradient_norm(field: DiscreteField, spec: ProblemSpec) -> float:
    return float(np.linalg.norm(assemble_gradient(field, spec)[spec.free_dofs]))


def element_stiffness(mesh: Mesh, tangents: FloatArray) -> sparse.csr_matrix:
    """Assemble sum_e |e| <T_e grad phi_a, grad phi_b> for per-element tensors (E, n, n, n, n)."""
    d = mesh.dim
    local = np.einsum(
        "e,eikjl,eak,ebl->eaibj",
        mesh.volumes,
        np.broadcast_to(tangents, (mesh.num_elements, d, d, d, d)),
        mesh.shape_gradients,
        mesh.shape_gradients,
    )
    dofs = (mesh.elements[:, :, None] * d + np.arange(d)).reshape(mesh.num_elements, -1)
    m = dofs.shape[1]
    rows = np.repeat(dofs, m, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, m)).reshape(-1)
    return sparse.coo_matrix(
        (local.reshape(-1), (rows, cols)), shape=(mesh.num_dofs, mesh.num_dofs)
    ).tocsr()


def assemble_hessian(field: DiscreteField, spec: ProblemSpec) -> sparse.csr_matrix:
    """Sparse symmetric Hessian of assemble_energy over all dofs.

    Raises:
        UndefinedHessianError: p < 2, mu = 0, some element strain is zero and no
            penalty level is set.
    """
    _check_mesh(field, spec)
    mesh = spec.mesh
    p = spec.params.p
    strains = element_strains(field)
    try:
        tangents = tangent(
            strains, spec.params, spec.C, zero_degenerate=spec.penalty_level is not None
        )
    except UndefinedHessianError:
        raise UndefinedHessianError(
            "Hessian undefined: an element has zero strain with p < 2, mu = 0 and no L set"
        ) from None
    hess = element_stiffness(mesh, tangents)
    if spec.params.kappa > 0:
        d, w = _fidelity_residual(field, spec)
        norm_sq = np.einsum("eqi,eqi->eq", d, d)
        if p < 2:
            norm_sq = np.maximum(norm_sq, FIDELITY_HESSIAN_FLOOR**2)
        lead = shifted_power(norm_sq, 0.5 * (p - 2.0))
        outer = np.einsum("eqi,eqj->eqij", d, d) / np.where(norm_sq > 0, norm_sq, 1.0)[
            ..., None, None
        ]
        block = spec.params.kappa * p * lead[..., None, None] * (
            np.eye(mesh.dim) + (p - 2.0) * outer
        )
        quad = quadrature(mesh, spec.quadrature_order)
        local = np.einsum("eq,eqij,qa,qb->eaibj", w, block, quad.bary, quad.bary)
        dofs = (mesh.elements[:, :, None] * mesh.dim + np.arange(mesh.dim)).reshape(
            mesh.num_elements, -1
        )
        m = dofs.shape[1]
        hess = hess + sparse.coo_matrix(
            (
                local.reshape(-1),
                (np.repeat(dofs, m, axis=1).reshape(-1), np.tile(dofs, (1, m)).reshape(-1)),
            ),
            shape=(mesh.num_dofs, mesh.num_dofs),
        ).tocsr()
    if spec.penalty_level is not None:
        hess = hess + mesh.jump_penalty / spec.penalty_level
    return hess.tocsr()
