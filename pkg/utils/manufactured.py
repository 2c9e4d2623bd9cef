"""Manufactured problems: fidelity data reverse-engineered from a chosen exact minimizer."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from utils.assembly import ProblemSpec, make_problem
from utils.constants import MANUFACTURED_FD_STEP
from utils.custom_types import GrowthParams
from utils.errors import DomainError
from utils.expressions import VectorExpression
from utils.mesh import DiscreteField, Mesh
from utils.tensors import ElasticTensor, shifted_power, stress

FloatArray = NDArray[np.float64]
PointMap = Callable[[FloatArray], FloatArray]


def _central_jacobian(func: PointMap, points: FloatArray, step: float) -> FloatArray:
    """Fourth-order central differences; returns d func / d x_j stacked on the last axis."""
    partials = []
    for j in range(points.shape[1]):
        shift = np.zeros(points.shape[1])
        shift[j] = step
        partials.append(
            (
                -func(points + 2 * shift)
                + 8 * func(points + shift)
                - 8 * func(points - shift)
                + func(points - 2 * shift)
            )
            / (12 * step)
        )
    return np.stack(partials, axis=-1)


def stress_divergence(
    points: ArrayLike,
    strain: PointMap,
    params: GrowthParams,
    C: ElasticTensor,
    step: float,
) -> FloatArray:
    """div grad f_mu(e(u*)) at the points, by fourth-order differences of the stress."""
    pts = np.asarray(points, dtype=float)

    def sigma(x: FloatArray) -> FloatArray:
        return stress(strain(x), params, C)

    # (N, n, n, n): d sigma_ij / d x_k; the divergence contracts j with k
    grad = _central_jacobian(sigma, pts, step)
    return np.einsum("kijj->ki", grad)


def invert_fidelity(v: ArrayLike, params: GrowthParams) -> FloatArray:
    """Solve kappa p |w|^{p-2} w = v pointwise: w = |z|^{(2-p)/(p-1)} z with z = v / (kappa p).

    Where v vanishes w is 0; for p < 2 such points are reported with a warning.
    """
    if params.kappa <= 0:
        raise DomainError("Fidelity inversion needs kappa > 0")
    p = params.p
    z = np.asarray(v, dtype=float) / (params.kappa * p)
    norm_sq = np.sum(z**2, axis=-1)
    degenerate = norm_sq == 0
    if p < 2 and np.any(degenerate):
        logger.warning(f"Fidelity inversion degenerate at {int(degenerate.sum())} points; using w = 0")
    return shifted_power(norm_sq, 0.5 * (2.0 - p) / (p - 1.0))[..., None] * z


def manufactured_problem(
    u_star: VectorExpression | PointMap,
    params: GrowthParams,
    C: ElasticTensor,
    mesh: Mesh,
    strain: PointMap | None = None,
    quadrature_order: int = 2,
) -> ProblemSpec:
    """Problem whose continuous minimizer is u_star.

    The datum g = u* - w makes the Euler-Lagrange system hold exactly, with
    w from invert_fidelity applied to div grad f_mu(e(u*)). The strain of u*
    comes from strain, else symbolically from a VectorExpression, else from
    finite differences of u_star itself.

    Raises:
        DomainError: kappa == 0 or the dimensions disagree.
    """
    if params.kappa <= 0:
        raise DomainError("A manufactured problem needs kappa > 0")
    if params.dim != mesh.dim:
        raise DomainError(f"params.dim={params.dim} but mesh dim is {mesh.dim}")
    step = float(mesh.spacing.min()) * MANUFACTURED_FD_STEP
    if strain is None:
        if isinstance(u_star, VectorExpression):
            strain = u_star.strain
        else:
            target = u_star

            def fd_strain(x: FloatArray) -> FloatArray:
                jac = _central_jacobian(target, x, step)
                return 0.5 * (jac + np.swapaxes(jac, -1, -2))

            strain = fd_strain

    v = stress_divergence(mesh.nodes, strain, params, C, step)
    w = invert_fidelity(v, params)
    exact = np.asarray(u_star(mesh.nodes), dtype=float)
    g = DiscreteField(mesh, exact - w)
    logger.debug(f"Manufactured datum: max |u* - g| = {float(np.abs(w).max()):.4e}")
    return make_problem(
        mesh,
        params,
        C,
        g=g,
        dirichlet=u_star,
        quadrature_order=quadrature_order,
    )
