"""Regularity diagnostics evaluated on solved (or synthetic) fields."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from scipy import sparse, stats
from scipy.spatial import cKDTree

from utils.assembly import ProblemSpec
from utils.constants import (
    BALL_GUARD_SPACINGS,
    DIVERGENCE_THRESHOLD_FACTOR,
    EXCESS_FLOOR,
    OSCILLATION_THRESHOLD_FACTOR,
)
from utils.custom_types import (
    CaccioppoliReport,
    ComparisonReport,
    DecayFit,
    ExcessTable,
    FlagThresholds,
    GrowthParams,
    IntegrabilityCurve,
    LinearizationReport,
    SingularFlags,
    SolverOptions,
)
from utils.errors import (
    BallTooSmallError,
    DecayFitError,
    DomainError,
    MinimalityViolationError,
)
from utils.mesh import (
    Ball,
    DiscreteField,
    Mesh,
    affine_field,
    ball_integral,
    ball_mean,
    element_gradients,
    element_strains,
    quadrature,
)
from utils.solver import (
    Solution,
    linearized_residual,
    minimize,
    solve_autonomous_comparison,
    solve_linearized,
)
from utils.tensors import (
    ElasticTensor,
    energy_density,
    frob_sq,
    is_symmetric,
    lambda0,
    ptilde,
    shifted_power,
    tangent,
    v_norm_sq,
    v_transform,
)

FloatArray = NDArray[np.float64]

# gap2 below this counts as a failure of the discrete minimality of w
MINIMALITY_TOL = 1e-10


def _safe_ratio(num: float, den: float) -> float:
    if den <= EXCESS_FLOOR:
        return 0.0 if num <= EXCESS_FLOOR else float("inf")
    return num / den


def _ball(mesh: Mesh, center: ArrayLike, radius: float) -> Ball:
    ball = Ball(np.asarray(center, dtype=float), radius)
    mesh.check_ball(ball)
    return ball


def element_v(field: DiscreteField, params: GrowthParams) -> FloatArray:
    """V_mu of the strain on every element, shape (E, n, n)."""
    return v_transform(element_strains(field), params)


def field_excess(field: DiscreteField, params: GrowthParams, ball: Ball, order: int = 2) -> float:
    mesh = field.mesh
    strains = element_strains(field)
    mean = ball_mean(strains, ball, mesh, order)
    return float(ball_mean(v_norm_sq(strains - mean, params), ball, mesh, order))


def excess(sol: Solution, ball: Ball, order: int = 2) -> float:
    """Mean-square V-oscillation of the strain around its ball mean."""
    return field_excess(sol.field, sol.spec.params, ball, order)


def excess_decay_table(
    sol: Solution,
    center: ArrayLike,
    r0: float,
    tau: float,
    levels: int,
    bound_constant: float = 1.5,
) -> ExcessTable:
    """Excess on the radii r0 tau^k, k = 0..levels, with ratios flagged against C tau^2."""
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    mesh = sol.field.mesh
    radii = [r0 * tau**k for k in range(levels + 1)]
    strains = element_strains(sol.field)
    values = []
    means = []
    for radius in radii:
        ball = _ball(mesh, center, radius)
        values.append(excess(sol, ball))
        means.append(ball_mean(strains, ball, mesh).tolist())
    ratios = [_safe_ratio(b, a) for a, b in zip(values, values[1:], strict=False)]
    bound = bound_constant * tau**2
    flagged = [ratio > bound for ratio in ratios]
    if any(flagged):
        logger.info(f"Excess decay above {bound:.4g} at levels {[k for k, f in enumerate(flagged) if f]}")
    return ExcessTable(
        center=np.asarray(center, dtype=float).tolist(),
        radii=radii,
        excess=values,
        mean_strain=means,
        tau=tau,
        ratios=ratios,
        flagged=flagged,
        bound_constant=bound_constant,
    )


def decay_exponent(sol: Solution, center: ArrayLike, radii: Sequence[float]) -> DecayFit:
    """Least-squares slope of log int_{B_rho} |V|^2 against log rho."""
    if len(radii) < 3:
        raise DecayFitError
    mesh = sol.field.mesh
    order = np.argsort(radii)
    rho = np.asarray(radii, dtype=float)[order]
    v2 = v_norm_sq(element_strains(sol.field), sol.spec.params)
    mass = np.array([float(ball_integral(v2, _ball(mesh, center, r), mesh)) for r in rho])
    if np.any(mass <= 0):
        raise DecayFitError("V vanishes on some ball; the log-log fit is undefined")
    fit = stats.linregress(np.log(rho), np.log(mass))
    predicted = fit.intercept + fit.slope * np.log(rho)
    residual = float(np.sqrt(np.mean((np.log(mass) - predicted) ** 2)))
    return DecayFit(
        center=np.asarray(center, dtype=float).tolist(),
        radii=rho.tolist(),
        mass=mass.tolist(),
        fitted_gamma=float(fit.slope),
        intercept=float(fit.intercept),
        residual=residual,
    )


def recover_nodal(mesh: Mesh, per_element: ArrayLike) -> FloatArray:
    """Volume-weighted average of per-element values over each node's incident elements."""
    vals = np.asarray(per_element, dtype=float)
    flat = vals.reshape(mesh.num_elements, -1)
    weights = mesh.node_element_incidence @ sparse.diags(mesh.volumes)
    summed = weights @ flat
    total = np.asarray(weights.sum(axis=1)).reshape(-1, 1)
    return (summed / total).reshape(mesh.num_nodes, *vals.shape[1:])


def recovered_gradient(mesh: Mesh, per_element: ArrayLike) -> FloatArray:
    """Per-element gradient of the P1 field recovered from per-element values.

    Returns shape (E, k, dim) where k is the flattened value size.
    """
    nodal = recover_nodal(mesh, per_element).reshape(mesh.num_nodes, -1)
    return np.einsum("eak,eaj->ekj", nodal[mesh.elements], mesh.shape_gradients)


def grad_v_field(sol: Solution) -> tuple[FloatArray, FloatArray]:
    """|grad V_mu(e(u))| per element and lumped to nodes."""
    mesh = sol.field.mesh
    grad = recovered_gradient(mesh, element_v(sol.field, sol.spec.params))
    per_element = np.sqrt(np.sum(grad**2, axis=(1, 2)))
    return per_element, recover_nodal(mesh, per_element)


def caccioppoli_report(
    sol: Solution, spec: ProblemSpec, center: ArrayLike, r: float, lam: float
) -> CaccioppoliReport:
    """Evaluate both sides of the Caccioppoli inequality with unit constants.

    The p >= 2 branch needs lam in [lambda0, 1]; the p < 2 branch any lam >= 0.
    """
    mesh = spec.mesh
    params = spec.params
    p, mu, kappa = params.p, params.mu, params.kappa
    inner = _ball(mesh, center, r)
    outer = _ball(mesh, center, 2.0 * r)
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")

    u = sol.field
    v = element_v(u, params)
    grad_v = recovered_gradient(mesh, v)
    lhs = float(ball_integral(np.sum(grad_v**2, axis=(1, 2)), inner, mesh))
    v_mean = ball_mean(v, outer, mesh)
    oscillation = (1.0 + kappa) / r**2 * float(ball_integral(frob_sq(v - v_mean), outer, mesh))

    quad = quadrature(mesh, spec.quadrature_order)
    diff = DiscreteField(mesh, u.values - spec.g.values)
    diff_norm = np.sqrt(np.sum(quad.field_values(diff) ** 2, axis=-1))

    by_product = None
    if p >= 2:
        branch = "super"
        if lam < lambda0(params):
            raise DomainError(f"lambda={lam} below lambda0={lambda0(params):.6g}")
        q = ptilde(lam, params)
        scale = kappa * r ** (2.0 / (p - 1.0))
        grad_diff = np.sqrt(frob_sq(element_gradients(diff)))
        terms = {
            "oscillation": oscillation,
            "fidelity": scale * float(ball_integral(diff_norm**q, outer, mesh, spec.quadrature_order)),
            "fidelity_gradient": scale * float(ball_integral(grad_diff ** (lam * p), outer, mesh)),
        }
    else:
        branch = "sub"
        weight = kappa / r ** (2.0 * lam * p / (2.0 - p))
        terms = {
            "oscillation": oscillation,
            "fidelity": kappa
            * r ** (lam * p / (p - 1.0))
            * float(ball_integral(diff_norm**p, outer, mesh, spec.quadrature_order)),
            "v_mass": weight * float(ball_integral(frob_sq(v), outer, mesh)),
            "shift": weight * mu ** (0.5 * p) * r**mesh.dim,
        }
        strains = element_strains(u)
        grad_e = recovered_gradient(mesh, strains)
        numerator = float(ball_integral(np.sum(grad_e**2, axis=(1, 2)) ** (0.5 * p), inner, mesh))
        energy = float(ball_integral(shifted_power(mu + frob_sq(strains), 0.5 * p), inner, mesh))
        denominator = lhs ** (0.5 * p) * energy ** (1.0 - 0.5 * p)
        by_product = _safe_ratio(numerator, denominator)

    total = sum(terms.values())
    report = CaccioppoliReport(
        center=np.asarray(center, dtype=float).tolist(),
        r=r,
        lam=lam,
        branch=branch,
        lhs=lhs,
        rhs_terms=terms,
        empirical_c=_safe_ratio(lhs, total),
        by_product_ratio=by_product,
    )
    logger.debug(f"Caccioppoli ({branch}) at r={r:g}: lhs={lhs:.4e} rhs={total:.4e}")
    return report


def autonomous_energy(field: DiscreteField, params: GrowthParams, C: ElasticTensor, ball: Ball) -> float:
    """F_0 restricted to the ball: int_B f_mu(e(v))."""
    return float(ball_integral(energy_density(element_strains(field), params, C), ball, field.mesh))


def comparison_report(
    sol: Solution,
    spec: ProblemSpec,
    ball: Ball,
    xi_list: Sequence[ArrayLike] = (),
    include_mean_strain: bool = True,
    opts: SolverOptions | None = None,
) -> ComparisonReport:
    """Compare u with the autonomous minimizer w sharing its values off the ball.

    Raises:
        DomainError: mu = 0.
        MinimalityViolationError: F_0(u) - F_0(w) < -1e-10.
    """
    params = spec.params
    if params.mu <= 0:
        raise DomainError("Energy comparison needs mu > 0")
    mesh = spec.mesh
    mesh.check_ball(ball)
    w = solve_autonomous_comparison(sol, ball, spec, opts)

    gap2 = autonomous_energy(sol.field, params, spec.C, ball) - autonomous_energy(w, params, spec.C, ball)
    if gap2 < -MINIMALITY_TOL:
        raise MinimalityViolationError(gap2)

    strains_u = element_strains(sol.field)
    strains_w = element_strains(w)
    v_u = v_transform(strains_u, params)
    v_w = v_transform(strains_w, params)
    mean_u = ball_mean(strains_u, ball, mesh)
    mean_w = ball_mean(strains_w, ball, mesh)

    references = [np.asarray(xi, dtype=float) for xi in xi_list]
    if include_mean_strain:
        references.append(mean_u)
    lhs1, rhs1 = [], []
    for xi in references:
        if not is_symmetric(xi):
            raise DomainError("Reference matrices must be symmetric")
        v_xi = v_transform(xi, params)
        lhs1.append(float(ball_integral(frob_sq(v_w - v_xi), ball, mesh)))
        rhs1.append(float(ball_integral(frob_sq(v_u - v_xi), ball, mesh)))

    lhs2 = float(ball_integral(frob_sq(v_u - v_w), ball, mesh))
    excess_u = field_excess(sol.field, params, ball)
    excess_w = field_excess(w, params, ball)
    drift = float(np.sqrt(frob_sq(mean_w - mean_u)) / max(np.sqrt(frob_sq(mean_u)), 1e-300))
    return ComparisonReport(
        center=ball.center.tolist(),
        radius=ball.radius,
        xi_list=[xi.tolist() for xi in references],
        lhs1=lhs1,
        rhs1=rhs1,
        ratio1=[_safe_ratio(a, b) for a, b in zip(lhs1, rhs1, strict=True)],
        lhs2=lhs2,
        gap2=gap2,
        ratio2=_safe_ratio(lhs2, max(gap2, 0.0)),
        excess_u=excess_u,
        excess_w=excess_w,
        excess_ratio=_safe_ratio(excess_w, excess_u),
        mean_strain_u=mean_u.tolist(),
        mean_strain_w=mean_w.tolist(),
        mean_strain_drift=drift,
    )


def mean_minimality_check(sol: Solution, ball: Ball) -> tuple[float, float]:
    """Ball averages of |V - (V)_B|^2 and |V - V((e)_B)|^2; the first never exceeds the second."""
    mesh = sol.field.mesh
    strains = element_strains(sol.field)
    v = v_transform(strains, sol.spec.params)
    around_mean = float(ball_mean(frob_sq(v - ball_mean(v, ball, mesh)), ball, mesh))
    v_of_mean = v_transform(ball_mean(strains, ball, mesh), sol.spec.params)
    around_v_of_mean = float(ball_mean(frob_sq(v - v_of_mean), ball, mesh))
    return around_mean, around_v_of_mean


def integrability_curve(sol: Solution, ball: Ball, exponents: Sequence[float]) -> IntegrabilityCurve:
    """s -> int_B |grad V|^s, reported without any assertion."""
    per_element, _ = grad_v_field(sol)
    mesh = sol.field.mesh
    integrals = [float(ball_integral(per_element**s, ball, mesh)) for s in exponents]
    return IntegrabilityCurve(
        center=ball.center.tolist(),
        radius=ball.radius,
        exponents=list(exponents),
        integrals=integrals,
    )


def korn_ratio(field: DiscreteField) -> float:
    """int |grad u|^2 / int (|e(u)|^2 + |u|^2) over the box."""
    mesh = field.mesh
    quad = quadrature(mesh)
    full = float(np.dot(mesh.volumes, frob_sq(element_gradients(field))))
    sym = float(np.dot(mesh.volumes, frob_sq(element_strains(field))))
    mass = float(np.sum(quad.weights * np.sum(quad.field_values(field) ** 2, axis=-1)))
    return _safe_ratio(full, sym + mass)


def _ball_weights(tree: cKDTree, centers: FloatArray, radius: float, weights: FloatArray) -> sparse.csr_matrix:
    """Rows of quadrature weights of the points inside each ball."""
    hits = tree.query_ball_point(centers, radius * (1 + 1e-12))
    lengths = np.array([len(h) for h in hits], dtype=np.int64)
    cols = np.concatenate([np.sort(np.asarray(h, dtype=np.int64)) for h in hits])
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    return sparse.csr_matrix((weights[cols], cols, indptr), shape=(len(hits), weights.size))


def _row_oscillation(matrix: sparse.csr_matrix, values: FloatArray, power: float) -> FloatArray:
    """Ball average of |values - ball mean|^power for every row."""
    volume = np.asarray(matrix.sum(axis=1)).reshape(-1)
    mean = (matrix @ values) / volume[:, None]
    rows = np.repeat(np.arange(matrix.shape[0]), np.diff(matrix.indptr))
    dev = np.sqrt(np.sum((values[matrix.indices] - mean[rows]) ** 2, axis=-1))
    return np.bincount(rows, weights=matrix.data * dev**power, minlength=matrix.shape[0]) / volume


def _row_mean_norm(matrix: sparse.csr_matrix, values: FloatArray) -> FloatArray:
    volume = np.asarray(matrix.sum(axis=1)).reshape(-1)
    return np.linalg.norm((matrix @ values) / volume[:, None], axis=1)


def singular_flags(
    sol: Solution,
    radii_sweep: Sequence[float] | None = None,
    thresholds: FlagThresholds | None = None,
) -> SingularFlags:
    """Discrete surrogates of the four singular sets over a shrinking radius sweep.

    The limits r -> 0 are replaced by the value at the smallest radius together
    with the trend along the sweep: oscillations must decay slower than linearly
    and diverging means must be non-decreasing as the radius shrinks.
    """
    field = sol.field
    mesh = field.mesh
    params = sol.spec.params
    thresholds = thresholds or FlagThresholds()
    h = float(mesh.spacing.max())
    sweep = sorted(radii_sweep or (8.0 * h, 4.0 * h), reverse=True)
    if sweep[-1] < BALL_GUARD_SPACINGS * h * (1 - 1e-12):
        raise BallTooSmallError(f"Sweep radius {sweep[-1]} below {BALL_GUARD_SPACINGS:g} mesh spacings")

    quad = quadrature(mesh)
    n_q = quad.bary.shape[0]
    points = quad.points.reshape(-1, mesh.dim)
    weights = quad.weights.reshape(-1)
    v = np.repeat(element_v(field, params).reshape(mesh.num_elements, -1), n_q, axis=0)
    grad = np.repeat(element_gradients(field).reshape(mesh.num_elements, -1), n_q, axis=0)
    u = quad.field_values(field).reshape(-1, mesh.dim)

    box = mesh.box_volume
    v_sq_avg = float(np.dot(weights, np.sum(v**2, axis=1))) / box
    u_mean = weights @ u / box
    u_osc_avg = float(np.dot(weights, np.linalg.norm(u - u_mean, axis=1) ** params.p)) / box
    resolved = {
        "oscillation": thresholds.oscillation
        if thresholds.oscillation is not None
        else OSCILLATION_THRESHOLD_FACTOR * v_sq_avg,
        "u_oscillation": thresholds.u_oscillation
        if thresholds.u_oscillation is not None
        else OSCILLATION_THRESHOLD_FACTOR * u_osc_avg,
    }
    averages = {
        "v": float(np.dot(weights, np.linalg.norm(v, axis=1))) / box,
        "u": float(np.dot(weights, np.linalg.norm(u, axis=1))) / box,
        "grad": float(np.dot(weights, np.linalg.norm(grad, axis=1))) / box,
    }
    for name, avg in averages.items():
        resolved[f"divergence_{name}"] = (
            thresholds.divergence
            if thresholds.divergence is not None
            else DIVERGENCE_THRESHOLD_FACTOR * avg
        )

    r_max = sweep[0]
    evaluated = np.all(
        (mesh.nodes - r_max > mesh.lower) & (mesh.nodes + r_max < mesh.upper), axis=1
    )
    centers = mesh.nodes[evaluated]
    n_nodes = mesh.num_nodes
    flags = {name: np.zeros(n_nodes, dtype=bool) for name in ("sigma1", "sigma2", "sigma3", "sigma4")}
    oscillation_min = np.zeros(n_nodes)
    if centers.size:
        tree = cKDTree(points)
        osc_v, osc_u, mean_v, mean_u, mean_grad = [], [], [], [], []
        for radius in sweep:
            matrix = _ball_weights(tree, centers, radius, weights)
            osc_v.append(_row_oscillation(matrix, v, 2.0))
            osc_u.append(_row_oscillation(matrix, u, params.p))
            mean_v.append(_row_mean_norm(matrix, v))
            mean_u.append(_row_mean_norm(matrix, u))
            mean_grad.append(_row_mean_norm(matrix, grad))
        slower_than_linear = sweep[-1] / sweep[0]

        def persistent(osc: list[FloatArray], threshold: float) -> NDArray[np.bool_]:
            last, first = osc[-1], osc[0]
            decay = np.divide(last, first, out=np.ones_like(last), where=first > 0)
            return (last > threshold) & (decay >= slower_than_linear)

        def diverging(means: list[FloatArray], threshold: float) -> NDArray[np.bool_]:
            stacked = np.stack(means)
            growing = np.all(np.diff(stacked, axis=0) >= 0, axis=0)
            return (stacked[-1] > threshold) & growing

        flags["sigma1"][evaluated] = persistent(osc_v, resolved["oscillation"])
        flags["sigma2"][evaluated] = diverging(mean_v, resolved["divergence_v"])
        flags["sigma3"][evaluated] = persistent(osc_u, resolved["u_oscillation"]) | diverging(
            mean_u, resolved["divergence_u"]
        )
        flags["sigma4"][evaluated] = diverging(mean_grad, resolved["divergence_grad"])
        oscillation_min[evaluated] = osc_v[-1]

    result = SingularFlags(
        radii_sweep=sweep,
        thresholds=resolved,
        evaluated=evaluated.tolist(),
        oscillation_min=oscillation_min.tolist(),
        **{name: arr.tolist() for name, arr in flags.items()},
    )
    logger.info(f"Singular flags over {int(evaluated.sum())} nodes: {result.counts()}")
    return result


def linearization_experiment(
    base_strain: ArrayLike,
    perturbation: DiscreteField,
    lambda_sequence: Sequence[float],
    spec: ProblemSpec,
    opts: SolverOptions | None = None,
    ball: Ball | None = None,
) -> LinearizationReport:
    """Compare rescaled nonlinear solutions around A x with the frozen-tangent solution.

    For each lam the energy is minimized with boundary data A x + lam * perturbation;
    the rescaled error is int lam^-2 |V(lam (e(u_lam) - e(u_inf)))|^2 over the ball
    (the whole box when ball is None), with u_lam = (solution - A x) / lam.
    """
    params = spec.params
    if params.mu <= 0 or params.kappa != 0:
        raise DomainError("Linearization needs mu > 0 and kappa = 0")
    a = np.asarray(base_strain, dtype=float)
    if a.shape != (spec.mesh.dim, spec.mesh.dim) or not is_symmetric(a):
        raise DomainError("Base strain must be a symmetric dim x dim matrix")
    lams = [float(lam) for lam in lambda_sequence]
    if any(lam <= 0 for lam in lams) or any(b >= a_ for a_, b in zip(lams, lams[1:], strict=False)):
        raise DomainError("lambda_sequence must be positive and decreasing")

    mesh = spec.mesh
    tangent_tensor = tangent(a, params, spec.C)
    limit = solve_linearized(tangent_tensor, None, perturbation, fixed_nodes=spec.fixed_nodes)
    base = affine_field(mesh, a)
    limit_strain = element_strains(limit)

    errors = []
    for lam in lams:
        data = DiscreteField(mesh, base.values + lam * perturbation.values)
        stage = ProblemSpec(
            mesh=mesh,
            params=params,
            C=spec.C,
            g=spec.g,
            fixed_nodes=spec.fixed_nodes,
            dirichlet_values=data.values[spec.fixed_nodes],
            penalty_level=spec.penalty_level,
            quadrature_order=spec.quadrature_order,
        )
        start = DiscreteField(mesh, base.values + lam * limit.values)
        solution = minimize(stage, start, opts)
        rescaled = DiscreteField(mesh, (solution.field.values - base.values) / lam)
        gap = v_norm_sq(lam * (element_strains(rescaled) - limit_strain), params) / lam**2
        error = float(ball_integral(gap, ball, mesh)) if ball is not None else float(np.dot(mesh.volumes, gap))
        errors.append(error)
        logger.info(f"Linearization lam={lam:g}: rescaled error {error:.4e}")

    monotone = all(b < a_ for a_, b in zip(errors, errors[1:], strict=False))
    return LinearizationReport(
        base_strain=a.tolist(),
        lambda_sequence=lams,
        rescaled_error=errors,
        linear_residual=linearized_residual(tangent_tensor, limit, fixed_nodes=spec.fixed_nodes),
        monotone=monotone,
    )
