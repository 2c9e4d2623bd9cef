"""Damped Newton minimization of the discrete functionals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TypedDict

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from utils.assembly import (
    ProblemSpec,
    assemble_energy,
    assemble_gradient,
    assemble_hessian,
    element_stiffness,
    satisfies_dirichlet,
)
from utils.constants import DIRECT_SOLVE_MAX_DOFS
from utils.custom_types import SolverOptions
from utils.errors import (
    DomainError,
    IndefiniteTangentError,
    LinearSolveError,
    LineSearchStalledError,
    MaxItersError,
    SolverError,
    UndefinedHessianError,
)
from utils.mesh import Ball, DiscreteField, Mesh, ball_mask, quadrature
from utils.tensors import has_minor_and_major_symmetry, mandel_matrix

FloatArray = NDArray[np.float64]

_MAX_LEVENBERG_TRIES = 25


class TraceRow(TypedDict):
    iteration: int
    energy: float
    grad_norm: float
    step: float
    L: float


@dataclass
class Solution:
    field: DiscreteField
    iterations: int
    final_grad_norm: float
    energy: float
    converged: bool
    spec: ProblemSpec
    L_path_energies: list[tuple[float, float]] = field(default_factory=list)
    trace: list[TraceRow] = field(default_factory=list)

    @classmethod
    def from_field(cls, values: DiscreteField, spec: ProblemSpec, grad_tol: float = 1e-9) -> Solution:
        """Wrap a given field (synthetic or loaded from a snapshot) for the diagnostics."""
        g_norm = float(np.linalg.norm(assemble_gradient(values, spec)[spec.free_dofs]))
        return cls(values, 0, g_norm, assemble_energy(values, spec), g_norm <= grad_tol, spec)


def spd_solve(matrix: sparse.spmatrix, rhs: FloatArray, rtol: float = 1e-12) -> FloatArray:
    """Solve a sparse symmetric positive definite system.

    Direct factorization up to DIRECT_SOLVE_MAX_DOFS unknowns, Jacobi-preconditioned
    conjugate gradients above.
    """
    n = rhs.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= DIRECT_SOLVE_MAX_DOFS:
        x = sparse_linalg.spsolve(sparse.csc_matrix(matrix), rhs)
    else:
        diag = matrix.diagonal()
        precond = sparse.diags(np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0))
        x, info = sparse_linalg.cg(matrix, rhs, rtol=rtol, maxiter=10 * n, M=precond)
        if info != 0:
            raise LinearSolveError(f"CG stopped with info={info} on {n} unknowns")
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("Linear solve returned non-finite values")
    return x


def _newton_direction(
    hess: sparse.csr_matrix, grad: FloatArray, opts: SolverOptions
) -> FloatArray:
    """Newton direction, shifted toward gradient descent until it is a descent direction."""
    g_norm = float(np.linalg.norm(grad))
    shift = 0.0
    diag_scale = float(np.max(np.abs(hess.diagonal()), initial=1.0))
    for attempt in range(_MAX_LEVENBERG_TRIES):
        matrix = hess if shift == 0 else hess + shift * sparse.identity(hess.shape[0], format="csr")
        try:
            direction = spd_solve(matrix, -grad, opts.cg_rtol)
        except (LinearSolveError, RuntimeError):
            direction = None
        if direction is not None:
            slope = float(grad @ direction)
            if slope < -1e-14 * g_norm * float(np.linalg.norm(direction)):
                if attempt:
                    logger.warning(f"Newton direction needed a Levenberg shift of {shift:.3e}")
                return direction
        shift = max(opts.hessian_regularization, 1e-12 * diag_scale) if shift == 0 else 10 * shift
    raise LineSearchStalledError("No shift of the Hessian produced a descent direction")


def _newton(
    spec: ProblemSpec,
    start: DiscreteField,
    opts: SolverOptions,
    trace: list[TraceRow],
) -> tuple[DiscreteField, int, float, float, bool]:
    level = spec.penalty_level if spec.penalty_level is not None else float("inf")
    u = start.copy()
    free = spec.free_dofs
    energy = assemble_energy(u, spec)
    ls = opts.line_search
    for iteration in range(opts.max_iters + 1):
        grad = assemble_gradient(u, spec)[free]
        g_norm = float(np.linalg.norm(grad))
        if iteration == 0:
            trace.append(
                TraceRow(iteration=0, energy=energy, grad_norm=g_norm, step=0.0, L=level)
            )
        if g_norm <= opts.grad_tol:
            return u, iteration, g_norm, energy, True
        if iteration == opts.max_iters:
            break
        hess = assemble_hessian(u, spec)[free][:, free]
        direction = _newton_direction(hess, grad, opts)
        slope = float(grad @ direction)

        step = 1.0
        for _ in range(ls.max_backtracks):
            trial_dofs = u.dofs.copy()
            trial_dofs[free] += step * direction
            trial = u.with_dofs(trial_dofs)
            trial_energy = assemble_energy(trial, spec)
            if trial_energy <= energy + ls.sufficient_decrease * step * slope:
                break
            step *= ls.shrink
        else:
            # the predicted decrease is already below double-precision resolution
            if -slope <= 1e-13 * max(1.0, abs(energy)):
                logger.debug(
                    f"Stopping at roundoff: |grad|={g_norm:.3e}, predicted decrease {-slope:.3e}"
                )
                return u, iteration, g_norm, energy, False
            raise LineSearchStalledError(
                f"No sufficient decrease after {ls.max_backtracks} backtracks (|grad|={g_norm:.3e})"
            )
        u, energy = trial, trial_energy
        new_norm = float(np.linalg.norm(assemble_gradient(u, spec)[free]))
        trace.append(
            TraceRow(
                iteration=iteration + 1,
                energy=energy,
                grad_norm=new_norm,
                step=step,
                L=level,
            )
        )
        logger.debug(
            f"Newton it {iteration + 1}: E={energy:.12e} |grad|={new_norm:.3e} step={step:g} L={level:g}"
        )
    g_norm = float(np.linalg.norm(assemble_gradient(u, spec)[free]))
    return u, opts.max_iters, g_norm, energy, g_norm <= opts.grad_tol


def minimize(
    spec: ProblemSpec, initial: DiscreteField, opts: SolverOptions | None = None
) -> Solution:
    """Minimize the discrete functional from a feasible initial field.

    For p < 2 with mu = 0 and no L on the problem, the energy is minimized along
    the L schedule, warm-starting each stage; the last finite-L solution is then
    re-polished with the penalty off when the Hessian is defined along the way.

    Raises:
        DomainError: initial violates the Dirichlet data.
        LineSearchStalledError: No descent direction or no sufficient decrease.
        MaxItersError: Iteration budget exhausted; the partial solution is attached.
    """
    opts = opts or SolverOptions()
    if initial.mesh is not spec.mesh:
        raise DomainError("Initial field lives on another mesh")
    if not satisfies_dirichlet(initial, spec):
        raise DomainError("Initial field does not satisfy the Dirichlet data")
    trace: list[TraceRow] = []
    needs_path = spec.params.p < 2 and spec.params.mu == 0 and spec.penalty_level is None

    if not needs_path:
        u, iters, g_norm, energy, converged = _newton(spec, initial, opts, trace)
        solution = Solution(u, iters, g_norm, energy, converged, spec, trace=trace)
        if iters >= opts.max_iters and not converged:
            raise MaxItersError(solution=solution)
        return solution

    path: list[tuple[float, float]] = []
    u = initial
    total = 0
    staged: Solution | None = None
    for level in opts.penalty_schedule:
        if np.isinf(level):
            break
        stage_spec = spec.with_penalty(level)
        logger.info(f"Continuation stage L={level:g}")
        u, iters, g_norm, energy, converged = _newton(stage_spec, u, opts, trace)
        total += iters
        path.append((level, energy))
        staged = Solution(u, total, g_norm, energy, converged, stage_spec, path, trace)
        if iters >= opts.max_iters and not converged:
            raise MaxItersError(f"Stage L={level:g} did not converge", solution=staged)

    try:
        u_final, iters, g_norm, energy, converged = _newton(spec, u, opts, trace)
        total += iters
    except (UndefinedHessianError, LineSearchStalledError) as exc:
        logger.warning(f"Penalty-off polish failed ({exc}); keeping the last finite-L field")
        u_final = u
        energy = assemble_energy(u_final, spec)
        g_norm = float(np.linalg.norm(assemble_gradient(u_final, spec)[spec.free_dofs]))
        converged = g_norm <= opts.grad_tol
    path.append((float("inf"), energy))
    if staged is not None and not converged:
        logger.warning(
            f"Reported field has penalty-off gradient {g_norm:.3e} > grad_tol {opts.grad_tol:g}"
        )
    return Solution(u_final, total, g_norm, energy, converged, spec, path, trace)


def check_tangent(tensor: ArrayLike) -> FloatArray:
    """Validate a constant tangent tensor: symmetric and positive definite on symmetric matrices.

    Raises:
        IndefiniteTangentError: Symmetries fail or the smallest Rayleigh quotient is <= 0.
    """
    t = np.asarray(tensor, dtype=float)
    n = t.shape[0]
    if t.shape != (n, n, n, n) or not has_minor_and_major_symmetry(t, atol=1e-10):
        raise IndefiniteTangentError("Tangent must be an (n,n,n,n) tensor with major/minor symmetry")
    smallest = float(np.linalg.eigvalsh(mandel_matrix(t))[0])
    if smallest <= 0:
        raise IndefiniteTangentError(f"Smallest Rayleigh quotient {smallest:.3e} is not positive")
    return t


def load_vector(load: DiscreteField, order: int = 2) -> FloatArray:
    """Consistent P1 load vector int f . phi over the box."""
    mesh = load.mesh
    quad = quadrature(mesh, order)
    values = quad.field_values(load)
    local = np.einsum("eq,eqi,qa->eai", quad.weights, values, quad.bary)
    dofs = mesh.elements[:, :, None] * mesh.dim + np.arange(mesh.dim)
    return np.bincount(dofs.reshape(-1), weights=local.reshape(-1), minlength=mesh.num_dofs)


def _fixed_dofs(mesh: Mesh, fixed_nodes: ArrayLike) -> tuple[FloatArray, FloatArray]:
    mask = np.zeros((mesh.num_nodes, mesh.dim), dtype=bool)
    mask[np.asarray(fixed_nodes, dtype=np.int64)] = True
    flat = mask.reshape(-1)
    return np.flatnonzero(flat), np.flatnonzero(~flat)


def solve_linearized(
    tangent_tensor: ArrayLike,
    volume_load: DiscreteField | None,
    dirichlet: DiscreteField,
    fixed_nodes: ArrayLike | None = None,
) -> DiscreteField:
    """Solve the constant-coefficient system int <A e(u), e(phi)> = int load . phi.

    Values of dirichlet are imposed at fixed_nodes (the box boundary by default).

    Raises:
        IndefiniteTangentError: tangent_tensor is not positive definite on symmetric matrices.
        LinearSolveError: The relative residual exceeds 1e-10.
    """
    tensor = check_tangent(tangent_tensor)
    mesh = dirichlet.mesh
    nodes = mesh.boundary_nodes if fixed_nodes is None else fixed_nodes
    fixed, free = _fixed_dofs(mesh, nodes)
    stiffness = element_stiffness(mesh, tensor)
    rhs = load_vector(volume_load) if volume_load is not None else np.zeros(mesh.num_dofs)
    u = dirichlet.dofs.copy()
    k_ff = stiffness[free][:, free]
    reduced = rhs[free] - stiffness[free][:, fixed] @ u[fixed]
    u[free] = spd_solve(k_ff, reduced)
    residual = float(np.linalg.norm(k_ff @ u[free] - reduced))
    scale = max(float(np.linalg.norm(reduced)), float(np.linalg.norm(k_ff @ u[free])), 1e-300)
    if residual > 1e-10 * scale:
        raise LinearSolveError(f"Linearized residual {residual / scale:.3e} exceeds 1e-10")
    return DiscreteField(mesh, u)


def linearized_residual(
    tangent_tensor: ArrayLike,
    field: DiscreteField,
    volume_load: DiscreteField | None = None,
    fixed_nodes: ArrayLike | None = None,
) -> float:
    """Relative residual of field in the constant-coefficient system on free dofs."""
    mesh = field.mesh
    nodes = mesh.boundary_nodes if fixed_nodes is None else fixed_nodes
    _, free = _fixed_dofs(mesh, nodes)
    stiffness = element_stiffness(mesh, np.asarray(tangent_tensor, dtype=float))
    rhs = load_vector(volume_load) if volume_load is not None else np.zeros(mesh.num_dofs)
    action = stiffness @ field.dofs
    residual = float(np.linalg.norm(action[free] - rhs[free]))
    scale = max(float(np.linalg.norm(action)), float(np.linalg.norm(rhs)), 1e-300)
    return residual / scale


def comparison_region(mesh: Mesh, ball: Ball, order: int = 2) -> tuple[FloatArray, FloatArray]:
    """Elements with every quadrature point inside the ball, and the nodes free to move.

    A node is free when all of its incident elements lie in the region, so every
    node on the region's boundary stays frozen.
    """
    mesh.check_ball(ball)
    inside = ball_mask(quadrature(mesh, order), ball).all(axis=1)
    incidence = mesh.node_element_incidence
    outside_count = incidence @ (~inside).astype(float)
    free_nodes = outside_count == 0
    return inside, free_nodes


def solve_autonomous_comparison(
    u: Solution, ball: Ball, spec: ProblemSpec, opts: SolverOptions | None = None
) -> DiscreteField:
    """Minimize the elastic energy alone on the ball with u's values frozen elsewhere."""
    if spec.params.mu <= 0:
        raise DomainError("Comparison solve needs mu > 0")
    mesh = spec.mesh
    _, free_nodes = comparison_region(mesh, ball)
    fixed = np.flatnonzero(~free_nodes)
    params = spec.params.model_copy(update={"kappa": 0.0})
    local_spec = ProblemSpec(
        mesh=mesh,
        params=params,
        C=spec.C,
        g=DiscreteField.zeros(mesh),
        fixed_nodes=fixed,
        dirichlet_values=u.field.values[fixed],
        penalty_level=None,
        quadrature_order=spec.quadrature_order,
    )
    logger.debug(f"Comparison solve: {int(free_nodes.sum())} free nodes in the ball")
    if not free_nodes.any():
        return u.field.copy()
    try:
        result = minimize(local_spec, u.field, opts)
    except SolverError:
        logger.exception("Comparison solve failed")
        raise
    return result.field
