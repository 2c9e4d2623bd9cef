"""Experiment dispatch: build the problem from config, run one command, persist artifacts."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel

from utils.assembly import ProblemSpec, energy_terms, make_problem
from utils.audits import LEMMAS, audit_grid
from utils.custom_types import (
    AuditBundle,
    AuditRecord,
    ConvergenceStudy,
    ElasticSpec,
    ExperimentConfig,
    ProblemConfig,
    SolveSummary,
)
from utils.diagnostics import (
    caccioppoli_report,
    comparison_report,
    decay_exponent,
    excess_decay_table,
    integrability_curve,
    linearization_experiment,
    singular_flags,
)
from utils.errors import AuditViolationError, ConfigError
from utils.expressions import VectorExpression
from utils.manufactured import manufactured_problem
from utils.mesh import Ball, DiscreteField, Mesh, build_mesh, interpolate
from utils.solver import Solution, minimize
from utils.storage import (
    save_snapshot,
    write_manifest,
    write_report,
    write_trace,
)
from utils.tensors import ElasticTensor


def build_tensor(spec: ElasticSpec, dim: int) -> ElasticTensor:
    match spec.kind:
        case "identity":
            tensor = ElasticTensor.identity(dim)
        case "isotropic":
            tensor = ElasticTensor.isotropic(dim, spec.lame, spec.shear)
        case _:
            tensor = ElasticTensor.from_entries(np.asarray(spec.entries, dtype=float))
    if tensor.dim != dim:
        raise ConfigError(f"Elastic tensor has dim {tensor.dim}, problem has {dim}", key="problem.elastic")
    return tensor if spec.scale == 1 else tensor.scaled(spec.scale)


def build_mesh_from(problem: ProblemConfig) -> Mesh:
    return build_mesh(
        problem.params.dim, (problem.mesh.lower, problem.mesh.upper), problem.mesh.cells_per_axis
    )


def build_problem(problem: ProblemConfig, mesh: Mesh | None = None) -> tuple[ProblemSpec, DiscreteField]:
    """ProblemSpec plus a feasible initial field (the interpolated boundary data)."""
    dim = problem.params.dim
    mesh = mesh or build_mesh_from(problem)
    tensor = build_tensor(problem.elastic, dim)
    g = interpolate(mesh, VectorExpression(problem.g, dim)) if problem.g else None
    boundary = VectorExpression(problem.dirichlet, dim) if problem.dirichlet else None
    spec = make_problem(
        mesh,
        problem.params,
        tensor,
        g=g,
        dirichlet=boundary,
        penalty_level=problem.penalty_level,
        quadrature_order=problem.quadrature_order,
    )
    initial = interpolate(mesh, boundary) if boundary is not None else DiscreteField.zeros(mesh)
    return spec, initial


def _center(config: ExperimentConfig, mesh: Mesh) -> np.ndarray:
    center = config.diagnostics.center
    if center is None:
        return 0.5 * (mesh.lower + mesh.upper)
    if len(center) != mesh.dim:
        raise ConfigError(f"center needs {mesh.dim} coordinates", key="diagnostics.center")
    return np.asarray(center, dtype=float)


def _radius(config: ExperimentConfig, mesh: Mesh, fraction: float = 0.25) -> float:
    if config.diagnostics.radius is not None:
        return config.diagnostics.radius
    return fraction * float(np.min(mesh.upper - mesh.lower))


class Pipeline:
    """One run of one command; every artifact path it writes is collected for the manifest."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, threads: int):
        self.config = config
        self.out_dir = out_dir
        self.threads = threads
        self.written: list[Path] = []
        self.violations: list[AuditRecord] = []

    def report(self, report: BaseModel, stem: str) -> None:
        out = self.config.output
        self.written += write_report(report, self.out_dir, stem, list(out.formats), out.plots)

    def solve(self) -> Solution:
        problem = self.config.problem
        if problem is None:
            raise ConfigError("problem block is required", key="problem")
        spec, initial = build_problem(problem)
        solution = minimize(spec, initial, self.config.solver)
        logger.info(
            f"Solved in {solution.iterations} iterations: E={solution.energy:.12e} "
            f"|grad|={solution.final_grad_norm:.3e}"
        )
        out = self.config.output
        if out.snapshot:
            self.written.append(save_snapshot(solution.field, spec.params, self.out_dir / "field.json"))
        if "csv" in out.formats:
            self.written += write_trace(list(solution.trace), self.out_dir, plots=out.plots)
        summary = SolveSummary(
            iterations=solution.iterations,
            final_grad_norm=solution.final_grad_norm,
            energy=solution.energy,
            energy_terms=energy_terms(solution.field, spec),
            converged=solution.converged,
            L_path_energies=solution.L_path_energies,
        )
        self.report(summary, "solve")
        return solution

    def run_solve(self) -> None:
        self.solve()

    def run_excess(self) -> None:
        solution = self.solve()
        mesh = solution.spec.mesh
        diag = self.config.diagnostics
        table = excess_decay_table(
            solution,
            _center(self.config, mesh),
            diag.r0 or _radius(self.config, mesh),
            diag.tau,
            diag.levels,
            diag.bound_constant,
        )
        self.report(table, "excess")

    def run_decay(self) -> None:
        solution = self.solve()
        mesh = solution.spec.mesh
        radii = self.config.diagnostics.radii
        if radii is None:
            top = _radius(self.config, mesh)
            radii = [top * 0.7**k for k in range(4)]
        center = _center(self.config, mesh)
        self.report(decay_exponent(solution, center, radii), "decay")
        exponents = self.config.diagnostics.integrability_exponents
        if exponents:
            ball = Ball(center, max(radii))
            self.report(integrability_curve(solution, ball, exponents), "integrability")

    def run_caccioppoli(self) -> None:
        solution = self.solve()
        mesh = solution.spec.mesh
        diag = self.config.diagnostics
        report = caccioppoli_report(
            solution,
            solution.spec,
            _center(self.config, mesh),
            diag.radius or _radius(self.config, mesh, fraction=0.125),
            diag.lam,
        )
        self.report(report, "caccioppoli")

    def run_compare(self) -> None:
        solution = self.solve()
        mesh = solution.spec.mesh
        diag = self.config.diagnostics
        ball = Ball(_center(self.config, mesh), _radius(self.config, mesh))
        report = comparison_report(
            solution,
            solution.spec,
            ball,
            [np.asarray(xi, dtype=float) for xi in diag.xi_list],
            diag.include_mean_strain,
            self.config.solver,
        )
        self.report(report, "compare")

    def run_flags(self) -> None:
        solution = self.solve()
        diag = self.config.diagnostics
        self.report(singular_flags(solution, diag.radii_sweep, diag.thresholds), "flags")

    def run_linearize(self) -> None:
        problem = self.config.problem
        diag = self.config.diagnostics
        if problem is None:
            raise ConfigError("problem block is required", key="problem")
        if diag.base_strain is None:
            raise ConfigError("linearize needs diagnostics.base_strain", key="diagnostics.base_strain")
        if diag.perturbation is None:
            raise ConfigError("linearize needs diagnostics.perturbation", key="diagnostics.perturbation")
        spec, _ = build_problem(problem)
        perturbation = interpolate(spec.mesh, VectorExpression(diag.perturbation, spec.mesh.dim))
        ball = None
        if diag.center is not None or diag.radius is not None:
            ball = Ball(_center(self.config, spec.mesh), _radius(self.config, spec.mesh))
        report = linearization_experiment(
            diag.base_strain, perturbation, diag.lambda_sequence, spec, self.config.solver, ball
        )
        self.report(report, "linearize")

    def run_manufactured(self) -> None:
        problem = self.config.problem
        diag = self.config.diagnostics
        if problem is None:
            raise ConfigError("problem block is required", key="problem")
        if diag.exact_solution is None:
            raise ConfigError(
                "manufactured needs diagnostics.exact_solution", key="diagnostics.exact_solution"
            )
        dim = problem.params.dim
        exact = VectorExpression(diag.exact_solution, dim)
        tensor = build_tensor(problem.elastic, dim)
        cells = diag.refinements or [problem.mesh.cells_per_axis]
        errors = []
        for n in cells:
            mesh = build_mesh(dim, (problem.mesh.lower, problem.mesh.upper), n)
            spec = manufactured_problem(exact, problem.params, tensor, mesh, quadrature_order=problem.quadrature_order)
            initial = interpolate(mesh, exact)
            solution = minimize(spec, initial, self.config.solver)
            errors.append(float(np.abs(solution.field.values - initial.values).max()))
            logger.info(f"Manufactured N={n}: nodal max error {errors[-1]:.4e}")
        study = ConvergenceStudy(
            cells_per_axis=list(cells),
            max_errors=errors,
            reduction_factors=[a / b if b > 0 else float("inf") for a, b in zip(errors, errors[1:], strict=False)],
        )
        self.report(study, "manufactured")

    def run_audit(self) -> None:
        audit = self.config.audit
        lemma_ids = audit.lemmas or list(LEMMAS)
        seed = self.config.output.seed
        records = audit_grid(
            lemma_ids,
            audit.p_values,
            audit.mu_values,
            list(audit.dims),
            audit.samples,
            seed,
            workers=self.threads,
            stability=audit.stability,
            gamma=audit.gamma,
            r=audit.r,
            eta_bound=audit.eta_bound,
        )
        bundle = AuditBundle(seed=seed, samples=audit.samples, gamma=audit.gamma, records=records)
        self.report(bundle, "audit")
        self.violations = bundle.hard_violations()


COMMANDS: dict[str, Callable[[Pipeline], None]] = {
    "solve": Pipeline.run_solve,
    "excess": Pipeline.run_excess,
    "decay": Pipeline.run_decay,
    "caccioppoli": Pipeline.run_caccioppoli,
    "compare": Pipeline.run_compare,
    "flags": Pipeline.run_flags,
    "linearize": Pipeline.run_linearize,
    "manufactured": Pipeline.run_manufactured,
    "audit": Pipeline.run_audit,
}


def run(config: ExperimentConfig, out_dir: Path | None = None, threads: int | None = None) -> list[Path]:
    """Run the configured command and write the manifest last.

    Raises:
        AuditViolationError: An asserted audit bound failed; the bundle and
            manifest are still written.
    """
    out = out_dir or config.output.directory
    out.mkdir(parents=True, exist_ok=True)
    pipeline = Pipeline(config, out, threads or config.threads)
    logger.info(f"Running {config.command} into {out}")
    COMMANDS[config.command](pipeline)
    written = [*pipeline.written, write_manifest(out, pipeline.written)]
    if pipeline.violations:
        worst = pipeline.violations[0]
        raise AuditViolationError(
            sorted({record.lemma_id for record in pipeline.violations}), worst.witness
        )
    return written
