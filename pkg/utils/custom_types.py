from pathlib import Path
from typing import Annotated, Any, Literal

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from utils.constants import DEFAULT_L_SCHEDULE, SAMPLE_SCALES

Command = Literal[
    "audit",
    "solve",
    "excess",
    "decay",
    "caccioppoli",
    "compare",
    "linearize",
    "manufactured",
    "flags",
]
CaccioppoliBranch = Literal["super", "sub"]
OutputFormat = Literal["json", "csv"]

MatrixRows = list[list[float]]


class GrowthParams(BaseModel):
    """Constitutive parameters of the p-growth energy and fidelity term."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    p: float = Field(gt=1, description="Growth exponent.")
    mu: float = Field(default=0.0, ge=0, description="Strain-squared shift.")
    kappa: float = Field(default=0.0, ge=0, description="Weight of the fidelity term.")
    dim: Literal[2, 3] = Field(default=2, description="Space dimension.")


class LineSearchOptions(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shrink: float = Field(default=0.5, gt=0, lt=1)
    sufficient_decrease: float = Field(default=1e-4, gt=0, le=0.5)
    max_backtracks: int = Field(default=60, ge=1)


class SolverOptions(BaseModel):
    """Newton/continuation settings shared by every minimization."""

    model_config = ConfigDict(
        extra="forbid", frozen=True, validate_by_name=True, validate_by_alias=True
    )

    grad_tol: float = Field(default=1e-9, gt=0, description="Free-dof gradient norm threshold.")
    max_iters: int = Field(default=100, ge=1)
    line_search: LineSearchOptions = Field(default_factory=LineSearchOptions)
    penalty_schedule: tuple[float, ...] = Field(
        default=DEFAULT_L_SCHEDULE,
        alias="L_schedule",
        description="Increasing regularization levels; inf turns the penalty off.",
    )
    hessian_regularization: float = Field(
        default=1e-10, ge=0, description="Floor of the Levenberg diagonal shift."
    )
    cg_rtol: float = Field(default=1e-12, gt=0)

    @field_validator("penalty_schedule")
    @classmethod
    def check_schedule(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("L_schedule must not be empty")
        if any(level <= 0 for level in v):
            raise ValueError("L_schedule entries must be positive")
        if any(b <= a for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("L_schedule must be strictly increasing")
        if v[-1] != float("inf"):
            raise ValueError("L_schedule must end at inf (penalty off)")
        return v


class AuditSpec(BaseModel):
    """Sampling recipe for one inequality audit."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    params: GrowthParams
    samples: int = Field(default=1000, ge=1)
    seed: int = 0
    scales: tuple[float, ...] = SAMPLE_SCALES
    gamma: float = Field(default=1.0, gt=-0.5, description="Exponent of the weight integral.")
    r: float = Field(default=0.0, ge=0, description="Shift exponent of the weight integral.")
    eta_bound: float = Field(default=10.0, gt=0, description="|eta| <= L conditioning.")
    max_norm: float = Field(default=1e3, gt=0)
    workers: int = Field(default=1, ge=1)


class InequalityAudit(BaseModel):
    # skipped grid points carry NaN ranges; keep them readable on reload
    model_config = ConfigDict(ser_json_inf_nan="constants")

    lemma_id: str
    samples: int = Field(ge=0)
    empirical_lo: float
    empirical_hi: float
    violated: bool
    hard: bool = Field(description="Whether an explicit bound was asserted.")
    bound_lo: float | None = None
    bound_hi: float | None = None
    witness: dict[str, Any] = Field(default_factory=dict)
    skipped: str | None = None

    @model_validator(mode="after")
    def check_order(self) -> Self:
        if self.empirical_lo > self.empirical_hi:
            raise ValueError("empirical_lo must not exceed empirical_hi")
        return self


class ExcessTable(BaseModel):
    center: list[float]
    radii: list[float]
    excess: list[float]
    mean_strain: list[MatrixRows]
    tau: float = Field(gt=0, lt=1)
    ratios: list[float]
    flagged: list[bool]
    bound_constant: float

    @field_validator("radii")
    @classmethod
    def check_decreasing(cls, v: list[float]) -> list[float]:
        if any(b >= a for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("radii must be strictly decreasing")
        return v


class DecayFit(BaseModel):
    center: list[float]
    radii: list[float]
    mass: list[float]
    fitted_gamma: float
    intercept: float
    residual: float = Field(ge=0)


class CaccioppoliReport(BaseModel):
    center: list[float]
    r: float
    lam: float
    branch: CaccioppoliBranch
    lhs: float = Field(ge=0)
    rhs_terms: dict[str, float]
    empirical_c: float
    by_product_ratio: float | None = Field(
        default=None,
        description="Gradient-of-V integral over the sub-quadratic bound; p < 2 only.",
    )


class ComparisonReport(BaseModel):
    center: list[float]
    radius: float
    xi_list: list[MatrixRows]
    lhs1: list[float]
    rhs1: list[float]
    ratio1: list[float]
    lhs2: float = Field(ge=0)
    gap2: float
    ratio2: float
    excess_u: float = Field(ge=0)
    excess_w: float = Field(ge=0)
    excess_ratio: float
    mean_strain_u: MatrixRows
    mean_strain_w: MatrixRows
    mean_strain_drift: float


class FlagThresholds(BaseModel):
    """Absolute thresholds. None picks the scale-free default from domain averages."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    oscillation: float | None = Field(default=None, ge=0)
    divergence: float | None = Field(default=None, ge=0)
    u_oscillation: float | None = Field(default=None, ge=0)


class SingularFlags(BaseModel):
    radii_sweep: list[float]
    thresholds: dict[str, float]
    evaluated: list[bool]
    sigma1: list[bool]
    sigma2: list[bool]
    sigma3: list[bool]
    sigma4: list[bool]
    oscillation_min: list[float] = Field(
        default_factory=list, description="V-oscillation at the smallest radius, 0 where not evaluated."
    )

    def counts(self) -> dict[str, int]:
        return {
            name: sum(getattr(self, name))
            for name in ("sigma1", "sigma2", "sigma3", "sigma4")
        }


class LinearizationReport(BaseModel):
    base_strain: MatrixRows
    lambda_sequence: list[float]
    rescaled_error: list[float]
    linear_residual: float = Field(ge=0)
    monotone: bool = Field(default=False, description="rescaled_error strictly decreasing.")

    @field_validator("lambda_sequence")
    @classmethod
    def check_decreasing(cls, v: list[float]) -> list[float]:
        if any(b >= a for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("lambda_sequence must be decreasing")
        return v


class IntegrabilityCurve(BaseModel):
    center: list[float]
    radius: float = Field(gt=0)
    exponents: list[float]
    integrals: list[float]


class ElasticSpec(BaseModel):
    """Elastic tensor: identity on symmetric matrices, isotropic or full entries."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["identity", "isotropic", "entries"] = "identity"
    lame: float = 0.0
    shear: float = Field(default=0.5, gt=0)
    entries: list[Any] | None = None
    scale: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def check_entries(self) -> Self:
        if self.kind == "entries" and self.entries is None:
            raise ValueError("entries are required when kind is 'entries'")
        return self


class MeshSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lower: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    upper: list[float] = Field(default_factory=lambda: [1.0, 1.0])
    cells_per_axis: int = Field(default=16, ge=2)


class ProblemConfig(BaseModel):
    model_config = ConfigDict(
        extra="forbid", frozen=True, validate_by_name=True, validate_by_alias=True
    )

    params: GrowthParams
    elastic: ElasticSpec = Field(default_factory=ElasticSpec)
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    g: list[str] | None = Field(
        default=None, description="Per-component expressions for the fidelity datum."
    )
    dirichlet: list[str] | None = Field(
        default=None, description="Per-component expressions for the boundary data."
    )
    penalty_level: Annotated[float, Field(gt=0)] | None = Field(default=None, alias="L")
    quadrature_order: int = Field(default=2, ge=2, le=8)

    @model_validator(mode="after")
    def check_dimensions(self) -> Self:
        dim = self.params.dim
        if len(self.mesh.lower) != dim or len(self.mesh.upper) != dim:
            raise ValueError(f"mesh corners must have {dim} coordinates")
        for name in ("g", "dirichlet"):
            exprs = getattr(self, name)
            if exprs is not None and len(exprs) != dim:
                raise ValueError(f"{name} needs one expression per component ({dim})")
        return self


class DiagnosticsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    center: list[float] | None = None
    radius: float | None = Field(default=None, gt=0)
    r0: float | None = Field(default=None, gt=0)
    tau: float = Field(default=0.5, gt=0, lt=1)
    levels: int = Field(default=3, ge=1)
    radii: list[float] | None = None
    lam: float = Field(default=1.0, ge=0)
    xi_list: list[MatrixRows] = Field(default_factory=list)
    include_mean_strain: bool = True
    thresholds: FlagThresholds = Field(default_factory=FlagThresholds)
    radii_sweep: list[float] | None = None
    lambda_sequence: list[float] = Field(
        default_factory=lambda: [0.5, 0.25, 0.125, 0.0625]
    )
    base_strain: MatrixRows | None = None
    perturbation: list[str] | None = None
    bound_constant: float = Field(default=1.5, gt=0)
    exact_solution: list[str] | None = None
    refinements: list[int] = Field(default_factory=list)
    integrability_exponents: list[float] = Field(default_factory=list)


class AuditConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lemmas: list[str] | None = Field(default=None, description="None audits every id.")
    samples: int = Field(default=10_000, ge=1)
    p_values: list[Annotated[float, Field(gt=1)]] = Field(
        default_factory=lambda: [1.3, 1.5, 2.0, 3.0, 4.0]
    )
    mu_values: list[Annotated[float, Field(ge=0)]] = Field(
        default_factory=lambda: [0.0, 0.1, 1.0]
    )
    dims: list[Literal[2, 3]] = Field(default_factory=lambda: [2, 3])
    gamma: float = Field(default=-0.25, gt=-0.5)
    r: float = Field(default=0.0, ge=0)
    eta_bound: float = Field(default=10.0, gt=0)
    stability: bool = Field(
        default=False, description="Rerun with doubled samples and report drift."
    )


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    directory: Path = Path("results")
    formats: list[OutputFormat] = Field(default_factory=lambda: ["json", "csv"])
    snapshot: bool = True
    plots: bool = True
    seed: int = 0


class ExperimentConfig(BaseModel):
    """Top-level experiment file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    problem: ProblemConfig | None = None
    solver: SolverOptions = Field(default_factory=SolverOptions)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_problem(self) -> Self:
        if self.command != "audit" and self.problem is None:
            raise ValueError(f"command {self.command!r} needs a problem block")
        return self


class AuditRecord(InequalityAudit):
    """One audit on one point of the parameter grid."""

    p: float
    mu: float
    dim: int
    stability_drift: float | None = None


class AuditBundle(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    seed: int
    samples: int
    gamma: float
    records: list[AuditRecord]

    def hard_violations(self) -> list[AuditRecord]:
        return [record for record in self.records if record.violated]


class SolveSummary(BaseModel):
    iterations: int
    final_grad_norm: float
    energy: float
    energy_terms: dict[str, float]
    converged: bool
    L_path_energies: list[tuple[float, float]]


class ConvergenceStudy(BaseModel):
    """Nodal max error against the exact solution over a sequence of meshes."""

    cells_per_axis: list[int]
    max_errors: list[float]
    reduction_factors: list[float]


class FieldSnapshot(BaseModel):
    """Self-describing field container; the mesh is rebuilt from its descriptor."""

    model_config = ConfigDict(extra="forbid")

    format_version: int
    mesh: dict[str, Any]
    params: GrowthParams
    shape: tuple[int, int]
    values: str = Field(description="base64 of the little-endian float64 node values.")
