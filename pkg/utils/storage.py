"""Artifact persistence: JSON reports, flat CSV tables, plot scripts, field snapshots, manifest."""

from __future__ import annotations

import base64
import hashlib
import json
from functools import singledispatch
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from utils.constants import MANIFEST_NAME, SNAPSHOT_FORMAT_VERSION
from utils.custom_types import (
    AuditBundle,
    CaccioppoliReport,
    ComparisonReport,
    ConvergenceStudy,
    DecayFit,
    ExcessTable,
    FieldSnapshot,
    GrowthParams,
    IntegrabilityCurve,
    LinearizationReport,
    SingularFlags,
    SolveSummary,
)
from utils.errors import ConfigError, MeshMismatchError
from utils.mesh import DiscreteField, mesh_from_descriptor


def write_json(model: BaseModel, path: Path) -> Path:
    path.write_text(model.model_dump_json(indent=2) + "\n")
    return path


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


@singledispatch
def to_frame(report: BaseModel) -> pd.DataFrame:
    """Flat table, one row per radius, level, lambda, term or node."""
    raise TypeError(f"No table layout for {type(report).__name__}")


@to_frame.register
def _(report: ExcessTable) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "level": range(len(report.radii)),
            "radius": report.radii,
            "excess": report.excess,
            "ratio": [np.nan, *report.ratios],
            "flagged": [False, *report.flagged],
        }
    )


@to_frame.register
def _(report: DecayFit) -> pd.DataFrame:
    return pd.DataFrame({"radius": report.radii, "mass": report.mass})


@to_frame.register
def _(report: CaccioppoliReport) -> pd.DataFrame:
    rows = [{"term": "lhs", "value": report.lhs}]
    rows += [{"term": name, "value": value} for name, value in report.rhs_terms.items()]
    rows.append({"term": "empirical_c", "value": report.empirical_c})
    if report.by_product_ratio is not None:
        rows.append({"term": "by_product_ratio", "value": report.by_product_ratio})
    return pd.DataFrame(rows)


@to_frame.register
def _(report: ComparisonReport) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "xi_index": range(len(report.lhs1)),
            "lhs1": report.lhs1,
            "rhs1": report.rhs1,
            "ratio1": report.ratio1,
        }
    )


@to_frame.register
def _(report: SingularFlags) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "node": range(len(report.evaluated)),
            "evaluated": report.evaluated,
            "sigma1": report.sigma1,
            "sigma2": report.sigma2,
            "sigma3": report.sigma3,
            "sigma4": report.sigma4,
            "oscillation_min": report.oscillation_min or [0.0] * len(report.evaluated),
        }
    )


@to_frame.register
def _(report: LinearizationReport) -> pd.DataFrame:
    return pd.DataFrame({"lam": report.lambda_sequence, "rescaled_error": report.rescaled_error})


@to_frame.register
def _(report: IntegrabilityCurve) -> pd.DataFrame:
    return pd.DataFrame({"exponent": report.exponents, "integral": report.integrals})


@to_frame.register
def _(report: ConvergenceStudy) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "cells_per_axis": report.cells_per_axis,
            "max_error": report.max_errors,
            "reduction": [np.nan, *report.reduction_factors],
        }
    )


@to_frame.register
def _(report: AuditBundle) -> pd.DataFrame:
    return pd.DataFrame(
        [record.model_dump(exclude={"witness"}) for record in report.records],
    )


@to_frame.register
def _(report: SolveSummary) -> pd.DataFrame:
    return pd.DataFrame(report.L_path_energies, columns=["L", "energy"])


# x column, y column, log-log?
_PLOTS: dict[str, tuple[str, str, bool]] = {
    "ExcessTable": ("radius", "excess", True),
    "DecayFit": ("radius", "mass", True),
    "LinearizationReport": ("lam", "rescaled_error", True),
    "IntegrabilityCurve": ("exponent", "integral", False),
    "ConvergenceStudy": ("cells_per_axis", "max_error", True),
    "ComparisonReport": ("xi_index", "ratio1", False),
    "trace": ("iteration", "grad_norm", False),
}


def plot_script(kind: str, csv_name: str) -> str | None:
    """Text of a standalone matplotlib script reproducing the standard plot from the CSV."""
    spec = _PLOTS.get(kind)
    if spec is None:
        return None
    x, y, loglog = spec
    scale = 'ax.set_xscale("log")\nax.set_yscale("log")' if loglog else 'ax.set_yscale("log")'
    return (
        "import matplotlib.pyplot as plt\n"
        "import pandas as pd\n"
        "\n"
        f'frame = pd.read_csv("{csv_name}")\n'
        "fig, ax = plt.subplots()\n"
        f'ax.plot(frame["{x}"], frame["{y}"], marker="o")\n'
        f"{scale}\n"
        f'ax.set_xlabel("{x}")\n'
        f'ax.set_ylabel("{y}")\n'
        f'fig.savefig("{Path(csv_name).stem}.png", dpi=150)\n'
    )


def write_report(
    report: BaseModel,
    out_dir: Path,
    stem: str,
    formats: list[str],
    plots: bool = True,
) -> list[Path]:
    """Write the JSON record, the flat CSV and (when one exists) the plot script."""
    written = []
    if "json" in formats:
        written.append(write_json(report, out_dir / f"{stem}.json"))
    if "csv" in formats:
        csv_path = write_csv(to_frame(report), out_dir / f"{stem}.csv")
        written.append(csv_path)
        script = plot_script(type(report).__name__, csv_path.name) if plots else None
        if script is not None:
            script_path = out_dir / f"plot_{stem}.py"
            script_path.write_text(script)
            written.append(script_path)
    return written


def write_trace(rows: list[dict], out_dir: Path, stem: str = "trace", plots: bool = True) -> list[Path]:
    frame = pd.DataFrame(rows, columns=["iteration", "energy", "grad_norm", "step", "L"])
    csv_path = write_csv(frame, out_dir / f"{stem}.csv")
    written = [csv_path]
    script = plot_script("trace", csv_path.name) if plots else None
    if script is not None:
        script_path = out_dir / f"plot_{stem}.py"
        script_path.write_text(script)
        written.append(script_path)
    return written


def save_snapshot(field: DiscreteField, params: GrowthParams, path: Path) -> Path:
    payload = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "mesh": field.mesh.descriptor(),
        "params": params.model_dump(),
        "shape": list(field.values.shape),
        "values": base64.b64encode(field.values.astype("<f8").tobytes()).decode("ascii"),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_snapshot(path: Path) -> tuple[DiscreteField, GrowthParams]:
    """Rebuild the mesh from its descriptor and decode the node values."""
    snapshot = FieldSnapshot.model_validate_json(path.read_text())
    if snapshot.format_version != SNAPSHOT_FORMAT_VERSION:
        raise ConfigError(f"Unsupported snapshot version {snapshot.format_version} in {path}")
    mesh = mesh_from_descriptor(snapshot.mesh)
    values = np.frombuffer(base64.b64decode(snapshot.values), dtype="<f8")
    if values.size != snapshot.shape[0] * snapshot.shape[1]:
        raise MeshMismatchError(f"Snapshot {path} holds {values.size} values, expected {snapshot.shape}")
    return DiscreteField(mesh, values.reshape(snapshot.shape)), snapshot.params


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, files: list[Path]) -> Path:
    """List every artifact with its sha256; written after everything else."""
    entries = [
        {"path": path.relative_to(out_dir).as_posix(), "sha256": file_sha256(path)}
        for path in sorted(set(files))
    ]
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text(json.dumps({"files": entries}, indent=2) + "\n")
    logger.info(f"Wrote {len(entries)} artifacts to {out_dir}")
    return manifest
