from pathlib import Path

import numpy as np
import pytest
import yaml

from utils.assembly import ProblemSpec, apply_dirichlet, make_problem
from utils.custom_types import GrowthParams
from utils.mesh import DiscreteField, Mesh, build_mesh
from utils.solver import Solution
from utils.tensors import ElasticTensor


def make_params(
    p: float = 2.0, mu: float = 0.0, kappa: float = 0.0, dim: int = 2
) -> GrowthParams:
    return GrowthParams(p=p, mu=mu, kappa=kappa, dim=dim)


def make_mesh(
    cells: int = 4,
    dim: int = 2,
    lower: float = 0.0,
    upper: float = 1.0,
) -> Mesh:
    return build_mesh(dim, ([lower] * dim, [upper] * dim), cells)


def make_spec(
    mesh: Mesh | None = None,
    params: GrowthParams | None = None,
    C: ElasticTensor | None = None,
    **kwargs,
) -> ProblemSpec:
    mesh = mesh or make_mesh()
    params = params or make_params(dim=mesh.dim)
    return make_problem(mesh, params, C, **kwargs)


def make_random_field(
    mesh: Mesh, seed: int = 0, scale: float = 0.1, offset: float = 0.0
) -> DiscreteField:
    rng = np.random.default_rng(seed)
    return DiscreteField(mesh, offset + scale * rng.standard_normal((mesh.num_nodes, mesh.dim)))


def make_feasible_field(spec: ProblemSpec, seed: int = 0, scale: float = 0.1) -> DiscreteField:
    """Random interior values with the problem's Dirichlet data imposed."""
    return apply_dirichlet(make_random_field(spec.mesh, seed, scale), spec)


def make_solution(
    field: DiscreteField, params: GrowthParams | None = None, **kwargs
) -> Solution:
    """Wrap a synthetic field so diagnostics can be run on it."""
    spec = make_spec(field.mesh, params or make_params(dim=field.mesh.dim), **kwargs)
    return Solution.from_field(field, spec)


def write_config(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def make_config_data(command: str = "solve", cells: int = 8, **blocks) -> dict:
    data = {
        "command": command,
        "problem": {
            "params": {"p": 2.0, "mu": 0.0, "kappa": 0.0, "dim": 2},
            "mesh": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "cells_per_axis": cells},
            "dirichlet": ["0.3*x1 + 0.1*x2", "0.1*x1 - 0.2*x2"],
        },
    }
    data.update(blocks)
    return data


@pytest.fixture
def params_factory():
    return make_params


@pytest.fixture
def mesh_factory():
    return make_mesh


@pytest.fixture
def spec_factory():
    return make_spec


@pytest.fixture
def field_factory():
    return make_random_field


@pytest.fixture
def solution_factory():
    return make_solution


@pytest.fixture
def config_factory(tmp_path):
    def factory(command: str = "solve", cells: int = 8, **blocks) -> Path:
        return write_config(tmp_path / "experiment.yaml", make_config_data(command, cells, **blocks))

    return factory
