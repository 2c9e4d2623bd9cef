"""Structured simplicial meshes of a box, P1 vector fields and quadrature."""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import cache, cached_property

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from scipy import sparse, special

from utils.constants import BALL_GUARD_SPACINGS
from utils.errors import (
    BadDomainError,
    BadStepError,
    BallOutsideDomainError,
    BallTooSmallError,
    DomainError,
    MeshMismatchError,
)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Kuhn triangulation of an axis-aligned box.

    Every cell is split into dim! simplices sharing the cell's main diagonal.
    Nodes are numbered in C order of their lattice index, so the first axis
    varies slowest.
    """

    dim: int
    lower: FloatArray
    upper: FloatArray
    cells_per_axis: int
    nodes: FloatArray = field(repr=False)
    elements: IntArray = field(repr=False)
    boundary_nodes: IntArray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def num_dofs(self) -> int:
        return self.num_nodes * self.dim

    @property
    def spacing(self) -> FloatArray:
        return (self.upper - self.lower) / self.cells_per_axis

    @property
    def lattice_shape(self) -> tuple[int, ...]:
        return (self.cells_per_axis + 1,) * self.dim

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def descriptor(self) -> dict[str, object]:
        return {
            "dim": self.dim,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "cells_per_axis": self.cells_per_axis,
        }

    @cached_property
    def _geometry(self) -> tuple[FloatArray, FloatArray]:
        coords = self.nodes[self.elements]
        jac = np.swapaxes(coords[:, 1:, :] - coords[:, :1, :], 1, 2)
        det = np.linalg.det(jac)
        inv = np.linalg.inv(jac)
        grads = np.empty((self.num_elements, self.dim + 1, self.dim))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return np.abs(det) / math.factorial(self.dim), grads

    @property
    def volumes(self) -> FloatArray:
        return self._geometry[0]

    @property
    def shape_gradients(self) -> FloatArray:
        """Gradients of the P1 hat functions, shape (elements, dim + 1, dim)."""
        return self._geometry[1]

    @cached_property
    def quadrature_cache(self) -> dict[int, Quadrature]:
        return {}

    @cached_property
    def barycenters(self) -> FloatArray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def node_element_incidence(self) -> sparse.csr_matrix:
        rows = self.elements.reshape(-1)
        cols = np.repeat(np.arange(self.num_elements), self.dim + 1)
        return sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)),
            shape=(self.num_nodes, self.num_elements),
        )

    @cached_property
    def interior_faces(self) -> tuple[IntArray, FloatArray, FloatArray]:
        """Pairs of elements sharing a face, the face measure and the centroid distance."""
        d = self.dim
        faces = []
        owners = []
        for omit in range(d + 1):
            keep = [k for k in range(d + 1) if k != omit]
            faces.append(np.sort(self.elements[:, keep], axis=1))
            owners.append(np.arange(self.num_elements))
        all_faces = np.concatenate(faces)
        all_owners = np.concatenate(owners)
        _, inverse, counts = np.unique(
            all_faces, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        shared = counts[inverse[order]] == 2
        idx = order[shared].reshape(-1, 2)
        pairs = all_owners[idx]
        face_nodes = self.nodes[all_faces[idx[:, 0]]]
        edges = face_nodes[:, 1:, :] - face_nodes[:, :1, :]
        gram = np.einsum("fai,fbi->fab", edges, edges)
        measure = np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(d - 1)
        distance = np.linalg.norm(
            self.barycenters[pairs[:, 0]] - self.barycenters[pairs[:, 1]], axis=1
        )
        return pairs, measure, distance

    @cached_property
    def gradient_operator(self) -> sparse.csr_matrix:
        """Sparse map from interleaved dofs to per-element gradients, row (e*d + i)*d + j."""
        d = self.dim
        n_elem = self.num_elements
        e, a, i, j = np.meshgrid(
            np.arange(n_elem), np.arange(d + 1), np.arange(d), np.arange(d), indexing="ij"
        )
        rows = (e * d + i) * d + j
        cols = self.elements[e, a] * d + i
        vals = self.shape_gradients[e, a, j]
        return sparse.csr_matrix(
            (vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
            shape=(n_elem * d * d, self.num_dofs),
        )

    @cached_property
    def jump_penalty(self) -> sparse.csr_matrix:
        """Sum over interior faces of |face| / distance * |jump of grad u|^2, as a matrix."""
        d = self.dim
        pairs, measure, distance = self.interior_faces
        n_faces = pairs.shape[0]
        block = d * d
        rows = np.repeat(np.arange(n_faces * block), 2)
        offsets = np.tile(np.arange(block), n_faces)
        left = pairs[:, 0].repeat(block) * block + offsets
        right = pairs[:, 1].repeat(block) * block + offsets
        cols = np.stack([left, right], axis=1).reshape(-1)
        vals = np.tile([1.0, -1.0], n_faces * block)
        diff = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(n_faces * block, self.num_elements * block)
        )
        jumps = diff @ self.gradient_operator
        weights = sparse.diags(np.repeat(measure / distance, block))
        return (jumps.T @ weights @ jumps).tocsr()

    def check_ball(self, ball: Ball) -> None:
        """Raise unless the ball's closure is interior and it meets the resolution guard."""
        if ball.center.shape != (self.dim,):
            raise BallOutsideDomainError(
                f"Ball center has {ball.center.size} coordinates, mesh has dim {self.dim}"
            )
        if np.any(ball.center - ball.radius <= self.lower) or np.any(
            ball.center + ball.radius >= self.upper
        ):
            raise BallOutsideDomainError(
                f"Ball B({ball.center.tolist()}, {ball.radius}) leaves the box interior"
            )
        guard = BALL_GUARD_SPACINGS * float(self.spacing.max())
        if ball.radius < guard * (1 - 1e-12):
            raise BallTooSmallError(
                f"Ball radius {ball.radius} below {BALL_GUARD_SPACINGS:g} mesh spacings ({guard:.4g})"
            )


@dataclass(frozen=True)
class Ball:
    center: FloatArray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise BallTooSmallError(f"Ball radius must be positive, got {self.radius}")

    def scaled(self, radius: float) -> Ball:
        return Ball(self.center, radius)


def _kuhn_simplices(dim: int) -> list[list[tuple[int, ...]]]:
    """Vertex offsets of the dim! simplices of the unit cube, each positively oriented."""
    simplices = []
    for perm in itertools.permutations(range(dim)):
        vertex = [0] * dim
        verts = [tuple(vertex)]
        for axis in perm:
            vertex[axis] = 1
            verts.append(tuple(vertex))
        jac = np.array([np.subtract(v, verts[0]) for v in verts[1:]]).T
        if np.linalg.det(jac) < 0:
            verts[1], verts[2] = verts[2], verts[1]
        simplices.append(verts)
    return simplices


def build_mesh(dim: int, box: Sequence[Sequence[float]], cells_per_axis: int) -> Mesh:
    """Build the structured simplicial mesh of box = (lower, upper).

    Raises:
        BadDomainError: The box is degenerate, has the wrong dimension, or
            cells_per_axis < 2.
    """
    if dim not in (2, 3):
        raise BadDomainError(f"Only dim 2 and 3 are supported, got {dim}")
    lower = np.asarray(box[0], dtype=float)
    upper = np.asarray(box[1], dtype=float)
    if lower.shape != (dim,) or upper.shape != (dim,):
        raise BadDomainError(f"Box corners must have {dim} coordinates")
    if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
        raise BadDomainError("Box corners must be finite")
    if np.any(upper <= lower):
        raise BadDomainError(f"Degenerate box {lower.tolist()} -> {upper.tolist()}")
    if cells_per_axis < 2:
        raise BadDomainError(f"cells_per_axis must be >= 2, got {cells_per_axis}")

    n = cells_per_axis
    shape = (n + 1,) * dim
    axes = [np.linspace(lower[k], upper[k], n + 1) for k in range(dim)]
    grid = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grid], axis=1)

    cells = np.stack(
        [c.reshape(-1) for c in np.meshgrid(*[np.arange(n)] * dim, indexing="ij")],
        axis=1,
    )
    elements = []
    for offsets in _kuhn_simplices(dim):
        verts = [
            np.ravel_multi_index(tuple((cells + np.array(off)).T), shape)
            for off in offsets
        ]
        elements.append(np.stack(verts, axis=1))
    # cell-major order: all simplices of a cell are contiguous
    elements_arr = np.stack(elements, axis=1).reshape(-1, dim + 1).astype(np.int64)

    lattice = np.stack(np.unravel_index(np.arange(nodes.shape[0]), shape), axis=1)
    on_boundary = np.any((lattice == 0) | (lattice == n), axis=1)

    mesh = Mesh(
        dim=dim,
        lower=lower,
        upper=upper,
        cells_per_axis=n,
        nodes=nodes,
        elements=elements_arr,
        boundary_nodes=np.flatnonzero(on_boundary).astype(np.int64),
    )
    logger.debug(
        f"Built {dim}D mesh: {mesh.num_nodes} nodes, {mesh.num_elements} simplices"
    )
    return mesh


def mesh_from_descriptor(descriptor: dict) -> Mesh:
    return build_mesh(
        int(descriptor["dim"]),
        (descriptor["lower"], descriptor["upper"]),
        int(descriptor["cells_per_axis"]),
    )


@dataclass(eq=False)
class DiscreteField:
    """Continuous piecewise-affine vector field given by its nodal values.

    Degrees of freedom are interleaved: dof index = node * dim + component.
    """

    mesh: Mesh
    values: FloatArray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        expected = (self.mesh.num_nodes, self.mesh.dim)
        if values.shape != expected:
            if values.size == self.mesh.num_dofs:
                values = values.reshape(expected)
            else:
                raise MeshMismatchError(
                    f"Field values have shape {values.shape}, mesh needs {expected}"
                )
        if not np.all(np.isfinite(values)):
            raise DomainError("Field values must be finite")
        self.values = values

    @property
    def dofs(self) -> FloatArray:
        return self.values.reshape(-1)

    def copy(self) -> DiscreteField:
        return DiscreteField(self.mesh, self.values.copy())

    def with_dofs(self, dofs: ArrayLike) -> DiscreteField:
        return DiscreteField(self.mesh, np.asarray(dofs, dtype=float))

    @classmethod
    def zeros(cls, mesh: Mesh) -> DiscreteField:
        return cls(mesh, np.zeros((mesh.num_nodes, mesh.dim)))


def interpolate(mesh: Mesh, func: Callable[[FloatArray], ArrayLike]) -> DiscreteField:
    """Nodal interpolant of func, which maps (N, dim) coordinates to (N, dim) values."""
    return DiscreteField(mesh, np.asarray(func(mesh.nodes), dtype=float))


def affine_field(mesh: Mesh, matrix: ArrayLike, shift: ArrayLike | None = None) -> DiscreteField:
    a = np.asarray(matrix, dtype=float)
    b = np.zeros(mesh.dim) if shift is None else np.asarray(shift, dtype=float)
    return DiscreteField(mesh, mesh.nodes @ a.T + b)


def element_gradients(field: DiscreteField) -> FloatArray:
    """Full displacement gradient per element, shape (elements, dim, dim)."""
    mesh = field.mesh
    return np.einsum(
        "eai,eaj->eij", field.values[mesh.elements], mesh.shape_gradients
    )


def element_strains(field: DiscreteField) -> FloatArray:
    grad = element_gradients(field)
    return 0.5 * (grad + np.swapaxes(grad, 1, 2))


def sym_gradient(field: DiscreteField, element_id: int) -> FloatArray:
    """Symmetrized gradient of the P1 field on one element."""
    if not 0 <= element_id < field.mesh.num_elements:
        raise MeshMismatchError(f"No element {element_id} on this mesh")
    return element_strains(field)[element_id]


@cache
def reference_rule(dim: int, order: int) -> tuple[FloatArray, FloatArray]:
    """Barycentric points and weights (summing to one) exact to the given degree."""
    if order <= 2:
        if dim == 2:
            a, b = 2.0 / 3.0, 1.0 / 6.0
            bary = np.array([[a, b, b], [b, a, b], [b, b, a]])
            return bary, np.full(3, 1.0 / 3.0)
        a, b = 0.5854101966249685, 0.1381966011250105
        bary = np.full((4, 4), b)
        np.fill_diagonal(bary, a)
        return bary, np.full(4, 0.25)
    # collapsed (Duffy) tensor rule: Gauss-Jacobi along each collapsed direction
    m = (order + 2) // 2
    rules = []
    for k in range(dim):
        x, w = special.roots_jacobi(m, dim - 1 - k, 0)
        rules.append(((x + 1.0) / 2.0, w / 2.0 ** (dim - k)))
    points = []
    weights = []
    for combo in itertools.product(*[range(m)] * dim):
        xi = [rules[k][0][combo[k]] for k in range(dim)]
        weight = math.prod(rules[k][1][combo[k]] for k in range(dim))
        coords = []
        remaining = 1.0
        for k in range(dim):
            coords.append(xi[k] * remaining)
            remaining *= 1.0 - xi[k]
        points.append([1.0 - sum(coords), *coords])
        weights.append(weight)
    w_arr = np.array(weights)
    return np.array(points), w_arr / w_arr.sum()


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Quadrature points of every element: bary (Q, dim+1), points (E, Q, dim), weights (E, Q)."""

    bary: FloatArray
    points: FloatArray
    weights: FloatArray

    def field_values(self, field: DiscreteField) -> FloatArray:
        """P1 field at the quadrature points, shape (E, Q, dim)."""
        return np.einsum("qa,eai->eqi", self.bary, field.values[field.mesh.elements])


def quadrature(mesh: Mesh, order: int = 2) -> Quadrature:
    cached = mesh.quadrature_cache.get(order)
    if cached is not None:
        return cached
    bary, w = reference_rule(mesh.dim, order)
    points = np.einsum("qa,ead->eqd", bary, mesh.nodes[mesh.elements])
    weights = mesh.volumes[:, None] * w[None, :]
    quad = Quadrature(bary=bary, points=points, weights=weights)
    mesh.quadrature_cache[order] = quad
    return quad


def ball_mask(quad: Quadrature, ball: Ball) -> NDArray[np.bool_]:
    """Quadrature points inside the closed ball, shape (E, Q)."""
    dist_sq = np.sum((quad.points - ball.center) ** 2, axis=-1)
    return dist_sq <= ball.radius**2 * (1 + 1e-12)


def ball_integral(
    values: ArrayLike, ball: Ball, mesh: Mesh, order: int = 2
) -> FloatArray:
    """Integral over the ball of per-quadrature-point values shaped (E, Q, ...).

    Per-element constants shaped (E, ...) are broadcast to the quadrature points.
    """
    mesh.check_ball(ball)
    quad = quadrature(mesh, order)
    vals = _at_points(np.asarray(values, dtype=float), quad)
    w = np.where(ball_mask(quad, ball), quad.weights, 0.0)
    return np.tensordot(w, vals, axes=([0, 1], [0, 1]))


def ball_volume(ball: Ball, mesh: Mesh, order: int = 2) -> float:
    mesh.check_ball(ball)
    quad = quadrature(mesh, order)
    return float(np.sum(quad.weights[ball_mask(quad, ball)]))


def ball_mean(values: ArrayLike, ball: Ball, mesh: Mesh, order: int = 2) -> FloatArray:
    """Mean over the ball, normalized by the measured ball volume."""
    volume = ball_volume(ball, mesh, order)
    if volume <= 0:
        raise BallTooSmallError("No quadrature point falls inside the ball")
    return ball_integral(values, ball, mesh, order) / volume


def _at_points(values: FloatArray, quad: Quadrature) -> FloatArray:
    n_elem, n_q = quad.weights.shape
    if values.ndim >= 2 and values.shape[:2] == (n_elem, n_q):
        return values
    if values.shape[:1] == (n_elem,):
        return np.broadcast_to(values[:, None, ...], (n_elem, n_q, *values.shape[1:]))
    raise MeshMismatchError(
        f"Values of shape {values.shape} match neither elements nor quadrature points"
    )


def difference_quotient(field: DiscreteField, direction: int, step: float) -> DiscreteField:
    """(v(x + h e_s) - v(x)) / h at nodes whose shift stays in the box, 0 elsewhere.

    Raises:
        BadStepError: step is zero or not a multiple of the spacing along direction.
    """
    mesh = field.mesh
    if not 0 <= direction < mesh.dim:
        raise BadStepError(f"Direction {direction} out of range for dim {mesh.dim}")
    h = float(mesh.spacing[direction])
    shift = step / h
    k = round(shift)
    if k == 0 or abs(shift - k) > 1e-9 * max(1.0, abs(shift)):
        raise BadStepError(f"Step {step} is not a nonzero multiple of spacing {h}")
    shape = mesh.lattice_shape
    lattice = np.stack(np.unravel_index(np.arange(mesh.num_nodes), shape), axis=1)
    target = lattice.copy()
    target[:, direction] += k
    inside = (target[:, direction] >= 0) & (target[:, direction] <= mesh.cells_per_axis)
    out = np.zeros_like(field.values)
    src = np.flatnonzero(inside)
    dst = np.ravel_multi_index(tuple(target[src].T), shape)
    out[src] = (field.values[dst] - field.values[src]) / step
    return DiscreteField(mesh, out)
