"""Pointwise constitutive algebra.

Every function accepts a single symmetric matrix of shape (n, n) or a batch of
shape (..., n, n) and works elementwise over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, optimize

from utils.constants import QUAD_ABS_TOL, ROOT_TOL, TINY_SQUARED_NORM
from utils.custom_types import GrowthParams
from utils.errors import DomainError, UndefinedHessianError

FloatArray = NDArray[np.float64]

_QUAD_CHUNK = 4096


def sym_basis(dim: int) -> FloatArray:
    """Orthonormal basis of symmetric dim x dim matrices, shape (m, dim, dim)."""
    basis = []
    for i in range(dim):
        e = np.zeros((dim, dim))
        e[i, i] = 1.0
        basis.append(e)
    for i in range(dim):
        for j in range(i + 1, dim):
            e = np.zeros((dim, dim))
            e[i, j] = e[j, i] = np.sqrt(0.5)
            basis.append(e)
    return np.array(basis)


def mandel_matrix(entries: ArrayLike) -> FloatArray:
    """Matrix of a fourth-order tensor acting on the orthonormal symmetric basis."""
    tensor = np.asarray(entries, dtype=float)
    basis = sym_basis(tensor.shape[0])
    return np.einsum("aij,ijkl,bkl->ab", basis, tensor, basis)


def has_minor_and_major_symmetry(entries: ArrayLike, atol: float = 1e-12) -> bool:
    t = np.asarray(entries, dtype=float)
    return (
        np.allclose(t, t.transpose(2, 3, 0, 1), atol=atol)
        and np.allclose(t, t.transpose(1, 0, 2, 3), atol=atol)
        and np.allclose(t, t.transpose(0, 1, 3, 2), atol=atol)
    )


@dataclass(frozen=True, eq=False)
class ElasticTensor:
    """Fourth-order elastic moduli C_ijkl, positive definite on symmetric matrices.

    Attributes:
        entries: Array of shape (n, n, n, n) with major and minor symmetries.
        alpha: Coercivity constant, the smallest eigenvalue on symmetric matrices.
    """

    entries: FloatArray
    alpha: float = field(init=False)

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=float)
        n = entries.shape[0]
        if entries.shape != (n, n, n, n) or n not in (2, 3):
            raise DomainError(f"Elastic tensor must have shape (n,n,n,n), got {entries.shape}")
        if not has_minor_and_major_symmetry(entries):
            raise DomainError("Elastic tensor lacks major/minor symmetry")
        alpha = float(np.linalg.eigvalsh(mandel_matrix(entries))[0])
        if alpha <= 0:
            raise DomainError(f"Elastic tensor is not positive definite (alpha={alpha:.3e})")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "alpha", alpha)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, dim: int) -> ElasticTensor:
        """Identity on symmetric matrices, so that C xi . xi = |xi|^2."""
        delta = np.eye(dim)
        return cls(
            0.5
            * (
                np.einsum("ik,jl->ijkl", delta, delta)
                + np.einsum("il,jk->ijkl", delta, delta)
            )
        )

    @classmethod
    def isotropic(cls, dim: int, lame: float, shear: float) -> ElasticTensor:
        """C xi = lame * tr(xi) Id + 2 * shear * xi."""
        delta = np.eye(dim)
        return cls(
            lame * np.einsum("ij,kl->ijkl", delta, delta)
            + shear
            * (
                np.einsum("ik,jl->ijkl", delta, delta)
                + np.einsum("il,jk->ijkl", delta, delta)
            )
        )

    @classmethod
    def from_entries(cls, entries: ArrayLike) -> ElasticTensor:
        return cls(np.asarray(entries, dtype=float))

    def scaled(self, factor: float) -> ElasticTensor:
        return ElasticTensor(factor * self.entries)

    def apply(self, xi: ArrayLike) -> FloatArray:
        return np.einsum("ijkl,...kl->...ij", self.entries, np.asarray(xi, dtype=float))

    def contract(self, xi: ArrayLike) -> FloatArray:
        """C xi . xi, shape of the leading axes."""
        xi = np.asarray(xi, dtype=float)
        return np.einsum("...ij,...ij->...", self.apply(xi), xi)


@dataclass(frozen=True)
class BlowupParams:
    """Base strain, blow-up scale and limiting base strain of the rescaled energy."""

    base_strain: FloatArray
    scale: float
    limit_strain: FloatArray

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise DomainError(f"Blow-up scale must be positive, got {self.scale}")


def is_symmetric(xi: ArrayLike) -> bool:
    xi = np.asarray(xi, dtype=float)
    return bool(np.array_equal(xi, np.swapaxes(xi, -1, -2)))


def frob_sq(xi: ArrayLike) -> FloatArray:
    xi = np.asarray(xi, dtype=float)
    return np.einsum("...ij,...ij->...", xi, xi)


def shifted_power(base: ArrayLike, gamma: float) -> FloatArray:
    """base**gamma through exp/log, with 0 (or 1 when gamma == 0) below the floor.

    The zero branch is the convention used for stress and tangent at zero
    strain; callers that need a genuine limit must check for it themselves.
    """
    base = np.asarray(base, dtype=float)
    if gamma == 0:
        return np.ones_like(base)
    safe = np.maximum(base, TINY_SQUARED_NORM)
    out = np.exp(gamma * np.log(safe))
    return np.where(base > TINY_SQUARED_NORM, out, 0.0)


def energy_from_contraction(q: ArrayLike, params: GrowthParams) -> FloatArray:
    """(1/p)((q + mu)^{p/2} - mu^{p/2}) for q = C xi . xi >= 0."""
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    p, mu = params.p, params.mu
    if mu > 0:
        return mu ** (0.5 * p) * np.expm1(0.5 * p * np.log1p(q / mu)) / p
    return shifted_power(q, 0.5 * p) / p


def energy_density(xi: ArrayLike, params: GrowthParams, C: ElasticTensor) -> FloatArray:
    return energy_from_contraction(C.contract(xi), params)


def stress(xi: ArrayLike, params: GrowthParams, C: ElasticTensor) -> FloatArray:
    """Gradient of the energy density, (C xi . xi + mu)^{p/2-1} C xi, zero at zero."""
    c_xi = C.apply(xi)
    q = np.einsum("...ij,...ij->...", c_xi, np.asarray(xi, dtype=float))
    factor = shifted_power(np.maximum(q, 0.0) + params.mu, 0.5 * params.p - 1.0)
    return factor[..., None, None] * c_xi


def tangent(
    xi: ArrayLike,
    params: GrowthParams,
    C: ElasticTensor,
    zero_degenerate: bool = False,
) -> FloatArray:
    """Hessian of the energy density, shape (..., n, n, n, n).

    Args:
        xi: Strain(s).
        params: Growth parameters.
        C: Elastic tensor.
        zero_degenerate: For p < 2 and mu = 0, return a zero tensor at zero strain
            instead of raising.

    Raises:
        UndefinedHessianError: p < 2, mu = 0 and some strain is exactly zero.
    """
    xi = np.asarray(xi, dtype=float)
    c_xi = C.apply(xi)
    q = np.maximum(np.einsum("...ij,...ij->...", c_xi, xi), 0.0)
    base = q + params.mu
    degenerate = base <= TINY_SQUARED_NORM
    if params.p < 2 and np.any(degenerate) and not zero_degenerate:
        raise UndefinedHessianError
    lead = shifted_power(base, 0.5 * params.p - 1.0)
    second = (params.p - 2.0) * shifted_power(base, 0.5 * params.p - 2.0)
    # shifted_power's zero branch already yields a zero tensor at degenerate points
    return lead[..., None, None, None, None] * C.entries + second[
        ..., None, None, None, None
    ] * np.einsum("...ij,...kl->...ijkl", c_xi, c_xi)


def hessian_form(
    base: ArrayLike, eta: ArrayLike, params: GrowthParams, C: ElasticTensor
) -> FloatArray:
    """<Hess f(base) eta, eta> without forming the fourth-order tensor."""
    base = np.asarray(base, dtype=float)
    eta = np.asarray(eta, dtype=float)
    c_base = C.apply(base)
    q = np.maximum(np.einsum("...ij,...ij->...", c_base, base), 0.0) + params.mu
    c_eta_eta = C.contract(eta)
    cross = np.einsum("...ij,...ij->...", c_base, eta)
    return shifted_power(q, 0.5 * params.p - 1.0) * c_eta_eta + (
        params.p - 2.0
    ) * shifted_power(q, 0.5 * params.p - 2.0) * cross**2


def v_transform(xi: ArrayLike, params: GrowthParams) -> FloatArray:
    """V_mu(xi) = (mu + |xi|^2)^{(p-2)/4} xi."""
    xi = np.asarray(xi, dtype=float)
    factor = shifted_power(params.mu + frob_sq(xi), 0.25 * (params.p - 2.0))
    return factor[..., None, None] * xi


def v_norm_sq(xi: ArrayLike, params: GrowthParams) -> FloatArray:
    return frob_sq(v_transform(xi, params))


def _v_radial(t: float, params: GrowthParams) -> float:
    return float((params.mu + t * t) ** (0.25 * (params.p - 2.0)) * t)


def v_inverse(v: ArrayLike, params: GrowthParams) -> FloatArray:
    """Invert V_mu: the radial profile t -> (mu + t^2)^{(p-2)/4} t is strictly increasing."""
    v = np.asarray(v, dtype=float)
    norms = np.sqrt(frob_sq(v))
    if params.mu == 0:
        radii = shifted_power(norms, 2.0 / params.p)
    else:
        flat = norms.reshape(-1)
        radii_flat = np.zeros_like(flat)
        for k, target in enumerate(flat):
            if target == 0:
                continue
            hi = max(target, 1.0)
            while _v_radial(hi, params) < target:
                hi *= 2.0
            radii_flat[k] = optimize.brentq(
                lambda t, y=target: _v_radial(t, params) - y,
                0.0,
                hi,
                xtol=1e-300,
                rtol=4 * np.finfo(float).eps,
                maxiter=500,
            )
        radii = radii_flat.reshape(norms.shape)
    scale = np.divide(radii, norms, out=np.zeros_like(norms), where=norms > 0)
    return scale[..., None, None] * v


def shifted_derivative(a: ArrayLike, t: ArrayLike, params: GrowthParams) -> FloatArray:
    """phi_a'(t) = (mu + (a + t)^2)^{p/2-1} t."""
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    return shifted_power(params.mu + (a + t) ** 2, 0.5 * params.p - 1.0) * t


def shifted_second_derivative(
    a: ArrayLike, t: ArrayLike, params: GrowthParams
) -> FloatArray:
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    base = params.mu + (a + t) ** 2
    return shifted_power(base, 0.5 * params.p - 2.0) * (
        base + (params.p - 2.0) * (a + t) * t
    )


def shifted_n_function(a: ArrayLike, t: ArrayLike, params: GrowthParams) -> FloatArray:
    """phi_a(t) = int_0^t (mu + (a + s)^2)^{p/2-1} s ds.

    Closed forms for p = 2 and for mu = a = 0; otherwise adaptive Gauss-Kronrod
    quadrature of the integrand rescaled to [0, 1] and normalized by its value
    at the upper end.
    """
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    if np.any(a < 0) or np.any(t < 0):
        raise DomainError("shifted N-function needs a, t >= 0")
    p, mu = params.p, params.mu
    out = np.zeros(a.shape)
    if p == 2:
        return 0.5 * t**2
    closed = (t == 0) | ((mu == 0) & (a == 0))
    out[closed] = t[closed] ** p / p
    idx = np.flatnonzero(~closed.reshape(-1))
    if idx.size == 0:
        return out
    a_flat = a.reshape(-1)[idx]
    t_flat = t.reshape(-1)[idx]
    values = np.empty(idx.size)
    for start in range(0, idx.size, _QUAD_CHUNK):
        sl = slice(start, start + _QUAD_CHUNK)
        aa, tt = a_flat[sl], t_flat[sl]
        top = mu + (aa + tt) ** 2
        expo = 0.5 * p - 1.0

        def integrand(x: float, aa=aa, tt=tt, top=top) -> FloatArray:
            return ((mu + (aa + tt * x) ** 2) / top) ** expo * x

        integral, _ = integrate.quad_vec(
            integrand, 0.0, 1.0, epsabs=QUAD_ABS_TOL * 1e-2, epsrel=1e-12, norm="max"
        )
        values[sl] = tt**2 * top**expo * integral
    out.reshape(-1)[idx] = values
    return out


def shifted_conjugate(a: ArrayLike, s: ArrayLike, params: GrowthParams) -> FloatArray:
    """Polar phi_a*(s) = s t* - phi_a(t*) with phi_a'(t*) = s.

    The root is bracketed by doubling, narrowed by bisection and polished by
    Newton steps on the strictly increasing phi_a'.
    """
    a, s = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(s, dtype=float))
    if np.any(a < 0) or np.any(s < 0):
        raise DomainError("shifted conjugate needs a, s >= 0")
    t_star = conjugate_argument(a, s, params)
    return s * t_star - shifted_n_function(a, t_star, params)


def conjugate_argument(a: ArrayLike, s: ArrayLike, params: GrowthParams) -> FloatArray:
    """Solve phi_a'(t) = s for t, elementwise."""
    a, s = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(s, dtype=float))
    lo = np.zeros(a.shape)
    hi = np.maximum(s, 1.0)
    for _ in range(2000):
        short = shifted_derivative(a, hi, params) < s
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = shifted_derivative(a, mid, params) < s
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= ROOT_TOL * np.maximum(hi, 1e-300)):
            break
    t = 0.5 * (lo + hi)
    for _ in range(3):
        slope = shifted_second_derivative(a, t, params)
        step = np.divide(
            shifted_derivative(a, t, params) - s,
            slope,
            out=np.zeros_like(t),
            where=slope > 0,
        )
        t = np.clip(t - step, lo, hi)
    return np.where(s == 0, 0.0, t)


def ptilde(lam: float, params: GrowthParams) -> float:
    """Improved integrability exponent lam p (p - 2) / (lam (p - 1) - 1)."""
    p = params.p
    if p < 2:
        raise DomainError(f"ptilde needs p >= 2, got {p}")
    if p == 2:
        if lam != 1:
            raise DomainError("for p = 2 the only admissible lambda is 1")
        return p
    if not 1.0 / (p - 1.0) < lam <= 1.0:
        raise DomainError(f"lambda={lam} outside (1/(p-1), 1] for p={p}")
    return lam * p * (p - 2.0) / (lam * (p - 1.0) - 1.0)


def lambda_for_exponent(target: float, params: GrowthParams) -> float:
    """Solve ptilde(lambda) = target on (1/(p-1), 1]."""
    p = params.p
    if p <= 2:
        raise DomainError(f"lambda_for_exponent needs p > 2, got {p}")
    if target < p:
        raise DomainError(f"target exponent {target} is below ptilde(1) = {p}")
    if target == p:
        return 1.0
    left = 1.0 / (p - 1.0)
    return float(
        optimize.brentq(
            lambda lam: ptilde(lam, params) - target,
            left * (1.0 + 1e-15) + 1e-300,
            1.0,
            xtol=ROOT_TOL,
            rtol=4 * np.finfo(float).eps,
        )
    )


def lambda0(params: GrowthParams) -> float:
    """Smallest admissible lambda: ptilde(lambda0) = p* when p < n, else 1/(p-1)."""
    p, n = params.p, params.dim
    if p < 2:
        raise DomainError(f"lambda0 needs p >= 2, got {p}")
    if p == 2:
        return 1.0
    if p < n:
        return lambda_for_exponent(n * p / (n - p), params)
    return 1.0 / (p - 1.0)


def blowup_integrand(
    xi: ArrayLike, bp: BlowupParams, params: GrowthParams, C: ElasticTensor
) -> FloatArray:
    """Second-order Taylor rescaling of the energy density around bp.base_strain.

    Evaluated through the integral remainder
    int_0^1 <Hess f(A + t lam xi) xi, xi> (1 - t) dt, which avoids the
    cancellation of the difference quotient for small scales.
    """
    if params.mu <= 0:
        raise DomainError("blow-up functional needs mu > 0")
    xi = np.asarray(xi, dtype=float)
    base = np.asarray(bp.base_strain, dtype=float)

    def integrand(t: float) -> FloatArray:
        return hessian_form(base + t * bp.scale * xi, xi, params, C) * (1.0 - t)

    value, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12)
    return np.asarray(value)


def blowup_difference_quotient(
    xi: ArrayLike, bp: BlowupParams, params: GrowthParams, C: ElasticTensor
) -> FloatArray:
    """Direct evaluation of the rescaled energy; cross-check for moderate scales."""
    if params.mu <= 0:
        raise DomainError("blow-up functional needs mu > 0")
    xi = np.asarray(xi, dtype=float)
    base = np.asarray(bp.base_strain, dtype=float)
    lam = bp.scale
    f_shift = energy_density(base + lam * xi, params, C)
    f_base = energy_density(base, params, C)
    linear = np.einsum("...ij,...ij->...", stress(base, params, C), xi)
    return (f_shift - f_base - lam * linear) / lam**2


def blowup_limit(
    xi: ArrayLike, bp: BlowupParams, params: GrowthParams, C: ElasticTensor
) -> FloatArray:
    """Frozen quadratic limit 1/2 <Hess f(limit_strain) xi, xi>."""
    if params.mu <= 0:
        raise DomainError("blow-up functional needs mu > 0")
    return 0.5 * hessian_form(bp.limit_strain, xi, params, C)


def random_symmetric(
    rng: np.random.Generator, count: int, dim: int, scales: tuple[float, ...]
) -> FloatArray:
    """Gaussian symmetric matrices spread over scales, with structured specials mixed in.

    The first slots are axis-aligned (single diagonal entry) and rank-one
    matrices; the rest are symmetrized Gaussians at a scale drawn per sample.
    """
    g = rng.standard_normal((count, dim, dim))
    out = 0.5 * (g + np.swapaxes(g, -1, -2))
    n_special = min(count // 5, 2 * dim * len(scales) * 4)
    for k in range(n_special):
        scale = scales[k % len(scales)]
        if k % 2 == 0:
            m = np.zeros((dim, dim))
            axis = (k // 2) % dim
            m[axis, axis] = scale * (1.0 if k % 4 == 0 else -1.0)
        else:
            v = rng.standard_normal(dim)
            m = scale * np.outer(v, v) / max(float(v @ v), 1e-300)
        out[k] = m
    picks = rng.integers(0, len(scales), size=count)
    factors = np.asarray(scales)[picks]
    factors[:n_special] = 1.0
    out *= factors[:, None, None]
    if n_special:
        logger.trace(f"Drew {count} samples ({n_special} structured) in dim {dim}")
    return out
