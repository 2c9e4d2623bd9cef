"""Randomized audits of the pointwise inequalities behind the regularity theory.

Every audit draws random symmetric matrices, evaluates one inequality and
reports the empirical range of the relevant ratio. Only explicit constants and
exact identities are asserted; everything else is reported as a range.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy import integrate, special

from utils.constants import AUDIT_REL_TOL, POLAR_IDENTITY_TOL
from utils.custom_types import AuditRecord, AuditSpec, GrowthParams, InequalityAudit
from utils.errors import DomainError, UnsupportedLemmaError
from utils.tensors import (
    BlowupParams,
    ElasticTensor,
    blowup_integrand,
    blowup_limit,
    energy_density,
    frob_sq,
    hessian_form,
    random_symmetric,
    shifted_conjugate,
    shifted_derivative,
    shifted_n_function,
    shifted_power,
    stress,
    v_norm_sq,
    v_transform,
)

FloatArray = NDArray[np.float64]

_JACOBI_NODES = 64
_NEAR_SINGULAR = 0.15
# quadrature-backed audits cannot be sharper than the N-function quadrature
_SHIFTED_REL_TOL = 1e-8


@dataclass
class _Partial:
    """Order-independent min/max summary of one chunk of samples."""

    count: int
    lo: float
    hi: float
    lo_witness: dict
    hi_witness: dict
    worst_violation: float = -np.inf
    violation_witness: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _as_record(samples: dict[str, FloatArray], k: int) -> dict:
    record = {}
    for name, arr in samples.items():
        value = np.asarray(arr)[k]
        record[name] = value.tolist() if np.ndim(value) else float(value)
    return record


def _summarize(
    ratios: FloatArray,
    samples: dict[str, FloatArray],
    violation: FloatArray | None = None,
) -> _Partial:
    ratios = np.asarray(ratios, dtype=float)
    finite = np.isfinite(ratios)
    if not finite.any():
        raise DomainError("Audit produced no finite ratio")
    masked_lo = np.where(finite, ratios, np.inf)
    masked_hi = np.where(finite, ratios, -np.inf)
    k_lo, k_hi = int(np.argmin(masked_lo)), int(np.argmax(masked_hi))
    part = _Partial(
        count=int(ratios.size),
        lo=float(ratios[k_lo]),
        hi=float(ratios[k_hi]),
        lo_witness={**_as_record(samples, k_lo), "ratio": float(ratios[k_lo])},
        hi_witness={**_as_record(samples, k_hi), "ratio": float(ratios[k_hi])},
    )
    if violation is not None:
        violation = np.nan_to_num(np.asarray(violation, dtype=float), nan=np.inf)
        k_v = int(np.argmax(violation))
        part.worst_violation = float(violation[k_v])
        part.violation_witness = {
            **_as_record(samples, k_v),
            "ratio": float(ratios[k_v]),
            "excess": float(violation[k_v]),
        }
    return part


def _rel_excess(lhs: FloatArray, rhs: FloatArray) -> FloatArray:
    """Relative amount by which lhs <= rhs fails; <= 0 when it holds."""
    scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1e-300)
    return (lhs - rhs) / scale


def _safe_div(num: FloatArray, den: FloatArray) -> FloatArray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.full(np.broadcast(num, den).shape, np.nan), where=den > 0)


def _pairs(rng: np.random.Generator, spec: AuditSpec, count: int) -> tuple[FloatArray, FloatArray]:
    dim = spec.params.dim
    return (
        random_symmetric(rng, count, dim, spec.scales),
        random_symmetric(rng, count, dim, spec.scales),
    )


def _log_uniform(rng: np.random.Generator, count: int, lo: float, hi: float) -> FloatArray:
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=count))


def weight_integral(
    xi: FloatArray, eta: FloatArray, mu: float, gamma: float, r: float
) -> FloatArray:
    """int_0^1 (mu + |eta + t(xi - eta)|^2)^gamma (1 - t)^r dt, per sample.

    Gauss-Jacobi with weight (1 - t)^r when the base stays away from zero on
    [0, 1]; adaptive quadrature split at the minimizer otherwise.
    """
    d = (xi - eta).reshape(len(xi), -1)
    e = eta.reshape(len(eta), -1)
    qa = np.sum(d * d, axis=1)
    qb = 2.0 * np.sum(d * e, axis=1)
    qc = np.sum(e * e, axis=1)
    x, w = special.roots_jacobi(_JACOBI_NODES, r, 0.0)
    t = 0.5 * (x + 1.0)
    w = w / 2.0 ** (r + 1.0)
    base = mu + qa[:, None] * t**2 + qb[:, None] * t + qc[:, None]
    out = np.sum(w * shifted_power(base, gamma), axis=1)

    t0 = np.clip(np.divide(-qb, 2 * qa, out=np.zeros_like(qa), where=qa > 0), 0.0, 1.0)
    base_min = mu + qa * t0**2 + qb * t0 + qc
    base_max = np.maximum(mu + qc, mu + qa + qb + qc)
    delta = np.sqrt(np.divide(base_min, base_max, out=np.zeros_like(qa), where=base_max > 0))
    if gamma < 0:
        for k in np.flatnonzero(delta < _NEAR_SINGULAR):
            out[k] = _weight_integral_adaptive(qa[k], qb[k], qc[k], mu, gamma, r, t0[k], base_min[k])
    return out


def _weight_integral_adaptive(
    qa: float, qb: float, qc: float, mu: float, gamma: float, r: float, t0: float, base_min: float
) -> float:
    if base_min <= 1e-300 * max(1.0, qa) and qa > 0:
        # exact zero of the base: the integrand is qa^gamma |t - t0|^(2 gamma) (1 - t)^r
        total = 0.0
        if t0 > 0:
            val, _ = integrate.quad(
                lambda t: (1.0 - t) ** r, 0.0, t0, weight="alg", wvar=(0.0, 2 * gamma)
            )
            total += val
        if t0 < 1:
            val, _ = integrate.quad(
                lambda _t: 1.0, t0, 1.0, weight="alg", wvar=(2 * gamma, r)
            )
            total += val
        return float(qa**gamma * total)

    def integrand(t: float) -> float:
        return (mu + qa * t * t + qb * t + qc) ** gamma * (1.0 - t) ** r

    points = [t0] if 0 < t0 < 1 else None
    val, _ = integrate.quad(integrand, 0.0, 1.0, points=points, limit=400, epsabs=0.0, epsrel=1e-11)
    return float(val)


def _integral_weight_ratio(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    mu, gamma, r = spec.params.mu, spec.gamma, spec.r
    num = weight_integral(xi, eta, mu, gamma, r)
    den = shifted_power(mu + frob_sq(xi) + frob_sq(eta), gamma)
    ratio = _safe_div(num, den)
    c2 = 1.0 if gamma >= 0 else 8.0 / (2.0 * gamma + 1.0)
    return _summarize(ratio, {"xi": xi, "eta": eta}, _rel_excess(ratio, np.full(count, c2)))


def _monotone_power_difference(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    mu, gamma = spec.params.mu, spec.gamma
    fx = shifted_power(mu + frob_sq(xi), gamma)[:, None, None] * xi
    fe = shifted_power(mu + frob_sq(eta), gamma)[:, None, None] * eta
    num = np.sqrt(frob_sq(fx - fe))
    den = shifted_power(mu + frob_sq(xi) + frob_sq(eta), gamma) * np.sqrt(frob_sq(xi - eta))
    ratio = _safe_div(num, den)
    c2 = 1.0 if gamma >= 0 else 8.0 / (2.0 * gamma + 1.0)
    c4 = max(1.0, 1.0 + 2.0 * gamma) * c2
    return _summarize(ratio, {"xi": xi, "eta": eta}, _rel_excess(ratio, np.full(count, c4)))


def _v_difference_bounds(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    norms = np.sqrt(frob_sq(eta))
    over = norms > spec.eta_bound
    eta[over] *= (spec.eta_bound / norms[over])[:, None, None]
    params = spec.params
    num = np.sqrt(v_norm_sq(xi - eta, params))
    den = np.sqrt(frob_sq(v_transform(xi, params) - v_transform(eta, params)))
    return _summarize(_safe_div(num, den), {"xi": xi, "eta": eta})


def _v_quasi_triangle(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    params = spec.params
    num = np.sqrt(v_norm_sq(xi + eta, params))
    den = np.sqrt(v_norm_sq(xi, params)) + np.sqrt(v_norm_sq(eta, params))
    return _summarize(_safe_div(num, den), {"xi": xi, "eta": eta})


def _v_power_bounds(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, _ = _pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    v2 = v_norm_sq(xi, spec.params)
    n2 = frob_sq(xi)
    xp = shifted_power(n2, 0.5 * p)
    if p < 2:
        lower = shifted_power(2.0 * np.maximum(mu, n2), 0.5 * p - 1.0) * n2
        upper = xp
    else:
        lower = xp
        mu_term = mu ** (0.5 * p - 1.0) if mu > 0 else (1.0 if p == 2 else 0.0)
        upper = 2.0 ** (0.5 * p - 1.0) * (mu_term * n2 + xp)
    violation = np.maximum(_rel_excess(lower, v2), _rel_excess(v2, upper))
    return _summarize(_safe_div(v2, xp), {"xi": xi}, violation)


def _v_convexity(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    if p >= 2:

        def convex(m: FloatArray) -> FloatArray:
            return v_norm_sq(m, spec.params)

        sandwich = None
    else:

        def convex(m: FloatArray) -> FloatArray:
            n2 = frob_sq(m)
            den = mu ** (0.5 * (2.0 - p)) + shifted_power(n2, 0.5 * (2.0 - p))
            return _safe_div(n2, den)

        sandwich = convex(xi)
    mid = convex(0.5 * (xi + eta))
    avg = 0.5 * (convex(xi) + convex(eta))
    violation = _rel_excess(mid, avg)
    if sandwich is not None:
        v2 = v_norm_sq(xi, spec.params)
        violation = np.maximum(violation, _rel_excess(np.nan_to_num(sandwich), v2))
        ratio = _safe_div(v2, sandwich)
    else:
        ratio = _safe_div(mid, avg)
    return _summarize(ratio, {"xi": xi, "eta": eta}, violation)


def _v_sandwich(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, _ = _pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    n2 = frob_sq(xi)
    full = shifted_power(mu + n2, 0.5 * p)
    v2 = v_norm_sq(xi, spec.params)
    identity = v2 + mu * shifted_power(mu + n2, 0.5 * p - 1.0)
    violation = np.maximum(
        _rel_excess(v2, full), np.abs(identity - full) / np.maximum(full, 1e-300) - 1e-12
    )
    return _summarize(_safe_div(v2, full), {"xi": xi}, violation)


def _mean_minimality(rng, spec: AuditSpec, count: int) -> _Partial:
    """Discrete ball sums: mean of V beats V of the mean strain."""
    points = 8
    dim = spec.params.dim
    strains = random_symmetric(rng, count * points, dim, spec.scales).reshape(count, points, dim, dim)
    # a common offset per ball keeps the samples clustered like a real strain field
    strains += random_symmetric(rng, count, dim, spec.scales)[:, None]
    weights = rng.uniform(0.1, 1.0, size=(count, points))
    weights /= weights.sum(axis=1, keepdims=True)
    v = v_transform(strains, spec.params)
    v_mean = np.einsum("bk,bkij->bij", weights, v)
    e_mean = np.einsum("bk,bkij->bij", weights, strains)
    left = np.einsum("bk,bk->b", weights, frob_sq(v - v_mean[:, None]))
    right = np.einsum("bk,bk->b", weights, frob_sq(v - v_transform(e_mean, spec.params)[:, None]))
    violation = _rel_excess(left, right) - 1e-12
    return _summarize(_safe_div(right, left), {"mean_strain": e_mean}, violation)


def _hessian_bounds(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    C = ElasticTensor.identity(spec.params.dim)
    form = hessian_form(xi, eta, spec.params, C)
    scale = shifted_power(mu + frob_sq(xi), 0.5 * p - 1.0) * frob_sq(eta)
    ratio = _safe_div(form, scale)
    lo, hi = min(1.0, p - 1.0), max(1.0, p - 1.0)
    violation = np.maximum(_rel_excess(np.full(count, lo), ratio), _rel_excess(ratio, np.full(count, hi)))
    return _summarize(ratio, {"xi": xi, "eta": eta}, violation - AUDIT_REL_TOL)


def _growth_bounds(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, _ = _pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    C = ElasticTensor.identity(spec.params.dim)
    n2 = frob_sq(xi)
    weight = shifted_power(mu + n2, 0.5 * p - 1.0)
    energy_ratio = _safe_div(energy_density(xi, spec.params, C), weight * n2)
    stress_ratio = _safe_div(np.sqrt(frob_sq(stress(xi, spec.params, C))), weight * np.sqrt(n2))
    part = _summarize(energy_ratio, {"xi": xi})
    part.extra = {
        "stress_ratio_lo": float(np.nanmin(stress_ratio)),
        "stress_ratio_hi": float(np.nanmax(stress_ratio)),
    }
    return part


def _scalar_pairs(rng, spec: AuditSpec, count: int) -> tuple[FloatArray, FloatArray]:
    """Shift a = |xi| and argument t = |xi - eta| from random matrix pairs."""
    xi, eta = _pairs(rng, spec, count)
    return np.sqrt(frob_sq(xi)), np.sqrt(frob_sq(xi - eta))


def _shifted_growth_bounds(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    p, mu = spec.params.p, spec.params.mu
    phi = shifted_n_function(a, t, spec.params)
    tp = t**p / p
    top = shifted_power(mu + (a + t) ** 2, 0.5 * p - 1.0) * t**2 / 2.0
    checks = [
        _rel_excess(phi, (shifted_power(mu + (a + t) ** 2, 0.5 * p) - shifted_power(mu + a**2, 0.5 * p)) / p)
    ]
    if p < 2:
        checks += [_rel_excess(top, phi), _rel_excess(phi, tp)]
        base = mu + a**2
        has_bound = base > 0
        n3 = np.where(has_bound, shifted_power(base, 0.5 * p - 1.0) * t**2 / 2.0, np.inf)
        checks.append(np.where(has_bound, _rel_excess(phi, n3), -np.inf))
    else:
        checks += [_rel_excess(tp, phi), _rel_excess(phi, top)]
    violation = np.max(np.stack(checks), axis=0) - _SHIFTED_REL_TOL
    return _summarize(_safe_div(phi, tp), {"a": a, "t": t}, violation)


def _shifted_doubling(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    lam = _log_uniform(rng, count, 1.0, 10.0)
    p = spec.params.p
    phi = shifted_n_function(a, t, spec.params)
    phi_scaled = shifted_n_function(a, lam * t, spec.params)
    lower = lam ** min(p, 2.0) * phi
    upper = lam ** max(p, 2.0) * phi
    violation = np.maximum(_rel_excess(lower, phi_scaled), _rel_excess(phi_scaled, upper))
    ratio = _safe_div(np.log(_safe_div(phi_scaled, phi)), np.log(lam))
    return _summarize(
        np.where(lam > 1, ratio, np.nan), {"a": a, "t": t, "lam": lam}, violation - _SHIFTED_REL_TOL
    )


def _conjugate_doubling(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    s = shifted_derivative(a, t, spec.params)
    lam = _log_uniform(rng, count, 1.0, 10.0)
    p = spec.params.p
    q = p / (p - 1.0)
    conj = shifted_conjugate(a, s, spec.params)
    conj_scaled = shifted_conjugate(a, lam * s, spec.params)
    lower = lam ** min(q, 2.0) * conj
    upper = lam ** max(q, 2.0) * conj
    violation = np.maximum(_rel_excess(lower, conj_scaled), _rel_excess(conj_scaled, upper))
    ratio = _safe_div(np.log(_safe_div(conj_scaled, conj)), np.log(lam))
    return _summarize(
        np.where(lam > 1, ratio, np.nan), {"a": a, "s": s, "lam": lam}, violation - _SHIFTED_REL_TOL
    )


def _shifted_convexity(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    phi = shifted_n_function(a, t, spec.params)
    lower = 0.5 * t * shifted_derivative(a, 0.5 * t, spec.params)
    upper = t * shifted_derivative(a, t, spec.params)
    violation = np.maximum(_rel_excess(lower, phi), _rel_excess(phi, upper))
    return _summarize(_safe_div(phi, upper), {"a": a, "t": t}, violation - _SHIFTED_REL_TOL)


def _young_uniform(rng, spec: AuditSpec, count: int) -> _Partial:
    """Smallest C with s t <= delta phi*(s) + C phi(t) on each sample."""
    a, t = _scalar_pairs(rng, spec, count)
    _, t2 = _scalar_pairs(rng, spec, count)
    s = shifted_derivative(a, t2, spec.params)
    delta = 0.5
    phi = shifted_n_function(a, t, spec.params)
    conj = shifted_conjugate(a, s, spec.params)
    needed = _safe_div(np.maximum(s * t - delta * conj, 0.0), phi)
    return _summarize(needed, {"a": a, "t": t, "s": s})


def _polar_identity(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    s = shifted_derivative(a, t, spec.params)
    expected = s * t - shifted_n_function(a, t, spec.params)
    conj = shifted_conjugate(a, s, spec.params)
    err = np.abs(conj - expected) / np.maximum(np.abs(expected), 1e-300)
    ratio = _safe_div(conj, expected)
    return _summarize(ratio, {"a": a, "t": t}, err - POLAR_IDENTITY_TOL)


def _conjugate_equivalence(rng, spec: AuditSpec, count: int) -> _Partial:
    a, t = _scalar_pairs(rng, spec, count)
    conj = shifted_conjugate(a, shifted_derivative(a, t, spec.params), spec.params)
    return _summarize(_safe_div(conj, shifted_n_function(a, t, spec.params)), {"a": a, "t": t})


def _shifted_v_comparison(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    keep = np.sqrt(frob_sq(xi)) <= spec.max_norm
    xi, eta = xi[keep], eta[keep]
    a = np.sqrt(frob_sq(xi))
    phi = shifted_n_function(a, np.sqrt(frob_sq(xi - eta)), spec.params)
    dv = frob_sq(v_transform(xi, spec.params) - v_transform(eta, spec.params))
    return _summarize(_safe_div(phi, dv), {"xi": xi, "eta": eta})


def _bregman_v_equivalence(rng, spec: AuditSpec, count: int) -> _Partial:
    xi, eta = _pairs(rng, spec, count)
    keep = (np.sqrt(frob_sq(xi)) <= spec.max_norm) & (np.sqrt(frob_sq(eta)) <= spec.max_norm)
    xi, eta = xi[keep], eta[keep]
    C = ElasticTensor.identity(spec.params.dim)
    bregman = (
        energy_density(eta, spec.params, C)
        - energy_density(xi, spec.params, C)
        - np.einsum("kij,kij->k", stress(xi, spec.params, C), eta - xi)
    )
    dv = frob_sq(v_transform(eta, spec.params) - v_transform(xi, spec.params))
    return _summarize(_safe_div(bregman, dv), {"xi": xi, "eta": eta})


def _blowup_base(rng, spec: AuditSpec, count: int) -> tuple[FloatArray, FloatArray, FloatArray]:
    dim = spec.params.dim
    base = random_symmetric(rng, count, dim, (1.0,))
    xi, eta = random_symmetric(rng, count, dim, (1.0,)), random_symmetric(rng, count, dim, (1.0,))
    return base, xi, eta


def _blowup_sandwich(rng, spec: AuditSpec, count: int) -> _Partial:
    base, xi, _ = _blowup_base(rng, spec, count)
    lam = _log_uniform(rng, count, 1e-4, 1.0)
    C = ElasticTensor.identity(spec.params.dim)
    values = np.empty(count)
    for k in range(count):
        bp = BlowupParams(base[k], float(lam[k]), base[k])
        values[k] = float(blowup_integrand(xi[k], bp, spec.params, C))
    scaled_v = v_norm_sq(lam[:, None, None] * xi, spec.params) / lam**2
    return _summarize(_safe_div(values, scaled_v), {"base": base, "xi": xi, "lam": lam})


def _blowup_monotonicity(rng, spec: AuditSpec, count: int) -> _Partial:
    base, xi, eta = _blowup_base(rng, spec, count)
    lam = _log_uniform(rng, count, 1e-3, 1.0)
    C = ElasticTensor.identity(spec.params.dim)
    diff = np.empty(count)
    for k in range(count):
        bp = BlowupParams(base[k], float(lam[k]), base[k])
        diff[k] = float(
            blowup_integrand(xi[k], bp, spec.params, C) - blowup_integrand(eta[k], bp, spec.params, C)
        )
    l3 = lam[:, None, None]
    linear = np.einsum(
        "kij,kij->k",
        stress(base + l3 * eta, spec.params, C) - stress(base, spec.params, C),
        xi - eta,
    ) / lam
    dv = frob_sq(v_transform(base + l3 * xi, spec.params) - v_transform(base + l3 * eta, spec.params))
    ratio = _safe_div((diff - linear) * lam**2, dv)
    return _summarize(ratio, {"base": base, "xi": xi, "eta": eta, "lam": lam})


def _blowup_convergence(rng, spec: AuditSpec, count: int) -> _Partial:
    """sup over |xi| <= 10 of |F_h - F_inf| along lam = 2^-k with base strains converging."""
    dim = spec.params.dim
    C = ElasticTensor.identity(dim)
    limit = random_symmetric(rng, 1, dim, (1.0,))[0]
    drift = random_symmetric(rng, 1, dim, (1.0,))[0]
    xi = random_symmetric(rng, count, dim, (1.0,))
    norms = np.sqrt(frob_sq(xi))
    xi *= (10.0 * rng.uniform(0.0, 1.0, size=count) ** (1.0 / (dim * (dim + 1) / 2)) / norms)[
        :, None, None
    ]
    lams = 2.0 ** -np.arange(1, 11, dtype=float)
    sups = []
    for lam in lams:
        bp = BlowupParams(limit + lam**2 * drift, float(lam), limit)
        gap = np.abs(blowup_integrand(xi, bp, spec.params, C) - blowup_limit(xi, bp, spec.params, C))
        sups.append(float(np.max(gap)))
    sups_arr = np.array(sups)
    scale = max(sups_arr[0], 1e-300)
    # slot 0 checks the endpoints, slot k > 0 the step from lam_{k-1} to lam_k
    steps = np.diff(sups_arr) / scale
    violation = np.concatenate([[(sups_arr[-1] - sups_arr[0]) / scale], steps])
    part = _summarize(sups_arr, {"lam": lams}, violation)
    part.extra = {
        "lambdas": lams.tolist(),
        "sup_gaps": sups,
        "monotone": bool(np.all(steps <= AUDIT_REL_TOL)),
    }
    return part


@dataclass(frozen=True)
class Lemma:
    """One audited statement: whether it is asserted and how to sample it."""

    lemma_id: str
    description: str
    hard: bool
    runner: Callable[[np.random.Generator, AuditSpec, int], _Partial]
    needs_positive_mu: bool = False
    bounds: Callable[[AuditSpec], tuple[float | None, float | None]] = lambda _spec: (None, None)


def _weight_bounds(spec: AuditSpec) -> tuple[float | None, float | None]:
    return None, 1.0 if spec.gamma >= 0 else 8.0 / (2.0 * spec.gamma + 1.0)


def _power_difference_bounds(spec: AuditSpec) -> tuple[float | None, float | None]:
    c2 = _weight_bounds(spec)[1] or 1.0
    return None, max(1.0, 1.0 + 2.0 * spec.gamma) * c2


def _hessian_ratio_bounds(spec: AuditSpec) -> tuple[float | None, float | None]:
    p = spec.params.p
    return min(1.0, p - 1.0), max(1.0, p - 1.0)


LEMMAS: dict[str, Lemma] = {
    lemma.lemma_id: lemma
    for lemma in (
        Lemma("integral_weight_ratio", "weighted segment integral of (mu+|.|^2)^gamma vs endpoints", True, _integral_weight_ratio, bounds=_weight_bounds),
        Lemma("monotone_power_difference", "difference of (mu+|.|^2)^gamma . vs |xi - eta|", True, _monotone_power_difference, bounds=_power_difference_bounds),
        Lemma("v_difference_bounds", "|V(xi - eta)| vs |V(xi) - V(eta)| with |eta| <= L", False, _v_difference_bounds),
        Lemma("v_quasi_triangle", "|V(xi + eta)| vs |V(xi)| + |V(eta)|", False, _v_quasi_triangle),
        Lemma("v_power_bounds", "two-sided power bounds of |V|^2", True, _v_power_bounds),
        Lemma("v_convexity", "convexity of |V|^2 (p >= 2) or of its sub-quadratic comparison function", True, _v_convexity),
        Lemma("v_sandwich", "|V|^2 <= (mu+|xi|^2)^{p/2} = |V|^2 + mu (mu+|xi|^2)^{p/2-1}", True, _v_sandwich),
        Lemma("mean_minimality", "mean of V minimizes the V-oscillation", True, _mean_minimality),
        Lemma("hessian_bounds", "two-sided Hessian bounds with C = Id", True, _hessian_bounds, bounds=_hessian_ratio_bounds),
        Lemma("growth_bounds", "growth of f and of its gradient", False, _growth_bounds),
        Lemma("shifted_growth_bounds", "upper/lower bounds of the shifted N-function", True, _shifted_growth_bounds),
        Lemma("shifted_doubling", "Delta_2 / nabla_2 exponents p^2 and p v 2", True, _shifted_doubling),
        Lemma("conjugate_doubling", "doubling exponents of the polar", True, _conjugate_doubling),
        Lemma("shifted_convexity", "(t/2) phi'(t/2) <= phi(t) <= t phi'(t)", True, _shifted_convexity),
        Lemma("young_uniform", "Young constant for delta = 1/2, uniform in the shift", False, _young_uniform),
        Lemma("polar_identity", "phi*(phi'(t)) = phi'(t) t - phi(t)", True, _polar_identity),
        Lemma("conjugate_equivalence", "phi*(phi'(t)) vs phi(t)", False, _conjugate_equivalence),
        Lemma("shifted_v_comparison", "phi_|xi|(|xi - eta|) vs |V(xi) - V(eta)|^2", False, _shifted_v_comparison),
        Lemma("bregman_v_equivalence", "Bregman distance of f vs |V(eta) - V(xi)|^2", False, _bregman_v_equivalence),
        Lemma("blowup_sandwich", "rescaled energy vs |V(lam xi)|^2 / lam^2", False, _blowup_sandwich, needs_positive_mu=True),
        Lemma("blowup_monotonicity", "monotonicity gap of the rescaled energy", False, _blowup_monotonicity, needs_positive_mu=True),
        Lemma("blowup_convergence", "sup |F_h - F_inf| shrinks along lam = 2^-k", True, _blowup_convergence, needs_positive_mu=True),
    )
}


def _run_chunk(lemma_id: str, spec: AuditSpec, count: int, seed: np.random.SeedSequence) -> _Partial:
    rng = np.random.default_rng(seed)
    return LEMMAS[lemma_id].runner(rng, spec, count)


def _merge(parts: list[_Partial]) -> _Partial:
    lo_part = min(parts, key=lambda part: part.lo)
    hi_part = max(parts, key=lambda part: part.hi)
    worst = max(parts, key=lambda part: part.worst_violation)
    merged = _Partial(
        count=sum(part.count for part in parts),
        lo=lo_part.lo,
        hi=hi_part.hi,
        lo_witness=lo_part.lo_witness,
        hi_witness=hi_part.hi_witness,
        worst_violation=worst.worst_violation,
        violation_witness=worst.violation_witness,
        extra=parts[0].extra,
    )
    return merged


def inequality_audit(lemma_id: str, spec: AuditSpec) -> InequalityAudit:
    """Sample one inequality and report its empirical ratio range.

    Raises:
        UnsupportedLemmaError: Unknown lemma_id.
        DomainError: The statement needs mu > 0 and spec has mu = 0.
    """
    lemma = LEMMAS.get(lemma_id)
    if lemma is None:
        raise UnsupportedLemmaError(lemma_id)
    if lemma.needs_positive_mu and spec.params.mu <= 0:
        raise DomainError(f"{lemma_id} needs mu > 0")

    seeds = np.random.SeedSequence(spec.seed).spawn(spec.workers)
    counts = [spec.samples // spec.workers + (k < spec.samples % spec.workers) for k in range(spec.workers)]
    jobs = [(c, s) for c, s in zip(counts, seeds, strict=True) if c > 0]
    if len(jobs) == 1:
        parts = [_run_chunk(lemma_id, spec, jobs[0][0], jobs[0][1])]
    else:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            futures = [pool.submit(_run_chunk, lemma_id, spec, c, s) for c, s in jobs]
            parts = [f.result() for f in futures]
    merged = _merge(parts)

    violated = lemma.hard and merged.worst_violation > AUDIT_REL_TOL
    if violated:
        witness = merged.violation_witness
    elif merged.hi_witness.get("ratio", 0.0) > abs(merged.lo_witness.get("ratio", 0.0)):
        witness = merged.hi_witness
    else:
        witness = merged.lo_witness
    if merged.extra:
        witness = {**witness, **merged.extra}
    bound_lo, bound_hi = lemma.bounds(spec) if lemma.hard else (None, None)
    audit = InequalityAudit(
        lemma_id=lemma_id,
        samples=merged.count,
        empirical_lo=merged.lo,
        empirical_hi=merged.hi,
        violated=violated,
        hard=lemma.hard,
        bound_lo=bound_lo,
        bound_hi=bound_hi,
        witness=witness,
    )
    log = logger.warning if violated else logger.debug
    log(
        f"{lemma_id} p={spec.params.p} mu={spec.params.mu} n={spec.params.dim}: "
        f"[{audit.empirical_lo:.6g}, {audit.empirical_hi:.6g}] violated={violated}"
    )
    return audit


def audit_stability(lemma_id: str, spec: AuditSpec) -> tuple[InequalityAudit, InequalityAudit, float]:
    """Rerun with twice the samples; returns both audits and the relative drift of empirical_hi."""
    first = inequality_audit(lemma_id, spec)
    second = inequality_audit(lemma_id, spec.model_copy(update={"samples": 2 * spec.samples}))
    drift = abs(second.empirical_hi - first.empirical_hi) / max(abs(first.empirical_hi), 1e-300)
    return first, second, drift


def audit_grid(
    lemma_ids: list[str],
    p_values: list[float],
    mu_values: list[float],
    dims: list[int],
    samples: int,
    seed: int,
    workers: int = 1,
    stability: bool = False,
    **spec_fields,
) -> list[AuditRecord]:
    """Audit every lemma over a parameter grid.

    Statements needing mu > 0 are recorded as skipped at mu = 0.
    """
    unknown = [lemma_id for lemma_id in lemma_ids if lemma_id not in LEMMAS]
    if unknown:
        raise UnsupportedLemmaError(unknown[0])
    records = []
    for lemma_id in lemma_ids:
        for dim in dims:
            for p in p_values:
                for mu in mu_values:
                    params = GrowthParams(p=p, mu=mu, dim=dim)
                    spec = AuditSpec(
                        params=params, samples=samples, seed=seed, workers=workers, **spec_fields
                    )
                    point = {"p": p, "mu": mu, "dim": dim}
                    try:
                        if stability:
                            audit, _, drift = audit_stability(lemma_id, spec)
                        else:
                            audit, drift = inequality_audit(lemma_id, spec), None
                    except DomainError as exc:
                        logger.warning(f"Skipping {lemma_id} at p={p}, mu={mu}, n={dim}: {exc}")
                        records.append(
                            AuditRecord(
                                lemma_id=lemma_id,
                                samples=0,
                                empirical_lo=float("nan"),
                                empirical_hi=float("nan"),
                                violated=False,
                                hard=LEMMAS[lemma_id].hard,
                                skipped=str(exc),
                                **point,
                            )
                        )
                        continue
                    records.append(
                        AuditRecord(**audit.model_dump(), **point, stability_drift=drift)
                    )
    return records
