"""Statistical verification of eigenvector normality, QUE, and local laws.

Sampling harnesses build seeded ensembles, flow them, and record projection
overlaps; the test functions compare empirical moments and distributions
against the independent-Gaussian targets with explicit Monte Carlo error
bars, and report local-law/rigidity errors against their scale envelopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import flows
from .ensembles import (
    EnsembleParams,
    er_mean_level,
    flat_vector,
    goe_from_rng,
    normalize_er,
    normalize_regular,
    rng_stream,
    sample_er,
    sample_goe,
    sample_regular,
    unit_vector_perp_flat,
)
from .errors import ParameterError
from .freeconv import EmpiricalMeasure, g_weights, solve_mfc
from .linalg import eigendecompose, isotropic_form, stieltjes_transform
from .momentflow import double_factorial_odd

PARSEVAL_TOL = 1e-8


def bulk_indices(n, kappa):
    """The index window [kappa N, (1-kappa) N], 0-based and inclusive."""
    lo = int(math.ceil(kappa * n)) - 1
    hi = int(math.floor((1.0 - kappa) * n)) - 1
    lo = max(lo, 0)
    if hi < lo:
        raise ParameterError("empty bulk window")
    return np.arange(lo, hi + 1)


@dataclass(frozen=True)
class ProjectionSampleSet:
    """Samples of N <q, u_i>^2 over seeds, for a fixed index tuple."""

    values: np.ndarray  # (n_seeds, n_indices)
    indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_seeds(self):
        return self.values.shape[0]

    def pooled(self):
        return self.values.ravel()


def _sample_matrix(model, n, p, seed, regular_method="auto"):
    if model == "er":
        return normalize_er(sample_er(EnsembleParams(N=n, p=p), seed))
    if model == "regular":
        return normalize_regular(
            sample_regular(EnsembleParams(N=n, p=p), seed, method=regular_method)
        )
    if model == "goe":
        return sample_goe(n, seed)
    raise ParameterError(f"unknown model {model!r}")


def _flow_matrix(model, h, t, n, p, seed):
    if t == 0:
        return h
    if model == "er":
        return flows.ou_flow_sample(h, t, er_mean_level(n, p), seed)
    if model == "regular":
        return flows.constrained_flow_regular(h, t, seed)
    return flows.dbm_exact_sample(h, t, seed)


def resolve_direction(n, q=None, q_seed=1, allow_q_along_flat=False):
    """The direction vector for a projection run, validated against e-perp."""
    if q is None:
        q = unit_vector_perp_flat(n, q_seed)
    else:
        q = np.asarray(q, dtype=float)
    if not allow_q_along_flat and abs(q @ flat_vector(n)) > 1e-8:
        raise ParameterError(
            "q must be orthogonal to the flat vector (override to explore)"
        )
    return q


def projection_single(
    model, n, p, indices, seed, t=0.0, q=None, randomize_signs=False,
    regular_method="auto",
):
    """Overlap samples N <q, u_i>^2 from one seeded draw.

    Samples the model, optionally flows to time t (the OU flow for ER, the
    constrained flow for regular graphs, the additive flow for GOE),
    eigendecomposes, and returns the overlaps at the requested indices.
    The Parseval ledger sum_i N <q,u_i>^2 = N is asserted on the draw.
    """
    indices = np.asarray(indices, dtype=int)
    q = np.asarray(q, dtype=float)
    h = _sample_matrix(model, n, p, seed, regular_method)
    h = _flow_matrix(model, h, t, n, p, seed)
    sign_rng = rng_stream(seed, 0x5347) if randomize_signs else None
    decomp = eigendecompose(h, randomize_signs=sign_rng)
    overlaps = n * (decomp.eigenvectors.T @ q) ** 2
    ledger = float(np.sum(overlaps))
    if abs(ledger - n) > PARSEVAL_TOL * n:
        raise ParameterError(f"Parseval ledger broke: sum = {ledger!r}")
    return overlaps[indices]


def projection_samples(
    model,
    n,
    p,
    indices,
    n_seeds,
    base_seed=0,
    t=0.0,
    q=None,
    q_seed=1,
    allow_q_along_flat=False,
    randomize_signs=False,
    regular_method="auto",
):
    """Sample N <q, u_i>^2 for fixed bulk indices across seeded draws.

    One matrix is sampled per seed (see :func:`projection_single`); the
    direction q is fixed once for the whole run and defaults to a seeded
    random unit vector orthogonal to the flat vector, which both graph
    models require. Pass ``allow_q_along_flat=True`` to explore directions
    with a flat component (exploratory only).
    """
    indices = np.asarray(indices, dtype=int)
    q = resolve_direction(n, q, q_seed, allow_q_along_flat)
    values = np.empty((n_seeds, indices.size))
    for k in range(n_seeds):
        values[k] = projection_single(
            model, n, p, indices, base_seed + k, t, q, randomize_signs,
            regular_method,
        )
    return ProjectionSampleSet(
        values=values,
        indices=indices,
        provenance={
            "model": model,
            "N": n,
            "p": p,
            "t": t,
            "n_seeds": n_seeds,
            "base_seed": base_seed,
        },
    )


def chi_square_moment(degree):
    """E[chi^2_1 ^ degree] = (2 degree - 1)!!."""
    return float(double_factorial_odd(degree))


def moment_test(samples, degrees=(1, 2, 3), tolerances=None, min_samples=1000):
    """Empirical moments of pooled overlap samples against (2j-1)!!.

    A degree fails when |empirical - target| exceeds 3 standard errors plus
    its absolute slack. Default slacks: 0.05, 0.2, 1.0 for degrees 1, 2, 3.
    """
    pooled = samples.pooled() if hasattr(samples, "pooled") else np.asarray(samples)
    if pooled.size < min_samples:
        raise ParameterError(
            f"need at least {min_samples} samples, got {pooled.size}"
        )
    if tolerances is None:
        tolerances = {1: 0.05, 2: 0.2, 3: 1.0}
    rows = []
    for deg in degrees:
        powered = pooled**deg
        est = float(np.mean(powered))
        se = float(np.std(powered, ddof=1) / math.sqrt(powered.size))
        target = chi_square_moment(deg)
        tol = tolerances.get(deg, 0.0)
        rows.append(
            {
                "degree": int(deg),
                "empirical": est,
                "target": target,
                "std_error": se,
                "tolerance": tol,
                "pass": abs(est - target) <= 3.0 * se + tol,
            }
        )
    return {"moments": rows, "n_samples": int(pooled.size)}


def joint_moment_test(samples, pairs=None, degrees=(1, 1), tolerance=0.1):
    """Cross-moments across index pairs against independence targets.

    ``samples.values[:, k]`` must hold aligned seeds (the same matrix per
    row). For degrees (j_1, j_2) the target is (2 j_1 - 1)!! (2 j_2 - 1)!!.
    """
    values = samples.values
    if values.ndim != 2 or values.shape[1] < 2:
        raise ParameterError("need aligned samples for at least two indices")
    n_idx = values.shape[1]
    if pairs is None:
        pairs = [(2 * k, 2 * k + 1) for k in range(n_idx // 2)]
    j1, j2 = degrees
    target = chi_square_moment(j1) * chi_square_moment(j2)
    rows = []
    for a, b in pairs:
        if a == b:
            raise ParameterError("cross-moment needs distinct indices")
        prod = values[:, a] ** j1 * values[:, b] ** j2
        est = float(np.mean(prod))
        se = float(np.std(prod, ddof=1) / math.sqrt(prod.size))
        rows.append(
            {
                "pair": (int(samples.indices[a]), int(samples.indices[b])),
                "empirical": est,
                "target": target,
                "std_error": se,
                "pass": abs(est - target) <= 3.0 * se + tolerance,
            }
        )
    return {"cross_moments": rows, "degrees": list(degrees), "tolerance": tolerance}


def ks_test_chisq(samples, min_samples=1000):
    """Two-sided Kolmogorov-Smirnov test against chi^2_1, asymptotic p-value."""
    pooled = samples.pooled() if hasattr(samples, "pooled") else np.asarray(samples)
    if pooled.size < min_samples:
        raise ParameterError(
            f"need at least {min_samples} samples, got {pooled.size}"
        )
    result = sps.kstest(pooled, "chi2", args=(1,), mode="asymp")
    return float(result.statistic), float(result.pvalue)


def que_statistic(u, a):
    """The ergodicity statistic (N/||a||_1) sum_i a_i u_i^2.

    Requires the zero-sum constraint sum a_i = 0 (within 1e-12) and
    max |a_i| <= 1 with ||a||_1 > 0.
    """
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=float)
    if u.shape != a.shape:
        raise ParameterError("weight vector must match the eigenvector length")
    if abs(np.sum(a)) > 1e-12:
        raise ParameterError("test weights must sum to zero")
    if np.max(np.abs(a)) > 1.0 + 1e-15:
        raise ParameterError("test weights must satisfy max |a_i| <= 1")
    norm1 = float(np.sum(np.abs(a)))
    if norm1 == 0:
        raise ParameterError("test weights must not vanish identically")
    n = u.shape[0]
    return float(n / norm1 * np.sum(a * u * u))


def alternating_weights(n):
    """The canonical zero-sum test vector (+1, -1, +1, ...); needs even N."""
    if n % 2 != 0:
        raise ParameterError("alternating weights need even N")
    a = np.ones(n)
    a[1::2] = -1.0
    return a


def rigidity_error(decomposition, gamma, window):
    """max over in-window indices of N |lambda_i - gamma_i| (units of 1/N)."""
    lam = decomposition.eigenvalues
    gam = gamma.gamma if hasattr(gamma, "gamma") else np.asarray(gamma)
    if lam.shape != gam.shape:
        raise ParameterError("spectrum and classical locations differ in size")
    mask = np.asarray(window.contains(gam))
    if not np.any(mask):
        raise ParameterError("no classical location falls in the window")
    n = lam.shape[0]
    return float(np.max(n * np.abs(lam - gam)[mask]))


def local_law_error(decomposition, mu0, t, domain, n_e=10, n_eta=10):
    """Grid report of |m_t(z) - m_fc(z)| against the psi/(N eta) envelope."""
    domain.validate_for(decomposition.dim)
    ee, hh = domain.grid(n_e, n_eta)
    z = ee + 1j * hh
    m_emp = stieltjes_transform(decomposition, z)
    m_fc = solve_mfc(mu0, t, z)
    psi = domain.psi(decomposition.dim)
    envelope = psi / (decomposition.dim * hh)
    err = np.abs(m_emp - m_fc)
    return {
        "energies": ee,
        "etas": hh,
        "error": err,
        "envelope": envelope,
        "max_ratio": float(np.max(err / envelope)),
    }


def isotropic_law_error(
    decomposition, q, initial_overlaps, mu0, t, domain, n_e=10, n_eta=10
):
    """Grid report of the isotropic law error against its scale envelope.

    The error |<q, G(t,z) q> - sum_i w_i g_i(t,z)| is compared with
    (psi^2/sqrt(N eta)) Im[sum_i w_i g_i(t,z)], where w_i are the squared
    overlaps of q with the initial eigenvectors.
    """
    domain.validate_for(decomposition.dim)
    w = np.asarray(initial_overlaps, dtype=float)
    if abs(np.sum(w) - 1.0) > 1e-8:
        raise ParameterError("initial overlaps must sum to 1 (unit q)")
    ee, hh = domain.grid(n_e, n_eta)
    z = ee + 1j * hh
    lhs = isotropic_form(decomposition, q, z)
    m_fc = solve_mfc(mu0, t, z)
    approx = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        g = g_weights(mu0, t, z[idx], m_fc[idx])
        approx[idx] = np.sum(w * g)
    psi = domain.psi(decomposition.dim)
    envelope = psi**2 / np.sqrt(decomposition.dim * hh) * approx.imag
    err = np.abs(lhs - approx)
    return {
        "energies": ee,
        "etas": hh,
        "error": err,
        "envelope": envelope,
        "max_ratio": float(np.max(err / envelope)),
    }


def q_quantity(decomposition, i):
    """Q_i = (1/N^2) sum_{j != i} |lambda_j - lambda_i|^{-2}."""
    lam = decomposition.eigenvalues
    n = lam.shape[0]
    gaps = np.abs(np.delete(lam, i) - lam[i])
    if gaps.size and np.min(gaps) <= 1e-12:
        raise ParameterError(f"eigenvalue {i} is numerically degenerate")
    return float(np.sum(1.0 / gaps**2) / n**2)


def perturbation_derivatives(decomposition, q, i, a, b):
    """First-order derivatives with respect to the symmetric entry pair (a, b).

    Returns (d lambda_i, d Q_i, d <q,u_i>^2) where the perturbation direction
    is the symmetric indicator V = E_ab + E_ba (just E_aa when a = b):

    - d lambda_i = (2 - delta_ab) u_i(a) u_i(b),
    - d <q,u_i>^2 = 2 sum_{j != i} <q,u_i><q,u_j> (u_i^T V u_j)/(lambda_i - lambda_j),
    - d Q_i differentiates the inverse-square gap sum through every d lambda_j.
    """
    lam = decomposition.eigenvalues
    u = decomposition.eigenvectors
    n = lam.shape[0]
    gaps = np.abs(np.delete(lam, i) - lam[i])
    if gaps.size and np.min(gaps) <= 1e-12:
        raise ParameterError(f"eigenvalue {i} is numerically degenerate")

    factor = 1.0 if a == b else 2.0
    dlam_all = factor * u[a, :] * u[b, :]
    dlam = float(dlam_all[i])

    others = np.arange(n) != i
    diff = lam[others] - lam[i]
    dq = float(np.sum((dlam_all[others] - dlam) / diff**3) * (-2.0) / n**2)

    q = np.asarray(q, dtype=float)
    qu = u.T @ q
    viv = u[a, :] * u[b, i] + u[b, :] * u[a, i]  # u_j^T V u_i for all j
    if a == b:
        viv = viv / 2.0
    dproj = float(2.0 * qu[i] * np.sum(qu[others] * viv[others] / -diff))
    return dlam, dq, dproj


def general_check(decomposition, q, c_exponent, bound_constant=1.0):
    """Delocalization and non-accumulation checks of the generality predicate.

    Verifies max squared overlaps with coordinate directions and with q
    against C N^{c-1}, and counts eigenvalues in every dyadic interval of
    length at least N^{c-1} against C |I| N. Report-only booleans.
    """
    lam = decomposition.eigenvalues
    u = decomposition.eigenvectors
    n = lam.shape[0]
    scale = bound_constant * n ** (c_exponent - 1.0)
    coord_max = float(np.max(u**2))
    q_max = float(np.max((u.T @ np.asarray(q, dtype=float)) ** 2))

    length = n ** (c_exponent - 1.0)
    span = float(lam[-1] - lam[0]) if n > 1 else 1.0
    worst = 0.0
    while length <= max(span, 1e-30) * 2.0:
        edges = np.arange(lam[0], lam[-1] + length, length)
        if edges.size < 2:
            break
        counts = np.diff(np.searchsorted(lam, edges))
        cap = bound_constant * length * n
        if counts.size:
            worst = max(worst, float(np.max(counts) / cap))
        length *= 2.0
    return {
        "coord_overlap_max": coord_max,
        "q_overlap_max": q_max,
        "overlap_bound": scale,
        "delocalized": coord_max <= scale and q_max <= scale,
        "count_ratio_max": worst,
        "non_accumulating": worst <= 1.0,
        "general": (coord_max <= scale and q_max <= scale) and worst <= 1.0,
    }
