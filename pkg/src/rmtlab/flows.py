"""Matrix- and spectral-level stochastic flows.

Covers the exact additive Gaussian flow H_0 + sqrt(t) W, its
Ornstein-Uhlenbeck variant with a mean level f, the Gaussian-divisible
decomposition, the constrained flow that preserves the flat eigenvector of
regular graphs, and numerical integrators for the coupled eigenvalue /
eigenvector stochastic dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ensembles import goe_from_rng, rng_stream
from .errors import CollisionError, ParameterError
from .linalg import SpectralDecomposition, check_symmetric, symmetrize

_ADDITIVE_LABEL = 0x414444  # "ADD"
_OU_LABEL = 0x4F55  # "OU"
_CONSTR_LABEL = 0x434F4E  # "CON"
_SDE_LABEL = 0x534445  # "SDE"
_VEC_LABEL = 0x564543  # "VEC"


def dbm_exact_sample(h0, t, seed):
    """One exact-in-law draw of the additive flow: H_0 + sqrt(t) W.

    W is a fresh GOE matrix with entry variance (1+delta_ab)/N; there is no
    time discretization.
    """
    h0 = check_symmetric(h0)
    if t < 0:
        raise ParameterError("time must be nonnegative")
    if t == 0:
        return h0.copy()
    n = h0.shape[0]
    w = goe_from_rng(n, rng_stream(seed, _ADDITIVE_LABEL))
    return h0 + math.sqrt(t) * w


def gaussian_divisible_decompose(h0, t, seed, f=0.0):
    """Split the OU flow at time t into its deterministic and Gaussian parts.

    Returns ``(f + e^{-t/2}(H_0 - f), sqrt(1 - e^{-t}) G)`` with G a GOE draw;
    the sum is distributed as :func:`ou_flow_sample` output and, under the
    same seed, equals it exactly.
    """
    h0 = check_symmetric(h0)
    if t <= 0:
        raise ParameterError("decomposition needs t > 0")
    n = h0.shape[0]
    decay = math.exp(-t / 2.0)
    deterministic = f + decay * (h0 - f)
    g = goe_from_rng(n, rng_stream(seed, _OU_LABEL))
    return deterministic, math.sqrt(1.0 - math.exp(-t)) * g


def ou_flow_sample(h0, t, f, seed):
    """Ornstein-Uhlenbeck flow with mean level f, sampled exactly in law.

    Entrywise: h_ab(t) = f + e^{-t/2} (h_ab(0) - f) + g_ab with g_ab centered
    Gaussian of variance (1 + delta_ab)(1 - e^{-t})/N. An input with entry
    mean f and entry variance 1/N keeps both for all t.
    """
    h0 = check_symmetric(h0)
    if t < 0:
        raise ParameterError("time must be nonnegative")
    if t == 0:
        return h0.copy()
    deterministic, noise = gaussian_divisible_decompose(h0, t, seed, f=f)
    return deterministic + noise


def projector_regular(n):
    """The (N-1) x N isometry from the orthocomplement of the flat vector.

    Satisfies P P^T = I_{N-1} and P e = 0, so P^T P is the orthogonal
    projector onto e-perp.
    """
    if n < 2:
        raise ParameterError("projector needs N >= 2")
    sqrt_n = math.sqrt(n)
    v = (1.0 / (sqrt_n - 1.0)) * (1.0 / sqrt_n - (np.arange(n) == n - 1))
    p = np.eye(n - 1, n) - v
    return p


def constrained_flow_regular(h0, t, seed):
    """OU flow constrained to matrices with constant row sums.

    The flat vector e stays an exact eigenvector with its initial eigenvalue;
    on e-perp the flow acts as the (N-1)-dimensional Gaussian OU flow
    P H_t P^T = e^{-t/2} P H_0 P^T + sqrt(1 - e^{-t}) G, with G normalized by
    N rather than N-1.
    """
    h0 = check_symmetric(h0)
    if t < 0:
        raise ParameterError("time must be nonnegative")
    n = h0.shape[0]
    row_sums = h0.sum(axis=1)
    scale = max(1.0, float(np.max(np.abs(h0)))) * n
    if np.max(np.abs(row_sums - row_sums[0])) > 1e-10 * scale:
        raise ParameterError("constrained flow needs constant row sums")
    if t == 0:
        return h0.copy()
    flat_eigenvalue = float(row_sums[0])
    p = projector_regular(n)
    rng = rng_stream(seed, _CONSTR_LABEL)
    g = rng.standard_normal((n - 1, n - 1))
    # (N-1)-dimensional GOE block, variance (1+delta)/N on purpose
    g = (g + g.T) / math.sqrt(2.0 * n)
    reduced = math.exp(-t / 2.0) * (p @ h0 @ p.T) + math.sqrt(1.0 - math.exp(-t)) * g
    h_t = p.T @ reduced @ p + flat_eigenvalue * np.full((n, n), 1.0 / n)
    return symmetrize(h_t)


@dataclass(frozen=True)
class EigenFlowTrajectory:
    """Stored states of the coupled eigenvalue/eigenvector integration."""

    times: np.ndarray
    lambdas: np.ndarray  # (n_stored, N)
    vectors: np.ndarray  # (n_stored, N, N)
    halvings: int

    def orthonormality_defect(self):
        eye = np.eye(self.vectors.shape[-1])
        return np.array(
            [np.max(np.abs(u.T @ u - eye)) for u in self.vectors]
        )


def _mgs(u):
    """Modified Gram-Schmidt orthonormalization of the columns of u."""
    q = u.copy()
    n = q.shape[1]
    for k in range(n):
        col = q[:, k]
        norm = np.linalg.norm(col)
        col /= norm
        if k + 1 < n:
            q[:, k + 1 :] -= np.outer(col, col @ q[:, k + 1 :])
    return q


def _symmetric_noise(rng, n):
    g = rng.standard_normal((n, n))
    return (g + g.T) / math.sqrt(2.0)


def integrate_eigen_sde(
    s0,
    t,
    dt,
    seed,
    zero_noise=False,
    noise="spectral",
    store_every=1,
):
    """Euler-Maruyama integration of the coupled spectral dynamics.

    The eigenvalues follow
    ``d lambda_k = db_kk / sqrt(N) + (1/N) sum_{l != k} dt / (lambda_k - lambda_l)``
    and the frame follows the matching vector flow with shared symmetric
    Brownian increments (off-diagonal variance dt, diagonal 2 dt); the frame
    is re-orthonormalized by modified Gram-Schmidt after every step.

    Parameters
    ----------
    s0 : SpectralDecomposition
        Initial spectrum and frame; eigenvalue gaps must exceed the collision
        guard 10 sqrt(dt/N).
    zero_noise : bool
        Test hook: force all Brownian increments to zero, leaving the
        deterministic repulsion flow.
    noise : {"spectral", "matrix"}
        "spectral" draws the increments directly in the eigenbasis;
        "matrix" (pathwise test hook) draws a symmetric matrix increment dW
        and rotates it into the moving frame, coupling the trajectory
        pathwise to the matrix flow H_0 + W_t.
    store_every : int
        Store every k-th step (the initial and final states are always kept).

    Raises
    ------
    CollisionError
        After 20 step halvings fail to restore the gap guard; carries the
        step index and the offending gap.
    """
    if t < 0 or dt <= 0:
        raise ParameterError("need horizon t >= 0 and dt > 0")
    lam = s0.eigenvalues.astype(float).copy()
    u = s0.eigenvectors.copy()
    n = lam.shape[0]
    guard = 10.0 * math.sqrt(dt / n)
    if n > 1 and np.min(np.diff(lam)) <= guard:
        raise ParameterError(
            f"initial min gap {np.min(np.diff(lam)):.3g} below guard {guard:.3g}"
        )
    rng = rng_stream(seed, _SDE_LABEL)

    times = [0.0]
    lams = [lam.copy()]
    frames = [u.copy()]
    halvings = 0
    now = 0.0
    step = 0
    while now < t - 1e-15:
        step += 1
        h = min(dt, t - now)
        while n > 1 and np.min(np.diff(lam)) < 5.0 * math.sqrt(h / n):
            h /= 2.0
            dt = h
            halvings += 1
            if halvings > 20:
                raise CollisionError(
                    "gap guard failed after 20 halvings",
                    step=step,
                    min_gap=float(np.min(np.diff(lam))),
                )
        if zero_noise:
            db = np.zeros((n, n))
        elif noise == "matrix":
            dw = _symmetric_noise(rng, n) * math.sqrt(h / n)
            db = math.sqrt(n) * (u.T @ dw @ u)
        else:
            db = _symmetric_noise(rng, n) * math.sqrt(h)

        diff = lam[:, None] - lam[None, :]
        np.fill_diagonal(diff, np.inf)
        inv = 1.0 / diff
        drift = np.sum(inv, axis=1) / n
        lam_new = lam + np.diag(db) / math.sqrt(n) + drift * h
        order_ok = n == 1 or np.all(np.diff(lam_new) > 0)
        if not order_ok:
            halvings += 1
            dt = h / 2.0
            if halvings > 20:
                raise CollisionError(
                    "ordering lost after 20 halvings",
                    step=step,
                    min_gap=float(np.min(np.diff(lam_new))),
                )
            continue

        # frame update: column k picks up db_kl/(sqrt(N)(lam_k - lam_l)) of
        # column l, plus the Ito norm correction
        m = (db * inv).T / math.sqrt(n)
        ito = -0.5 * h * np.sum(inv * inv, axis=1) / n
        u = u + u @ m + u * ito
        u = _mgs(u)
        lam = lam_new
        now += h
        if step % store_every == 0 or now >= t - 1e-15:
            times.append(now)
            lams.append(lam.copy())
            frames.append(u.copy())

    return EigenFlowTrajectory(
        times=np.array(times),
        lambdas=np.array(lams),
        vectors=np.array(frames),
        halvings=halvings,
    )


def _cayley(m):
    """Exact-orthogonal step exp-like map (I - M/2)^{-1} (I + M/2), batched."""
    n = m.shape[-1]
    eye = np.eye(n)
    return np.linalg.solve(eye - m / 2.0, eye + m / 2.0)


def integrate_vector_flow(
    u0,
    lambdas,
    t0,
    t1,
    dt,
    seed,
    clock="physical",
    n_paths=1,
):
    """Integrate the eigenvector flow along a prescribed eigenvalue path.

    Each step multiplies the frame by the Cayley transform of the
    antisymmetric noise matrix M with
    ``M_lk = db_kl / (sqrt(N) (lambda_k - lambda_l))``,
    which is exactly orthogonal and reproduces the Ito norm correction
    through E[M^2]/2.

    Parameters
    ----------
    u0 : (N, N) ndarray
        Initial orthogonal frame, shared by all paths.
    lambdas : (N,) ndarray or callable t -> (N,) ndarray
        Frozen eigenvalues, or a path evaluated at the step midpoint.
    clock : {"physical", "jump"}
        "physical" uses off-diagonal Brownian variance dt (the matrix-flow
        convention). "jump" doubles the variance so the moments of the flow
        match the jump-process master equation with rates
        2 c_ij eta_i (1 + 2 eta_j) per unit time.
    n_paths : int
        Number of independent Monte Carlo paths, integrated batched.

    Returns
    -------
    (n_paths, N, N) ndarray of frames at time t1.
    """
    if t1 < t0 or dt <= 0:
        raise ParameterError("need t1 >= t0 and dt > 0")
    if clock not in ("physical", "jump"):
        raise ParameterError(f"unknown clock {clock!r}")
    u0 = np.asarray(u0, dtype=float)
    n = u0.shape[0]
    lam_fn = lambdas if callable(lambdas) else (lambda _t, _l=np.asarray(lambdas, dtype=float): _l)
    variance_scale = 2.0 if clock == "jump" else 1.0
    rng = rng_stream(seed, _VEC_LABEL)

    u = np.broadcast_to(u0, (n_paths, n, n)).copy()
    now = t0
    while now < t1 - 1e-15:
        h = min(dt, t1 - now)
        lam = np.asarray(lam_fn(now + h / 2.0), dtype=float)
        diff = lam[None, :] - lam[:, None]  # diff_lk = lam_k - lam_l
        np.fill_diagonal(diff, np.inf)
        coeff = 1.0 / (math.sqrt(n) * diff)
        g = rng.standard_normal((n_paths, n, n))
        db = (g + np.swapaxes(g, 1, 2)) / math.sqrt(2.0)
        m = db * (coeff * math.sqrt(variance_scale * h))
        u = u @ _cayley(m)
        now += h
    return u
