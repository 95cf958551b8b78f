"""Dense symmetric matrices, spectral decompositions, and Stieltjes transforms.

All spectral quantities are derived from a :class:`SpectralDecomposition`;
points ``z`` live in the open upper half plane and are represented as plain
complex scalars or arrays with ``Im z > 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EigensolverError, ParameterError

ORTHONORMALITY_TOL = 1e-10
RECONSTRUCTION_TOL = 1e-8


def check_symmetric(m, tol=0.0):
    """Validate that ``m`` is a finite, square, symmetric 2-d array.

    Returns the array as float64. ``tol = 0`` demands exact symmetry, which
    all samplers and flows in this package guarantee by construction.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] < 1:
        raise ParameterError("matrix dimension must be >= 1")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix has non-finite entries")
    if not np.all(np.abs(m - m.T) <= tol):
        raise ParameterError("matrix is not symmetric")
    return m


def symmetrize(m):
    """Return the exactly symmetric part (m + m^T)/2."""
    m = np.asarray(m, dtype=float)
    return (m + m.T) / 2.0


def validate_half_plane(z):
    """Check Im z > 0 elementwise; returns z as a complex array/scalar."""
    z = np.asarray(z, dtype=complex)
    if not np.all(z.imag > 0):
        raise ParameterError("spectral parameter must satisfy Im z > 0")
    return z


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Column ``i`` of ``eigenvectors`` is the unit eigenvector for
    ``eigenvalues[i]``. Instances are immutable and safe to share.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self):
        return self.eigenvalues.shape[0]

    def matrix(self):
        """Reconstruct U diag(lambda) U^T."""
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def min_gap(self):
        if self.dim < 2:
            return np.inf
        return float(np.min(np.diff(self.eigenvalues)))


def _canonical_signs(u):
    # Largest-|entry| of each column made positive; argmax already breaks
    # ties by the lowest index.
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def eigendecompose(m, randomize_signs=None):
    """Full spectral decomposition of a symmetric matrix.

    Parameters
    ----------
    m : (N, N) array_like
        Symmetric matrix with finite entries.
    randomize_signs : numpy.random.Generator, optional
        When given, each eigenvector column is multiplied by an independent
        Rademacher sign drawn from this generator (useful for statistics of
        sign-sensitive functionals). The default is the deterministic
        canonicalization: the largest-magnitude entry of each column is made
        positive, ties broken by the lowest index.

    Returns
    -------
    SpectralDecomposition

    Raises
    ------
    EigensolverError
        If the underlying LAPACK solver does not converge; the error carries
        the LAPACK info code (an iteration count is not exposed by LAPACK).
    """
    m = check_symmetric(m)
    try:
        lam, u = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - hard to trigger
        info = getattr(exc, "args", (None,))[0]
        raise EigensolverError(f"eigh failed to converge: {exc}", info=info) from exc
    if randomize_signs is not None:
        signs = randomize_signs.integers(0, 2, size=u.shape[1]) * 2.0 - 1.0
        u = u * signs
    else:
        u = _canonical_signs(u)
    s = SpectralDecomposition(eigenvalues=lam, eigenvectors=u)
    _check_decomposition(m, s)
    return s


def _check_decomposition(m, s):
    u = s.eigenvectors
    ortho = np.max(np.abs(u.T @ u - np.eye(s.dim)))
    if ortho > ORTHONORMALITY_TOL:
        raise EigensolverError(f"orthonormality defect {ortho:.2e} exceeds tolerance")
    scale = max(1.0, float(np.max(np.abs(m))))
    recon = np.max(np.abs(m @ u - u * s.eigenvalues))
    if recon > RECONSTRUCTION_TOL * scale:
        raise EigensolverError(f"reconstruction defect {recon:.2e} exceeds tolerance")


def stieltjes_transform(s, z):
    """(1/N) sum_i 1/(lambda_i - z) for Im z > 0; vectorized over z."""
    z = validate_half_plane(z)
    lam = s.eigenvalues
    return np.mean(1.0 / (lam - z[..., None]), axis=-1) if z.ndim else np.mean(
        1.0 / (lam - z)
    )


def isotropic_form(s, q, z):
    """Quadratic form <q, (H - z)^{-1} q> from the spectral decomposition.

    ``q`` must be a unit vector (within 1e-12).
    """
    z = validate_half_plane(z)
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-12:
        raise ParameterError("q must be a unit vector")
    w = (s.eigenvectors.T @ q) ** 2
    lam = s.eigenvalues
    if z.ndim:
        return np.sum(w / (lam - z[..., None]), axis=-1)
    return np.sum(w / (lam - z))


def green_entry(s, a, b, z):
    """Resolvent entry (H - z)^{-1}_{ab}; vectorized over z."""
    z = validate_half_plane(z)
    ua = s.eigenvectors[a, :]
    ub = s.eigenvectors[b, :]
    lam = s.eigenvalues
    if z.ndim:
        return np.sum(ua * ub / (lam - z[..., None]), axis=-1)
    return np.sum(ua * ub / (lam - z))


def semicircle_stieltjes(z):
    """Stieltjes transform of the variance-1 semicircle law.

    Returns the root of m^2 + z m + 1 = 0 with Im m > 0, i.e.
    m(z) = (-z + sqrt(z^2 - 4))/2 on the branch positive in the upper half
    plane. Vectorized over z.
    """
    z = validate_half_plane(z)
    w = np.sqrt(z * z - 4.0)
    m = (-z + w) / 2.0
    other = (-z - w) / 2.0
    return np.where(m.imag > 0, m, other) if z.ndim else (m if m.imag > 0 else other)


@dataclass(frozen=True)
class SpectralDomain:
    """Rectangular bulk spectral window with scale bounds.

    The window in energy is ``[E0 - (1-kappa) r, E0 + (1-kappa) r]`` and the
    admissible scales are ``eta_min <= eta <= eta_max``. ``psi_exponent`` is
    the control exponent c in psi = N^c; :meth:`validate_for` enforces the
    lower scale cut eta_min >= psi^4 / N.
    """

    E0: float
    r: float
    kappa: float
    eta_min: float
    eta_max: float
    psi_exponent: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.kappa < 1.0):
            raise ParameterError("kappa must lie in (0, 1)")
        if self.r <= 0 or self.eta_min <= 0 or self.eta_max < self.eta_min:
            raise ParameterError("need r > 0 and 0 < eta_min <= eta_max")

    @property
    def energy_window(self):
        half = (1.0 - self.kappa) * self.r
        return (self.E0 - half, self.E0 + half)

    def psi(self, n):
        return float(n) ** self.psi_exponent

    def validate_for(self, n):
        """Check the scale cuts of the domain against dimension ``n``."""
        floor = self.psi(n) ** 4 / n
        if self.eta_min < floor:
            raise ParameterError(
                f"eta_min {self.eta_min:.3g} below psi^4/N = {floor:.3g}"
            )
        if self.eta_max > 1.0 - self.kappa * self.r + 1e-12:
            raise ParameterError("eta_max exceeds 1 - kappa*r")

    def grid(self, n_e, n_eta, log_eta=True):
        """Return (E, eta) meshgrid arrays of shape (n_eta, n_e)."""
        lo, hi = self.energy_window
        energies = np.linspace(lo, hi, n_e)
        if log_eta:
            etas = np.geomspace(self.eta_min, self.eta_max, n_eta)
        else:
            etas = np.linspace(self.eta_min, self.eta_max, n_eta)
        return np.meshgrid(energies, etas)

    def contains(self, gamma):
        lo, hi = self.energy_window
        gamma = np.asarray(gamma)
        return (gamma >= lo) & (gamma <= hi)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Sorted atoms of an empirical spectral measure (1/N) sum delta_{lambda_i}."""

    atoms: np.ndarray = field()

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim != 1 or atoms.size == 0:
            raise ParameterError("atoms must be a nonempty 1-d array")
        if not np.all(np.isfinite(atoms)):
            raise ParameterError("atoms must be finite")
        atoms = np.sort(atoms)
        object.__setattr__(self, "atoms", atoms)

    @property
    def size(self):
        return self.atoms.shape[0]

    def stieltjes(self, w):
        """m_0 evaluated at arbitrary complex w (vectorized)."""
        w = np.asarray(w, dtype=complex)
        return np.mean(1.0 / (self.atoms - w[..., None]), axis=-1)

    def stieltjes_derivative(self, w):
        w = np.asarray(w, dtype=complex)
        return np.mean(1.0 / (self.atoms - w[..., None]) ** 2, axis=-1)


# -- matrix persistence -------------------------------------------------------

_BINARY_MAGIC = b"RMTM"


def write_matrix_text(path, m):
    """Plain-text format: a header line ``N`` then N rows of N decimals."""
    m = check_symmetric(m)
    n = m.shape[0]
    with open(path, "w") as fh:
        fh.write(f"{n}\n")
        for row in m:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_matrix_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 1:
            raise ParameterError(f"bad matrix header in {path}")
        n = int(header[0])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (n, n):
        raise ParameterError(
            f"matrix body {data.shape} does not match header N={n} in {path}"
        )
    return symmetrize(data)


def write_matrix_binary(path, m):
    """Binary format: little-endian uint64 dimension then row-major float64."""
    m = check_symmetric(m)
    n = m.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix_binary(path):
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        body = fh.read(8 * n * n)
    if len(body) != 8 * n * n:
        raise ParameterError(f"truncated binary matrix in {path}")
    m = np.frombuffer(body, dtype="<f8").reshape(n, n).astype(float)
    return symmetrize(m)


def save_matrix(path, m):
    """Write text or binary format depending on a ``.bin`` suffix."""
    if str(path).endswith(".bin"):
        write_matrix_binary(path, m)
    else:
        write_matrix_text(path, m)


def load_matrix(path):
    if str(path).endswith(".bin"):
        return read_matrix_binary(path)
    return read_matrix_text(path)
