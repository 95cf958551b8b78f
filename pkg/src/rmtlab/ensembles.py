"""Samplers for sparse graph ensembles and the GOE.

All samplers are pure functions of (parameters, seed). Randomness comes from
the counter-based Philox generator so that identical seeds reproduce bit-
identical samples on every platform, and distinct stream labels (experiment,
seed, block) yield independent streams without coordination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SamplingError
from .linalg import symmetrize

DEFAULT_ATTEMPT_BUDGET = 10_000


def rng_stream(*labels):
    """A Philox generator keyed by an arbitrary tuple of integer labels.

    Streams with distinct label tuples are statistically independent; the
    mapping label -> stream is fixed across platforms and releases of this
    package.
    """
    entropy = [int(x) & 0xFFFFFFFFFFFFFFFF for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class EnsembleParams:
    """Size and sparsity of a graph ensemble.

    ``p`` is the expected degree for the Erdos-Renyi model (edge probability
    p/N) and the exact degree for the regular model. ``delta`` records the
    lower sparsity exponent used when validating p against N^delta; it is
    informational and not enforced.
    """

    N: int
    p: float
    delta: float | None = None

    def validate_er(self):
        if self.N < 1:
            raise ParameterError("N must be positive")
        if not (0 <= self.p <= self.N / 2):
            raise ParameterError(f"ER sparsity p={self.p} outside [0, N/2]")

    def validate_regular(self):
        p = int(self.p)
        if p != self.p:
            raise ParameterError("regular model needs an integer degree p")
        if not (3 <= p <= self.N - 1):
            raise ParameterError(f"regular degree p={p} outside [3, N-1]")
        if (self.N * p) % 2 != 0:
            raise ParameterError("N*p must be even for a p-regular graph")


@dataclass(frozen=True)
class AdjacencySample:
    """A sampled 0/1 adjacency matrix with its provenance."""

    edges: np.ndarray
    model: str  # "erdos_renyi" | "regular"
    p: float
    seed: int

    @property
    def dim(self):
        return self.edges.shape[0]


def sample_er(params, seed):
    """Erdos-Renyi adjacency: each off-diagonal pair is Bernoulli(p/N).

    Self-loops are excluded (the diagonal vanishes, matching the regular
    model's convention).
    """
    params.validate_er()
    n, p = params.N, params.p
    rng = rng_stream(seed, 0x4552)  # "ER" block label
    upper = rng.random((n, n)) < p / n
    a = np.triu(upper, k=1).astype(float)
    a = a + a.T
    return AdjacencySample(edges=a, model="erdos_renyi", p=p, seed=seed)


def normalize_er(sample):
    """H = A / sqrt(p (1 - p/N))."""
    if sample.model != "erdos_renyi":
        raise ParameterError("normalize_er expects an Erdos-Renyi sample")
    n, p = sample.dim, sample.p
    if p >= n:
        raise ParameterError("p = N makes the ER normalization degenerate")
    if p <= 0:
        raise ParameterError("p must be positive to normalize")
    return sample.edges / math.sqrt(p * (1.0 - p / n))


def er_mean_level(n, p):
    """The common entry mean f = (p/N)/sqrt(p(1-p/N)) of the normalized ER matrix."""
    return (p / n) / math.sqrt(p * (1.0 - p / n))


def _pairing_attempt(n, p, rng):
    # One pass of the configuration model: pair all stubs uniformly, fail on
    # any self-loop or multi-edge.
    stubs = np.repeat(np.arange(n), p)
    rng.shuffle(stubs)
    a = stubs[0::2]
    b = stubs[1::2]
    if np.any(a == b):
        return None
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keys = lo * n + hi
    if np.unique(keys).size != keys.size:
        return None
    adj = np.zeros((n, n))
    adj[lo, hi] = 1.0
    adj[hi, lo] = 1.0
    return adj


def _pairing_with_repair(n, p, rng, max_rounds=10_000):
    # Stub-repair variant: failed pairs are thrown back and re-shuffled
    # instead of restarting from scratch (the NetworkX algorithm). Uniform
    # only asymptotically, but feasible for degrees far beyond full rejection.
    def suitable(edges, potential):
        if not potential:
            return True
        nodes = list(potential)
        for i, s1 in enumerate(nodes):
            for s2 in nodes[i + 1 :]:
                key = (s1, s2) if s1 < s2 else (s2, s1)
                if key not in edges:
                    return True
        return False

    for _ in range(max_rounds):
        edges = set()
        stubs = list(np.repeat(np.arange(n), p))
        ok = True
        while stubs:
            potential = {}
            arr = np.array(stubs)
            rng.shuffle(arr)
            for s1, s2 in zip(arr[0::2], arr[1::2]):
                s1, s2 = int(s1), int(s2)
                if s1 > s2:
                    s1, s2 = s2, s1
                if s1 != s2 and (s1, s2) not in edges:
                    edges.add((s1, s2))
                else:
                    potential[s1] = potential.get(s1, 0) + 1
                    potential[s2] = potential.get(s2, 0) + 1
            if not suitable(edges, potential):
                ok = False
                break
            stubs = [v for v, k in potential.items() for _ in range(k)]
        if ok:
            adj = np.zeros((n, n))
            for s1, s2 in edges:
                adj[s1, s2] = 1.0
                adj[s2, s1] = 1.0
            return adj
    raise SamplingError(
        f"stub-repair sampler failed after {max_rounds} rounds", attempts=max_rounds
    )


def pairing_acceptance_asymptote(p):
    """Asymptotic probability that one pairing-model pass yields a simple graph."""
    lam = (p - 1) / 2.0
    return math.exp(-lam - lam * lam)


def sample_regular_counted(
    params, seed, method="auto", attempt_budget=DEFAULT_ATTEMPT_BUDGET
):
    """Like :func:`sample_regular`, also returning the pairing attempt count.

    The attempt count is 1 for the repair method (which never restarts from
    scratch); for the rejection method it is the number of full pairing passes
    consumed, which measures the sampler's acceptance rate.
    """
    params.validate_regular()
    n, p = params.N, int(params.p)
    rng = rng_stream(seed, 0x5247)  # "RG" block label
    if method == "auto":
        expected = 1.0 / pairing_acceptance_asymptote(p)
        method = "rejection" if expected * 10 <= attempt_budget else "repair"
    if method == "repair":
        adj = _pairing_with_repair(n, p, rng)
        return AdjacencySample(edges=adj, model="regular", p=p, seed=seed), 1
    if method != "rejection":
        raise ParameterError(f"unknown regular sampling method {method!r}")
    for attempt in range(1, attempt_budget + 1):
        adj = _pairing_attempt(n, p, rng)
        if adj is not None:
            return AdjacencySample(edges=adj, model="regular", p=p, seed=seed), attempt
    raise SamplingError(
        f"pairing model rejected {attempt_budget} attempts (N={n}, p={p})",
        attempts=attempt_budget,
    )


def sample_regular(params, seed, method="auto", attempt_budget=DEFAULT_ATTEMPT_BUDGET):
    """Random p-regular simple graph on N vertices.

    ``method="rejection"`` runs the pairing (configuration) model with full
    rejection of self-loops and multi-edges: exactly uniform over simple
    p-regular graphs, but the acceptance probability decays like
    exp(-(p-1)/2 - (p-1)^2/4), so it is only feasible for small p.
    ``method="repair"`` locally re-pairs failed stubs instead (asymptotically
    uniform). ``method="auto"`` picks rejection whenever its expected attempt
    count fits comfortably inside ``attempt_budget``.

    Raises
    ------
    SamplingError
        When the rejection budget is exhausted; carries the attempt count.
    """
    sample, _ = sample_regular_counted(params, seed, method, attempt_budget)
    return sample


def normalize_regular(sample):
    """H = A / sqrt(p - 1); the flat vector stays an exact eigenvector."""
    if sample.model != "regular":
        raise ParameterError("normalize_regular expects a regular sample")
    p = int(sample.p)
    if p < 2:
        raise ParameterError("need degree p >= 2 to normalize")
    return sample.edges / math.sqrt(p - 1.0)


def goe_from_rng(n, rng):
    """GOE draw with entry variance (1 + delta_ab)/N from a given stream."""
    g = rng.standard_normal((n, n))
    return symmetrize((g + g.T) / math.sqrt(2.0 * n))


def sample_goe(n, seed):
    """GOE draw with entry variance (1 + delta_ab)/N.

    Off-diagonal entries are N(0, 1/N), diagonal entries N(0, 2/N), all
    independent up to symmetry.
    """
    if n < 1:
        raise ParameterError("N must be positive")
    return goe_from_rng(n, rng_stream(seed, 0x474F45))  # "GOE" block label


def flat_vector(n):
    """The normalized all-ones vector e = (1,...,1)/sqrt(N)."""
    return np.full(n, 1.0 / math.sqrt(n))


def unit_vector_perp_flat(n, seed, perp_flat=True):
    """A seeded random unit vector, by default projected orthogonal to e."""
    rng = rng_stream(seed, 0x71)  # "q" block label
    q = rng.standard_normal(n)
    if perp_flat:
        e = flat_vector(n)
        q = q - (q @ e) * e
    norm = np.linalg.norm(q)
    if norm == 0:  # pragma: no cover - probability zero
        raise SamplingError("degenerate direction draw")
    return q / norm
