"""Spatial covariance estimation from few channel samples.

The estimator works in the subspace spanned by the samples: build an
orthonormal basis U of the sample span, shrink the reduced-dimension sample
covariance toward a scaled identity with an oracle-approximating coefficient,
then lift back as U Sigma U^H.  The result has rank at most the number of
samples, which is the point: with Tp = O(rank) samples it beats the naive
M x M sample covariance.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .linalg import effective_rank, herm
from .scenario import SpatialCovariance


@dataclass
class SampleSet:
    """Independent channel samples of one link, one row per sample."""

    samples: np.ndarray        # (Tp, M) complex
    link: tuple = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=complex))
        if self.samples.shape[0] < 1:
            raise ConfigurationError("need at least one sample")


def orthonormal_basis(samples, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (M x R') of the span of the samples.

    Gram-Schmidt with a second re-orthogonalization pass; directions whose
    residual falls below tol * max sample norm are treated as dependent.
    """
    if isinstance(samples, SampleSet):
        vecs = samples.samples
    else:
        vecs = np.atleast_2d(np.asarray(samples, dtype=complex))
    norms = np.linalg.norm(vecs, axis=1)
    max_norm = float(norms.max(initial=0.0))
    if max_norm <= 0.0:
        raise NumericalError("all-zero sample set has no basis")
    drop = tol * max_norm
    basis = []
    for h in vecs:
        v = h.astype(complex)
        for _ in range(2):  # twice is enough
            for u in basis:
                v = v - u * (u.conj() @ v)
        nv = np.linalg.norm(v)
        if nv > drop:
            basis.append(v / nv)
    return np.column_stack(basis)


def oas_coefficient(sample_cov: np.ndarray, n_samples: int) -> float:
    """Oracle-approximating shrinkage weight for a p x p sample covariance.

    rho = [(1 - 2/p) tr(S^2) + tr(S)^2] / [(n + 1 - 2/p) (tr(S^2) - tr(S)^2 / p)]
    clamped to [0, 1]; degenerate denominators (p = 1, or S proportional to
    the identity) shrink fully since the target then equals S anyway.
    """
    p = sample_cov.shape[0]
    tr = float(np.trace(sample_cov).real)
    tr2 = float(np.trace(sample_cov @ sample_cov).real)
    num = (1.0 - 2.0 / p) * tr2 + tr * tr
    den = (n_samples + 1.0 - 2.0 / p) * (tr2 - tr * tr / p)
    if den <= 0.0 or not np.isfinite(den):
        return 1.0
    return float(min(1.0, max(0.0, num / den)))


def oas_shrinkage(reduced_samples) -> np.ndarray:
    """Shrunk covariance (1 - rho) S + rho (tr(S)/p) I from reduced samples.

    Samples are treated as zero mean (channel vectors), so S is the plain
    second-moment matrix.
    """
    x = np.atleast_2d(np.asarray(reduced_samples, dtype=complex))
    n, p = x.shape
    s = herm(x.conj().T @ x) / n
    rho = oas_coefficient(s, n)
    target = (float(np.trace(s).real) / p) * np.eye(p)
    return (1.0 - rho) * s + rho * target


def rank_deficient_oas(samples) -> SpatialCovariance:
    """Full covariance estimate U Sigma U^H supported on the sample span."""
    sset = samples if isinstance(samples, SampleSet) else SampleSet(np.asarray(samples))
    u = orthonormal_basis(sset)
    reduced = sset.samples @ u.conj()          # rows h'_j = U^H h_j
    sigma = oas_shrinkage(reduced)
    theta = herm(u @ sigma @ u.conj().T)
    m = theta.shape[0]
    return SpatialCovariance(
        theta=theta,
        pathloss=float(np.trace(theta).real) / m,
        rank=effective_rank(theta),
    )


def collect_link_samples(scenario, k: int, l: int, count: int, seed: int) -> SampleSet:
    """Draw ``count`` independent channel samples of link (k, l).

    Uses the same per-(seed, slot, link) streams as full-slot channel draws,
    so sample j equals the draw of slot j.
    """
    from . import scenario as sc
    from .linalg import complex_gaussian

    factor = scenario.link_factor(k, l)
    rows = [
        factor @ complex_gaussian(sc._rng(seed, sc._STREAM_CHANNEL, slot, k, l), scenario.M)
        for slot in range(count)
    ]
    return SampleSet(samples=np.array(rows), link=(k, l))
