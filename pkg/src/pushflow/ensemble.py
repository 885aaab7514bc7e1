"""Weighted particle ensembles and Gaussian kernel density estimation.

An ensemble is an immutable bundle of particle positions and normalized
weights.  Flow steps never mutate an ensemble in place; they return new
ones, so snapshots stay valid.

The KDE here uses an isotropic Gaussian kernel whose *variance* is the
bandwidth parameter eps:

    rho(y) = sum_j w_j (2 pi eps)^{-d/2} exp(-|y - y_j|^2 / (2 eps))

and all self-evaluations (density or score of an ensemble at its own
particles) include the j = i self term.
"""

import re
from dataclasses import dataclass

import numpy as np

from ._kernels import gauss_sums
from .errors import NumericsError

__all__ = [
    "ParticleEnsemble",
    "KdeConfig",
    "sample_gaussian",
    "sample_uniform",
    "silverman_bandwidth",
    "resolve_bandwidth",
    "kde_density",
    "kde_log_density",
    "kde_score",
    "save_csv",
    "load_csv",
]

_WEIGHT_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=np.float64, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ParticleEnsemble:
    """Immutable weighted particle cloud.

    Parameters
    ----------
    particles : ndarray, shape (N, d)
        Particle positions, finite.
    weights : ndarray, shape (N,)
        Strictly positive, summing to 1 within 1e-12.  Defaults to uniform.
    seed_provenance : int
        Seed the ensemble was generated from; 0 when unknown (e.g. loaded
        from a file).

    Notes
    -----
    Arrays are copied and marked read-only on construction.
    """

    particles: np.ndarray
    weights: np.ndarray = None
    seed_provenance: int = 0

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("particles must be a non-empty (N, d) array")
        if not np.all(np.isfinite(p)):
            raise ValueError("particles must be finite")
        if self.weights is None:
            w = np.full(p.shape[0], 1.0 / p.shape[0])
        else:
            w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (p.shape[0],):
            raise ValueError("weights must have shape (N,)")
        if not np.all(w > 0.0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "particles", _frozen(p))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def with_particles(self, particles):
        """New ensemble with replaced positions, same weights and provenance."""
        return ParticleEnsemble(particles, self.weights, self.seed_provenance)

    def with_weights(self, weights):
        """New ensemble with replaced weights, same positions and provenance."""
        return ParticleEnsemble(self.particles, weights, self.seed_provenance)

    def is_uniform(self):
        return bool(np.all(np.abs(self.weights - 1.0 / self.n) <= _WEIGHT_TOL))


@dataclass(frozen=True)
class KdeConfig:
    """Bandwidth policy for KDE evaluations.

    rule is "silverman" (bandwidth recomputed from the evaluated ensemble)
    or "fixed" (bandwidth taken from the ``bandwidth`` field, which must
    then be a positive float).
    """

    rule: str = "silverman"
    bandwidth: float = None

    def __post_init__(self):
        if self.rule not in ("silverman", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "fixed":
            if self.bandwidth is None or not float(self.bandwidth) > 0.0:
                raise ValueError("fixed rule requires bandwidth > 0")
            object.__setattr__(self, "bandwidth", float(self.bandwidth))
        elif self.bandwidth is not None:
            raise ValueError("bandwidth is only meaningful with rule='fixed'")


def sample_gaussian(mean, cov, n, seed):
    """Draw an N(mean, cov) ensemble with uniform weights.

    Sampling is pinned to one construction so streams are reproducible:
    standard normals of shape (n, d) from ``np.random.default_rng(seed)``
    pushed through the lower Cholesky factor of cov.

    Raises ValueError("covariance not SPD") when the Cholesky
    factorization fails.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ValueError("cov must be (d, d) matching mean")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
        raise ValueError("covariance not SPD")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance not SPD") from None
    z = np.random.default_rng(seed).standard_normal((n, d))
    return ParticleEnsemble(mean + z @ chol.T, seed_provenance=int(seed))


def sample_uniform(lo, hi, n, seed):
    """Draw a uniform ensemble on the box [lo, hi] with uniform weights."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if lo.shape != hi.shape or not np.all(lo < hi):
        raise ValueError("need lo < hi componentwise")
    if n < 1:
        raise ValueError("n must be >= 1")
    u = np.random.default_rng(seed).random((n, lo.shape[0]))
    return ParticleEnsemble(lo + (hi - lo) * u, seed_provenance=int(seed))


def silverman_bandwidth(ens):
    """Silverman-rule kernel variance for an ensemble.

        eps = (4 / ((d + 2) N))^(2 / (d + 4)) * sigma2_bar

    where sigma2_bar is the mean over coordinates of the unbiased (ddof=1)
    per-coordinate sample variances.  Degenerate ensembles (all particles
    equal) give 0; callers must reject a non-positive bandwidth before
    evaluating the KDE.
    """
    if ens.n < 2:
        raise ValueError("bandwidth undefined for single particle")
    sigma2 = float(np.mean(np.var(ens.particles, axis=0, ddof=1)))
    return (4.0 / ((ens.dim + 2) * ens.n)) ** (2.0 / (ens.dim + 4)) * sigma2


def resolve_bandwidth(cfg, ens):
    """Concrete eps for evaluating the KDE of ``ens`` under ``cfg``."""
    if cfg.rule == "fixed":
        return cfg.bandwidth
    return silverman_bandwidth(ens)


def _as_queries(y, dim):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != dim:
        raise ValueError(f"query dimension {y.shape[1]} != ensemble dimension {dim}")
    return y, single


def _check_eps(eps):
    if not eps > 0.0:
        raise ValueError("bandwidth must be positive")
    return float(eps)


def kde_density(ens, cfg, y, eps=None):
    """KDE density of the ensemble at one query (d,) or a batch (Q, d).

    ``eps`` overrides the bandwidth resolved from ``cfg`` (used to share
    one bandwidth between two clouds).  Returns a scalar for a single
    query, else a (Q,) array.

    Linear-scale values below 1e-300 cannot be used safely downstream
    (their logs and ratios are garbage), so they raise instead of being
    clamped; use ``kde_log_density`` to evaluate far tails exactly.
    """
    eps = _check_eps(resolve_bandwidth(cfg, ens) if eps is None else eps)
    q, single = _as_queries(y, ens.dim)
    _, den, shift = gauss_sums(q, ens.particles, ens.weights, eps)
    dens = np.exp(shift) * den * (2.0 * np.pi * eps) ** (-ens.dim / 2.0)
    if np.any(dens < 1e-300):
        raise NumericsError("query outside KDE support")
    return float(dens[0]) if single else dens


def kde_log_density(ens, cfg, y, eps=None):
    """Log KDE density at query points, stable far from the particle cloud.

    Works in the max-shifted domain, so queries whose density underflows
    to zero in ``kde_density`` still get a finite (very negative) value.
    """
    eps = _check_eps(resolve_bandwidth(cfg, ens) if eps is None else eps)
    q, single = _as_queries(y, ens.dim)
    _, den, shift = gauss_sums(q, ens.particles, ens.weights, eps)
    if np.any(den <= np.finfo(np.float64).tiny) or not np.all(np.isfinite(shift)):
        raise NumericsError("query outside KDE support")
    logd = shift + np.log(den) + (-0.5 * ens.dim * np.log(2.0 * np.pi * eps))
    return float(logd[0]) if single else logd


def kde_score(ens, cfg, y, eps=None):
    """Gradient of log KDE density at query points.

    score(y) = -num / (eps * den) with num, den the max-shifted kernel
    sums (the shift cancels in the ratio).  The shifted denominator can
    only degenerate when a query or particle coordinate is large enough
    to overflow the squared distance; such a query is outside the KDE's
    numerical support and evaluation fails rather than returning garbage.
    """
    eps = _check_eps(resolve_bandwidth(cfg, ens) if eps is None else eps)
    q, single = _as_queries(y, ens.dim)
    num, den, shift = gauss_sums(q, ens.particles, ens.weights, eps)
    if np.any(den <= np.finfo(np.float64).tiny) or not np.all(np.isfinite(shift)):
        raise NumericsError("query outside KDE support")
    score = -num / (eps * den[:, None])
    return score[0] if single else score


def save_csv(ens, path):
    """Write an ensemble as CSV: header line then one w,x1,...,xd row per particle.

    Values use repr-faithful %.17g so a load round-trips bit-exactly.
    """
    with open(path, "w") as fh:
        fh.write(f"# dim={ens.dim} n={ens.n} seed={ens.seed_provenance}\n")
        for w, x in zip(ens.weights, ens.particles):
            fh.write(",".join("%.17g" % v for v in (w, *x)) + "\n")


def load_csv(path):
    """Read an ensemble written by save_csv.

    The stored seed describes how the file was generated, not this
    in-memory object, so the loaded ensemble gets seed_provenance=0.
    """
    with open(path) as fh:
        header = fh.readline()
        m = re.match(r"#\s*dim=(\d+)\s+n=(\d+)\s+seed=(-?\d+)", header)
        if not m:
            raise ValueError(f"malformed ensemble header: {header!r}")
        dim, n = int(m.group(1)), int(m.group(2))
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.shape != (n, dim + 1):
        raise ValueError(f"expected {n} rows of {dim + 1} columns, got {rows.shape}")
    return ParticleEnsemble(rows[:, 1:], rows[:, 0], seed_provenance=0)
