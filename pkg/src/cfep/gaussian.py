"""Complex-Gaussian and categorical message algebra.

Messages live in one of two families: circularly-symmetric complex Gaussians
over C^n with diagonal covariance, stored in natural parameters
(precision, precision * mean), and normalized pmfs over a finite symbol
constellation. Natural parameters make message products additive and allow a
non-informative message to be represented exactly by zero precision.

All operations are value-semantic: inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LOG_FLOOR",
    "DiagGaussian",
    "FullGaussian",
    "Categorical",
    "ClampStats",
    "gaussian_product",
    "gaussian_divide",
    "project_mixture_diag",
    "categorical_moments",
    "parallel_sum_deviation",
    "complex_gaussian_logpdf",
    "regularize_cov",
    "log_normalize",
]

# Smallest log-probability kept when pmfs round-trip through the log domain.
LOG_FLOOR = -700.0


@dataclass
class ClampStats:
    """Mutable counter recording precision clamps in gaussian_divide."""

    count: int = 0


@dataclass
class DiagGaussian:
    """CN(mean, diag(1/prec)) in natural parameters.

    prec[i] == 0 encodes a non-informative component; its prec_mean entry
    must be zero as well.
    """

    prec: np.ndarray       # (n,) real, >= 0
    prec_mean: np.ndarray  # (n,) complex

    def __post_init__(self):
        self.prec = np.atleast_1d(np.asarray(self.prec, dtype=float))
        self.prec_mean = np.atleast_1d(np.asarray(self.prec_mean, dtype=complex))
        if self.prec.ndim != 1 or self.prec.shape != self.prec_mean.shape:
            raise ValueError("prec and prec_mean must be 1-d and equally sized")
        if not (np.all(np.isfinite(self.prec)) and np.all(np.isfinite(self.prec_mean))):
            raise ValueError("natural parameters must be finite")
        if np.any(self.prec < 0):
            raise ValueError("precision must be nonnegative")
        if np.any((self.prec == 0) & (self.prec_mean != 0)):
            raise ValueError("prec_mean must vanish where prec == 0")

    @property
    def dim(self) -> int:
        return self.prec.shape[0]

    @property
    def mean(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=complex)
        np.divide(self.prec_mean, self.prec, out=out, where=self.prec > 0)
        return out

    @property
    def variance(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.prec > 0, 1.0 / self.prec, np.inf)

    @classmethod
    def from_moments(cls, mean, var) -> "DiagGaussian":
        mean = np.atleast_1d(np.asarray(mean, dtype=complex))
        var = np.atleast_1d(np.asarray(var, dtype=float))
        if np.any(var <= 0):
            raise ValueError("variance must be positive")
        prec = 1.0 / var
        return cls(prec, prec * mean)

    @classmethod
    def noninformative(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim, dtype=complex))


@dataclass
class FullGaussian:
    """CN(mean, cov) with a full Hermitian PSD covariance."""

    mean: np.ndarray  # (n,) complex
    cov: np.ndarray   # (n, n) complex Hermitian

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=complex))
        self.cov = np.asarray(self.cov, dtype=complex)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError("cov must be square and match the mean dimension")
        scale = max(np.abs(self.cov).max(), 1e-300)
        if np.abs(self.cov - self.cov.conj().T).max() > 1e-12 * scale:
            raise ValueError("cov must be Hermitian")
        trace = self.cov.trace().real
        if np.linalg.eigvalsh(self.cov).min() < -1e-10 * max(trace, 0.0) / n:
            raise ValueError("cov must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class Categorical:
    """Normalized pmf over an ordered constellation."""

    points: np.ndarray  # (S,) complex
    pmf: np.ndarray     # (S,) real

    def __post_init__(self):
        self.points = np.atleast_1d(np.asarray(self.points, dtype=complex))
        self.pmf = np.atleast_1d(np.asarray(self.pmf, dtype=float))
        if self.points.shape != self.pmf.shape or self.points.ndim != 1:
            raise ValueError("points and pmf must be 1-d and equally sized")
        if np.any(self.pmf < 0) or abs(self.pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be nonnegative and sum to 1")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def gaussian_product(a: DiagGaussian, b: DiagGaussian) -> DiagGaussian:
    """Product of two diagonal Gaussian messages (natural parameters add)."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return DiagGaussian(a.prec + b.prec, a.prec_mean + b.prec_mean)


def gaussian_divide(
    num: DiagGaussian,
    den: DiagGaussian,
    floor: float = 1e-8,
    stats: ClampStats | None = None,
) -> DiagGaussian:
    """Quotient of two diagonal Gaussian messages.

    Componentwise precision subtraction. Components whose resulting
    precision falls below `floor` are clamped to `floor` with the computed
    mean preserved; occurrences are counted in `stats` when given.
    """
    if num.dim != den.dim:
        raise ValueError(f"dimension mismatch: {num.dim} vs {den.dim}")
    if floor <= 0:
        raise ValueError("floor must be positive")
    prec = num.prec - den.prec
    prec_mean = num.prec_mean - den.prec_mean
    low = prec < floor
    if np.any(low):
        # preserve the quotient mean; fall back to the numerator mean when
        # the quotient precision is exactly zero
        mean = np.array(num.mean)
        nz = low & (prec != 0)
        mean[nz] = prec_mean[nz] / prec[nz]
        prec = np.where(low, floor, prec)
        prec_mean = np.where(low, floor * mean, prec_mean)
        if stats is not None:
            stats.count += int(low.sum())
    return DiagGaussian(prec, prec_mean)


def categorical_moments(msg: Categorical) -> tuple[complex, float, float]:
    """Mean, variance and second-order moment of a normalized symbol pmf."""
    m = complex(msg.pmf @ msg.points)
    r = float(msg.pmf @ (np.abs(msg.points) ** 2))
    tau = r - abs(m) ** 2
    return m, tau, r


def project_mixture_diag(weights, means, covs) -> DiagGaussian:
    """Moment-match a Gaussian mixture onto a diagonal-covariance Gaussian.

    weights: (S,) pmf or Categorical; means: (S, n) component means;
    covs: (S, n, n) component covariances. The result has the mixture mean
    and the diagonal of the mixture covariance (off-diagonals discarded).
    """
    pmf = weights.pmf if isinstance(weights, Categorical) else np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=complex)
    covs = np.asarray(covs, dtype=complex)
    if means.shape[0] != pmf.shape[0] or covs.shape[0] != pmf.shape[0]:
        raise ValueError("one (mean, cov) pair per mixture weight required")
    if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a normalized pmf")
    n = means.shape[1]
    diag = np.einsum("sii->si", covs.reshape(-1, n, n)).real
    mean = pmf @ means
    second = pmf @ (diag + np.abs(means) ** 2)
    var = second - np.abs(mean) ** 2
    if np.any(var <= 0):
        raise ValueError("degenerate mixture: zero variance component")
    return DiagGaussian.from_moments(mean, var)


def parallel_sum_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Max relative deviation between the three forms of (A^-1 + B^-1)^-1.

    The identity (A^-1 + B^-1)^-1 = A (A+B)^-1 B = B (A+B)^-1 A holds for
    invertible A, B; singular inputs raise numpy.linalg.LinAlgError.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    e1 = np.linalg.inv(np.linalg.inv(a) + np.linalg.inv(b))
    e2 = a @ np.linalg.solve(a + b, b)
    e3 = b @ np.linalg.solve(a + b, a)
    scale = max(np.linalg.norm(e1), np.linalg.norm(e2), np.linalg.norm(e3))
    dev = max(
        np.linalg.norm(e1 - e2),
        np.linalg.norm(e1 - e3),
        np.linalg.norm(e2 - e3),
    )
    return float(dev / scale)


def regularize_cov(cov: np.ndarray, rel_jitter: float = 1e-12) -> np.ndarray:
    """Add diagonal jitter rel_jitter*trace/n when the smallest eigenvalue
    falls below that amount; otherwise return the input unchanged."""
    cov = np.asarray(cov, dtype=complex)
    n = cov.shape[0]
    jitter = rel_jitter * cov.trace().real / n
    if np.linalg.eigvalsh(cov).min() < jitter:
        return cov + jitter * np.eye(n)
    return cov


def complex_gaussian_logpdf(
    obs: np.ndarray,
    mean: np.ndarray,
    cov: np.ndarray,
    rel_jitter: float = 1e-12,
) -> float:
    """Log density of the circularly-symmetric complex Gaussian.

    Convention: pdf = exp(-(z-m)^H C^-1 (z-m)) / (pi^n det C), i.e. the
    returned value is -(z-m)^H C^-1 (z-m) - ln det(pi C). Raises
    numpy.linalg.LinAlgError if cov is not positive definite after the
    jitter floor.
    """
    obs = np.atleast_1d(np.asarray(obs, dtype=complex))
    mean = np.atleast_1d(np.asarray(mean, dtype=complex))
    cov = regularize_cov(np.atleast_2d(cov), rel_jitter)
    n = obs.shape[0]
    chol = np.linalg.cholesky(cov)  # raises if not PD
    resid = obs - mean
    white = np.linalg.solve(chol, resid)
    quad = float(np.vdot(white, white).real)
    logdet = 2.0 * float(np.log(np.diagonal(chol).real).sum())
    return -quad - n * np.log(np.pi) - logdet


def log_normalize(logp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize log pmfs along `axis` (stable logsumexp subtraction)."""
    m = logp.max(axis=axis, keepdims=True)
    out = logp - m
    out -= np.log(np.exp(out).sum(axis=axis, keepdims=True))
    return out
