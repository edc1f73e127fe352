"""Gaussian smoothness priors for nodal conductivity."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .errors import FactorizationFailed, UserError
from .mesh import Mesh2D

# correlation lengths (cm) of the two reference priors
SHORT_CORRELATION = 4.0
LONG_CORRELATION = 8.0
DEFAULT_VARIANCE = 0.25  # (uS/cm)^2
DEFAULT_MEAN = 3.0  # uS/cm, six prior standard deviations


@dataclass(frozen=True)
class SmoothnessKernel:
    """Squared-exponential covariance with a relative nugget on the diagonal."""

    nodal_variance: float = DEFAULT_VARIANCE
    correlation_length: float = SHORT_CORRELATION
    nugget: float = 1e-4

    def __post_init__(self):
        if not self.nodal_variance > 0:
            raise UserError(f"nodal variance must be positive, got {self.nodal_variance}")
        if not self.correlation_length > 0:
            raise UserError(f"correlation length must be positive, got {self.correlation_length}")
        if not 0 <= self.nugget <= 1e-4:
            raise UserError(f"nugget must lie in [0, 1e-4], got {self.nugget}")

    def covariance(self, points: np.ndarray) -> np.ndarray:
        d2 = cdist(points, points, "sqeuclidean")
        G = self.nodal_variance * np.exp(-d2 / (2 * self.correlation_length**2))
        G[np.diag_indices_from(G)] = self.nodal_variance * (1 + self.nugget)
        return G


def pr1(variance: float = DEFAULT_VARIANCE) -> SmoothnessKernel:
    return SmoothnessKernel(variance, SHORT_CORRELATION)


def pr2(variance: float = DEFAULT_VARIANCE) -> SmoothnessKernel:
    return SmoothnessKernel(variance, LONG_CORRELATION)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """N(mean, cov) over nodal conductivity in uS/cm.

    ``chol_cov`` is lower triangular with chol_cov chol_cov' = cov, and
    ``chol_prec`` = inv(chol_cov), so chol_prec' chol_prec = inv(cov).
    """

    mean: np.ndarray
    cov: np.ndarray
    chol_cov: np.ndarray
    chol_prec: np.ndarray
    kernel: SmoothnessKernel | None = None
    mesh_hash: str = ""

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def mean_value(self) -> float:
        return float(self.mean.mean())

    def precision(self) -> np.ndarray:
        return self.chol_prec.T @ self.chol_prec

    def sample(self, count: int, rng_seed) -> np.ndarray:
        """(count, dim) array of draws; identical seeds give identical arrays."""
        if count < 1:
            raise UserError(f"sample count must be >= 1, got {count}")
        rng = np.random.default_rng(rng_seed)
        w = rng.standard_normal((self.dim, count))
        return (self.mean[:, None] + self.chol_cov @ w).T

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.mean, self.cov):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def prior_from_covariance(mean, cov, kernel=None, mesh_hash="") -> GaussianPrior:
    cov = np.asarray(cov, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (cov.shape[0],)).copy()
    try:
        Lc = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailed(
            "prior covariance is numerically indefinite; raise the nugget"
        ) from exc
    Lp = solve_triangular(Lc, np.eye(len(mean)), lower=True)
    return GaussianPrior(mean, cov, Lc, Lp, kernel, mesh_hash)


def build_prior(mesh: Mesh2D, kernel: SmoothnessKernel, mean_value: float = DEFAULT_MEAN) -> GaussianPrior:
    return prior_from_covariance(
        mean_value, kernel.covariance(mesh.vertices), kernel, mesh.content_hash()
    )


def sample(prior: GaussianPrior, count: int, rng_seed) -> np.ndarray:
    return prior.sample(count, rng_seed)
