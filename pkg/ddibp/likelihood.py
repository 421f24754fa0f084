"""
Collapsed linear-Gaussian observation model X = ZW + noise.
Marginal likelihood P(X|Z), weight posterior and missing-data imputation.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from .core import FeatureMatrix
from .errors import DomainError


logger = logging.getLogger(__name__)

CONDITION_WARNING = 1e12

FeaturesLike = Union[FeatureMatrix, np.ndarray]


@dataclass
class DataMatrix:
    """Observed data with a mask of unobserved entries (True = missing)."""

    x: np.ndarray
    missing_mask: np.ndarray = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        if self.x.ndim != 2:
            raise DomainError("Data must be a 2-D matrix", detail=f"shape {self.x.shape}")
        if self.missing_mask is None:
            self.missing_mask = np.zeros(self.x.shape, dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != self.x.shape:
            raise DomainError("Missing mask shape mismatch")
        if not np.all(np.isfinite(self.x[~self.missing_mask])):
            raise DomainError("Observed entries must be finite")

    @property
    def shape(self):
        return self.x.shape

    @property
    def has_missing(self) -> bool:
        return bool(self.missing_mask.any())

    def copy(self) -> "DataMatrix":
        return DataMatrix(self.x.copy(), self.missing_mask.copy())

    @classmethod
    def from_array(cls, raw: np.ndarray) -> "DataMatrix":
        """
        Build from a raw matrix in which NaN marks a missing entry.

        Missing entries start at the observed column mean (0 if a column has no
        observed values).
        """
        raw = np.array(raw, dtype=float)
        mask = np.isnan(raw)
        x = raw.copy()
        if mask.any():
            counts = (~mask).sum(axis=0)
            sums = np.where(mask, 0.0, raw).sum(axis=0)
            means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
            x[mask] = np.broadcast_to(means, raw.shape)[mask]
        return cls(x, mask)


@dataclass(frozen=True)
class NoiseParams:
    """Observation noise std sigma_x and weight prior std sigma_w."""

    sigma_x: float = 1.0
    sigma_w: float = 1.0

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_w > 0):
            raise DomainError("Noise scales must be positive", detail=f"sigma_x={self.sigma_x}, sigma_w={self.sigma_w}")


@dataclass
class WeightPosterior:
    """Gaussian posterior over W: columns share the K x K row covariance."""

    mean: np.ndarray
    row_covariance: np.ndarray


def _active(Z: FeaturesLike) -> np.ndarray:
    if isinstance(Z, FeatureMatrix):
        return Z.active()
    z = np.asarray(Z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return z[:, z.any(axis=0)]


def _observed_values(X: Union[DataMatrix, np.ndarray]) -> np.ndarray:
    x = X.x if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("Data contains non-finite values")
    return x


def _factor_h(z: np.ndarray, noise: NoiseParams):
    K = z.shape[1]
    H = z.T @ z + (noise.sigma_x ** 2 / noise.sigma_w ** 2) * np.eye(K)
    factor = linalg.cho_factor(H, lower=True)
    diag = np.diag(factor[0])
    if K and (diag.max() / diag.min()) ** 2 > CONDITION_WARNING:
        logger.warning(f"Ill-conditioned H (K={K}, sigma_x={noise.sigma_x:.3g}, sigma_w={noise.sigma_w:.3g})")
    return factor, 2.0 * np.log(diag).sum()


def collapsed_loglik(X: Union[DataMatrix, np.ndarray], Z: FeaturesLike, noise: NoiseParams) -> float:
    """
    log P(X|Z) with W integrated out, using the active columns of Z.

    Args:
        X: N x M data (current imputations included)
        Z: Feature matrix
        noise: Noise scales

    Returns:
        Log marginal likelihood
    """
    x = _observed_values(X)
    z = _active(Z)
    N, M = x.shape
    K = z.shape[1]
    quad = float(np.sum(x * x))
    logdet = 0.0
    if K:
        factor, logdet = _factor_h(z, noise)
        ztx = z.T @ x
        quad -= float(np.sum(ztx * linalg.cho_solve(factor, ztx)))
    return (
        -quad / (2.0 * noise.sigma_x ** 2)
        - 0.5 * N * M * np.log(2.0 * np.pi)
        - (N - K) * M * np.log(noise.sigma_x)
        - K * M * np.log(noise.sigma_w)
        - 0.5 * M * logdet
    )


def gaussian_column_loglik(X: Union[DataMatrix, np.ndarray], Z: FeaturesLike, noise: NoiseParams) -> float:
    """Sum over columns of log N(x_m; 0, sigma_w^2 Z Z^T + sigma_x^2 I)."""
    x = _observed_values(X)
    z = _active(Z)
    N = x.shape[0]
    cov = noise.sigma_w ** 2 * (z @ z.T) + noise.sigma_x ** 2 * np.eye(N)
    return float(multivariate_normal(mean=np.zeros(N), cov=cov).logpdf(x.T).sum())


def weight_posterior(X: Union[DataMatrix, np.ndarray], Z: FeaturesLike, noise: NoiseParams) -> WeightPosterior:
    """Posterior of W given X and Z: mean H^-1 Z^T X, row covariance sigma_x^2 H^-1."""
    x = _observed_values(X)
    z = _active(Z)
    K = z.shape[1]
    if K == 0:
        return WeightPosterior(mean=np.zeros((0, x.shape[1])), row_covariance=np.zeros((0, 0)))
    factor, _ = _factor_h(z, noise)
    mean = linalg.cho_solve(factor, z.T @ x)
    cov = noise.sigma_x ** 2 * linalg.cho_solve(factor, np.eye(K))
    return WeightPosterior(mean=mean, row_covariance=0.5 * (cov + cov.T))


def sample_missing(X: DataMatrix, Z: FeaturesLike, noise: NoiseParams, rng: np.random.Generator) -> DataMatrix:
    """Redraw masked entries from (ZW)_im + N(0, sigma_x^2) with W drawn from its posterior."""
    if not X.has_missing:
        return X
    z = _active(Z)
    post = weight_posterior(X, z, noise)
    K, M = post.mean.shape
    mu = np.zeros(X.shape)
    if K:
        chol = np.linalg.cholesky(post.row_covariance)
        W = post.mean + chol @ rng.standard_normal((K, M))
        mu = z @ W
    draw = mu + noise.sigma_x * rng.standard_normal(X.shape)
    x = np.where(X.missing_mask, draw, X.x)
    return DataMatrix(x, X.missing_mask.copy())


def sample_data(Z: FeaturesLike, noise: NoiseParams, M: int, rng: np.random.Generator) -> np.ndarray:
    """Forward simulation X = ZW + noise with W ~ N(0, sigma_w^2)."""
    z = _active(Z)
    W = noise.sigma_w * rng.standard_normal((z.shape[1], M))
    return z @ W + noise.sigma_x * rng.standard_normal((z.shape[0], M))


def reconstruction_error(imputed: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> dict:
    """
    Squared reconstruction error on the masked entries.

    Returns:
        Dict with mse, n_missing and per-entry residual rows
    """
    rows, cols = np.nonzero(mask)
    residual = imputed[rows, cols] - truth[rows, cols]
    return {
        "mse": float(np.mean(residual ** 2)) if residual.size else 0.0,
        "n_missing": int(residual.size),
        "residuals": [
            {"row": int(r), "col": int(c), "truth": float(truth[r, c]),
             "imputed": float(imputed[r, c]), "residual": float(e)}
            for r, c, e in zip(rows, cols, residual)
        ],
    }
