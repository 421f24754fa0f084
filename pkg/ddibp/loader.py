"""
Data and distance ingestion.
Matrices are header-less CSV with `inf`/`nan` tokens; data tables carry a header row.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd

from .core import INF, DistanceMatrix
from .errors import DimensionMismatchError, DomainError


logger = logging.getLogger(__name__)

DistanceKind = Literal["absolute", "sequential"]


def _check_file(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return path


def read_matrix_csv(path: Path) -> np.ndarray:
    """
    Load a header-less numeric matrix.

    Raises:
        FileNotFoundError: If the file doesn't exist
        DomainError: If a cell is not a number, `inf` or `nan`
    """
    path = _check_file(path)
    frame = pd.read_csv(path, header=None, skipinitialspace=True)
    try:
        matrix = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DomainError(f"Non-numeric cell in {path.name}", detail=str(e))
    logger.info(f"Loaded {matrix.shape[0]}x{matrix.shape[1]} matrix from {path.name}")
    return matrix


def read_data_csv(path: Path) -> Tuple[np.ndarray, List[str]]:
    """
    Load an observation table with a header row.

    Empty cells and `nan` mark missing entries and come back as NaN.

    Returns:
        Tuple of (N x M float matrix, column names)
    """
    path = _check_file(path)
    frame = pd.read_csv(path, header=0, skipinitialspace=True)
    try:
        x = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DomainError(f"Non-numeric cell in {path.name}", detail=str(e))
    n_missing = int(np.isnan(x).sum())
    logger.info(f"Loaded data {x.shape[0]}x{x.shape[1]} from {path.name} ({n_missing} missing entries)")
    return x, [str(c) for c in frame.columns]


def read_covariate_csv(path: Path, column: Optional[str] = None) -> np.ndarray:
    """Load one covariate (e.g. age or time) per customer from a table with a header."""
    path = _check_file(path)
    frame = pd.read_csv(path, header=0, skipinitialspace=True)
    series = frame[column] if column is not None else frame.iloc[:, 0]
    values = pd.to_numeric(series, errors="coerce").to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise DomainError(f"Covariate column in {path.name} must be finite numbers")
    return values


@dataclass
class DistanceBuilder:
    """Builds a DistanceMatrix from a matrix file or from a covariate."""

    kind: DistanceKind = "sequential"

    def from_covariate(self, values: np.ndarray) -> DistanceMatrix:
        """
        d_ij = |t_i - t_j|; the sequential kind sets d_ij = inf for j > i.

        Args:
            values: One covariate value per customer, in customer order
        """
        t = np.asarray(values, dtype=float).ravel()
        d = np.abs(t[:, None] - t[None, :])
        if self.kind == "sequential":
            d[np.triu_indices(t.shape[0], k=1)] = INF
        elif self.kind != "absolute":
            raise DomainError(f"Unknown distance kind: {self.kind}")
        return DistanceMatrix(d)

    def from_matrix_file(self, path: Path) -> DistanceMatrix:
        return DistanceMatrix(read_matrix_csv(path))

    def from_covariate_file(self, path: Path, column: Optional[str] = None) -> DistanceMatrix:
        return self.from_covariate(read_covariate_csv(path, column))

    def build(self, n: int, distances_path: Optional[Path] = None,
              covariate_path: Optional[Path] = None) -> DistanceMatrix:
        """
        Resolve the distance source for n customers.

        A matrix file wins over a covariate file; with neither, customers are
        placed at times 0..n-1.
        """
        if distances_path is not None:
            D = self.from_matrix_file(distances_path)
        elif covariate_path is not None:
            D = self.from_covariate_file(covariate_path)
        else:
            D = self.from_covariate(np.arange(n, dtype=float))
        if D.n != n:
            raise DimensionMismatchError(
                "Distance matrix size does not match the number of customers",
                detail=f"{D.n} vs {n}",
            )
        return D


def zscore(x: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Standardise columns using observed entries only.

    Returns:
        Tuple of (standardised matrix, column means, column stds); constant
        columns keep std 1
    """
    x = np.asarray(x, dtype=float)
    if mask is None:
        mask = np.isnan(x)
    observed = np.where(mask, np.nan, x)
    mean = np.nan_to_num(np.nanmean(observed, axis=0)) if observed.size else np.zeros(x.shape[1])
    std = np.nan_to_num(np.nanstd(observed, axis=0)) if observed.size else np.ones(x.shape[1])
    std[std == 0] = 1.0
    return (x - mean) / std, mean, std
