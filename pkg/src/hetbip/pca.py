"""Principal component analysis via a thin SVD of the centered data."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (r, d), orthonormal rows
    explained_variance: np.ndarray  # (r,), non-increasing
    requested: int

    @property
    def n_components(self) -> int:
        return len(self.components)


def pca_fit(X, r: int, rank_tol: float = 1e-12) -> PcaModel:
    """Top-``r`` principal directions of ``X`` (rows are samples).

    When ``r`` exceeds the numerical rank of the centered data only the
    rank-many components are kept and a warning is logged.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-D array")
    if r < 1:
        raise ValueError("r must be >= 1")
    n, d = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    # thin SVD is better conditioned than forming the covariance explicitly
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2 / max(n - 1, 1)
    rank = int(np.sum(s > rank_tol * max(s[0] if len(s) else 0.0, 1.0)))
    keep = min(r, rank) if rank > 0 else min(r, 1)
    if keep < r:
        log.warning("requested %d components but data rank is %d; keeping %d", r, rank, keep)
    comps = Vt[:keep]
    # fix signs so the largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.arange(keep), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    return PcaModel(mean, comps, var[:keep], r)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (X - model.mean) @ model.components.T
