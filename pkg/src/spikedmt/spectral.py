"""Two-stage spectral estimator and the BBP overlap prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .model import EstimateSet, PlantedInstance


@dataclass(frozen=True)
class SingularTriplet:
    value: float
    left: np.ndarray
    right: np.ndarray
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0


def top_singular_triplet(M: np.ndarray, tol: float = 1e-10, max_iters: int = 10_000,
                         seed: int = 0, start: Optional[np.ndarray] = None) -> SingularTriplet:
    """Leading singular triplet of M by alternating power iteration.

    Stops once ``||M r - s l|| <= tol ||M||_F`` (which also makes the change
    of the left vector between sweeps negligible).  If that never happens the
    last iterate is returned with ``converged=False``, typically because the
    top two singular values are nearly equal.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ConfigurationError("M must be a finite 2-d array")
    fro = float(np.linalg.norm(M))
    if fro == 0:
        raise ConfigurationError("M must be nonzero")
    if start is None:
        left = np.random.default_rng(seed).standard_normal(M.shape[0])
    else:
        left = np.asarray(start, dtype=np.float64).copy()
    left /= np.linalg.norm(left)
    converged = False
    it = 0
    value = 0.0
    right = np.zeros(M.shape[1])
    res = math.inf
    while it < max_iters:
        it += 1
        r = M.T @ left
        value = float(np.linalg.norm(r))
        if value == 0:
            # start orthogonal to the row space; nudge it deterministically
            left = np.random.default_rng(seed + it).standard_normal(M.shape[0])
            left /= np.linalg.norm(left)
            continue
        right = r / value
        ml = M @ right
        res = float(np.linalg.norm(ml - value * left))
        left = ml / np.linalg.norm(ml)
        if res <= tol * fro:
            converged = True
            break
    # final consistent pair: right from left, value from right
    r = M.T @ left
    value = float(np.linalg.norm(r))
    right = r / value
    return SingularTriplet(value, left, right, converged, it, res)


def bbp_overlap_prediction(sigma: float, delta: float, alpha: float) -> Tuple[float, float]:
    """Squared overlaps of the top singular vectors of sigma a b^T + sqrt(delta) Z / sqrt(n).

    ``alpha`` is the aspect ratio (rows / columns) of the matrix; the left
    overlap refers to the row-side spike.  Returns (left^2, right^2).
    """
    if sigma < 0 or not delta > 0 or not alpha > 0:
        raise ConfigurationError("need sigma >= 0, delta > 0, alpha > 0")
    th = sigma * sigma / delta
    if th == 0:
        return 0.0, 0.0
    if math.isinf(th):
        return 1.0, 1.0
    left = 1.0 - alpha * (1.0 + th) / (th * (th + alpha))
    right = 1.0 - (alpha + th) / (th * (th + 1.0))
    return max(0.0, left), max(0.0, right)


@dataclass(frozen=True)
class SpectralDiagnostics:
    stage1: SingularTriplet
    stage2: SingularTriplet

    @property
    def converged(self) -> bool:
        return self.stage1.converged and self.stage2.converged


def sequential_pca(instance: PlantedInstance, tol: float = 1e-9, max_iters: int = 5000,
                   seed: int = 0) -> Tuple[EstimateSet, SpectralDiagnostics]:
    """Top pair of Y_m/sqrt(n2), then top pair of (Y_t contracted with u_hat)/sqrt(n4)."""
    n1, n2, n3, n4 = instance.dims.sizes
    s1 = top_singular_triplet(instance.y_m / math.sqrt(n2), tol, max_iters, seed)
    m2 = instance.tensor.contract_mode1(s1.left) / math.sqrt(n4)
    s2 = top_singular_triplet(m2, tol, max_iters, seed + 1)
    est = EstimateSet.spherical((s1.left, s1.right, s2.left, s2.right))
    return est, SpectralDiagnostics(s1, s2)
