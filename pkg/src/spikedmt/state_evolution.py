"""State-evolution recursions on the overlap vector q = (q1, q2, q3, q4).

Overlap vectors are plain length-4 float arrays; :func:`as_overlaps`
validates them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import ModelParams

UNINFORMATIVE_BAYES = 0.05
UNINFORMATIVE_ML = 0.2
INFORMATIVE = 0.9


def as_overlaps(q, tol: float = 1e-12) -> np.ndarray:
    """Validate an overlap vector: four finite entries in [0, 1]."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ConfigurationError(f"overlap vector must have 4 entries, got shape {q.shape}")
    if np.isnan(q).any():
        raise ConfigurationError("overlap vector contains NaN")
    if (q < -tol).any() or (q > 1 + tol).any():
        raise ConfigurationError(f"overlaps must lie in [0, 1]: {q}")
    return np.clip(q, 0.0, 1.0)


@dataclass(frozen=True)
class SEKind:
    """Which recursion to iterate.

    name is one of "bayes", "ml", "seq1" (matrix-only ML stage) and
    "seq2" (tensor ML stage with q1 frozen at ``q1_mat``).
    """

    name: str
    rho: float = 1.0
    q1_mat: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("bayes", "ml", "seq1", "seq2"):
            raise ConfigurationError(f"unknown SE kind {self.name!r}")
        if not self.rho > 0:
            raise ConfigurationError("rho must be > 0")
        if self.name == "seq2":
            if self.q1_mat is None or not 0.0 <= self.q1_mat <= 1.0:
                raise ConfigurationError("seq2 needs q1_mat in [0, 1]")

    @classmethod
    def bayes(cls) -> "SEKind":
        return cls("bayes")

    @classmethod
    def ml(cls, rho: float = 1.0) -> "SEKind":
        return cls("ml", float(rho))

    @classmethod
    def stage1(cls) -> "SEKind":
        return cls("seq1")

    @classmethod
    def stage2(cls, q1_mat: float) -> "SEKind":
        return cls("seq2", 1.0, float(q1_mat))


def channel_map(q, params: ModelParams, rho: Optional[float] = None) -> np.ndarray:
    """g(q) for tensor weight 1/rho.  rho=inf drops the tensor terms."""
    rho = params.rho if rho is None else rho
    q1, q2, q3, q4 = np.asarray(q, dtype=np.float64)
    a2, a3, a4 = params.alpha2, params.alpha3, params.alpha4
    dm, dt = params.delta_m, params.delta_t
    ct = 1.0 / (rho * dt)
    return np.array([a2 / dm * q2 + a3 * a4 * ct * q3 * q4,
                     q1 / dm,
                     a4 * ct * q1 * q4,
                     a3 * ct * q1 * q3])


def _channel_jacobian(q, params: ModelParams, rho: float) -> np.ndarray:
    q1, q2, q3, q4 = q
    a2, a3, a4 = params.alpha2, params.alpha3, params.alpha4
    dm = params.delta_m
    ct = 1.0 / (rho * params.delta_t)
    return np.array([[0.0, a2 / dm, a3 * a4 * ct * q4, a3 * a4 * ct * q3],
                     [1.0 / dm, 0.0, 0.0, 0.0],
                     [a4 * ct * q4, 0.0, 0.0, a4 * ct * q1],
                     [a3 * ct * q3, 0.0, a3 * ct * q1, 0.0]])


def ml_variances(params: ModelParams, rho: float) -> np.ndarray:
    """c_k = g_{k, rho^2}(1), the noise variance of the ML fields."""
    return channel_map(np.ones(4), params, rho * rho)


def _seq_parts(q, kind: SEKind, params: ModelParams):
    """Effective (g, c, mask) of the two sequential stages."""
    q = np.asarray(q, dtype=np.float64)
    if kind.name == "seq1":
        g = channel_map(q, params, math.inf)
        c = channel_map(np.ones(4), params, math.inf)
        mask = np.array([True, True, False, False])
    else:
        qq = q.copy()
        qq[0] = kind.q1_mat
        g = channel_map(qq, params, 1.0)
        c = channel_map(np.ones(4), params, 1.0)
        mask = np.array([False, False, True, True])
    return g, c, mask


def se_step(q, kind: SEKind, params: ModelParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if kind.name == "bayes":
        g = channel_map(q, params, 1.0)
        return g / (1.0 + g)
    if kind.name == "ml":
        g = channel_map(q, params, kind.rho)
        c = ml_variances(params, kind.rho)
        return g / np.sqrt(c + g * g)
    g, c, mask = _seq_parts(q, kind, params)
    out = q.copy()
    if kind.name == "seq2":
        out[0] = kind.q1_mat
    gm, cm = g[mask], c[mask]
    out[mask] = gm / np.sqrt(cm + gm * gm)
    return out


def se_jacobian(q, kind: SEKind, params: ModelParams) -> np.ndarray:
    """d q'_k / d q_l at q.

    For the sequential stages only the active block is filled; frozen
    coordinates are not part of the dynamics and their rows/columns are zero.
    """
    q = np.asarray(q, dtype=np.float64)
    if kind.name == "bayes":
        g = channel_map(q, params, 1.0)
        return (1.0 / (1.0 + g) ** 2)[:, None] * _channel_jacobian(q, params, 1.0)
    if kind.name == "ml":
        g = channel_map(q, params, kind.rho)
        c = ml_variances(params, kind.rho)
        fp = c / (c + g * g) ** 1.5
        return fp[:, None] * _channel_jacobian(q, params, kind.rho)
    g, c, mask = _seq_parts(q, kind, params)
    if kind.name == "seq1":
        D = _channel_jacobian(q, params, math.inf)
    else:
        qq = q.copy()
        qq[0] = kind.q1_mat
        D = _channel_jacobian(qq, params, 1.0)
        D[:, 0] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        fp = np.where(mask, c / (c + g * g) ** 1.5, 0.0)
    J = fp[:, None] * D
    J[~mask, :] = 0.0
    J[:, ~mask] = 0.0
    return J


def spectral_radius(J: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(J))))


@dataclass(frozen=True)
class SEResult:
    q: np.ndarray
    trace: np.ndarray       # (iterations + 1, 4), trace[0] = q0
    converged: bool
    iterations: int


def run_se(q0, kind: SEKind, params: ModelParams, tol: float = 1e-12,
           max_iters: int = 100_000, keep_trace: bool = True) -> SEResult:
    """Iterate se_step until the sup-norm change drops below tol."""
    if not tol > 0:
        raise ConfigurationError("tol must be > 0")
    q = as_overlaps(q0)
    if not keep_trace and kind.name in ("bayes", "ml"):
        return _run_scalar(q, kind, params, tol, max_iters)
    trace = [q] if keep_trace else None
    converged = False
    it = 0
    while it < max_iters:
        nxt = se_step(q, kind, params)
        it += 1
        if keep_trace:
            trace.append(nxt)
        delta = np.max(np.abs(nxt - q))
        q = nxt
        if delta < tol:
            converged = True
            break
    arr = np.array(trace) if keep_trace else q[None]
    return SEResult(q, arr, converged, it)


def _run_scalar(q, kind, params, tol, max_iters):
    # Same recursion on Python floats; ~20x faster for long runs.
    a2, a3, a4 = params.alpha2, params.alpha3, params.alpha4
    dm = params.delta_m
    rho = 1.0 if kind.name == "bayes" else kind.rho
    ct = 1.0 / (rho * params.delta_t)
    bayes = kind.name == "bayes"
    if not bayes:
        c1, c2, c3, c4 = ml_variances(params, rho).tolist()
    q1, q2, q3, q4 = q.tolist()
    converged = False
    it = 0
    sqrt = math.sqrt
    while it < max_iters:
        g1 = a2 / dm * q2 + a3 * a4 * ct * q3 * q4
        g2 = q1 / dm
        g3 = a4 * ct * q1 * q4
        g4 = a3 * ct * q1 * q3
        if bayes:
            n1, n2, n3, n4 = g1 / (1 + g1), g2 / (1 + g2), g3 / (1 + g3), g4 / (1 + g4)
        else:
            n1 = g1 / sqrt(c1 + g1 * g1)
            n2 = g2 / sqrt(c2 + g2 * g2)
            n3 = g3 / sqrt(c3 + g3 * g3)
            n4 = g4 / sqrt(c4 + g4 * g4)
        it += 1
        delta = max(abs(n1 - q1), abs(n2 - q2), abs(n3 - q3), abs(n4 - q4))
        q1, q2, q3, q4 = n1, n2, n3, n4
        if delta < tol:
            converged = True
            break
    out = np.array([q1, q2, q3, q4])
    return SEResult(out, out[None], converged, it)


def run_sequential_se(params: ModelParams, q0=None, tol: float = 1e-12,
                      max_iters: int = 100_000) -> SEResult:
    """Stage 1 to convergence, then stage 2 with q1 frozen."""
    q0 = np.full(4, UNINFORMATIVE_ML) if q0 is None else q0
    first = run_se(q0, SEKind.stage1(), params, tol, max_iters)
    second = run_se(first.q, SEKind.stage2(float(first.q[0])), params, tol, max_iters)
    trace = np.vstack([first.trace, second.trace[1:]])
    return SEResult(second.q, trace, first.converged and second.converged,
                    first.iterations + second.iterations)


def se_kind_for(estimator: str, rho: float = 1.0) -> SEKind:
    return SEKind.bayes() if estimator == "bayes" else SEKind.ml(rho)


def uninformative_init(estimator: str) -> np.ndarray:
    return np.full(4, UNINFORMATIVE_BAYES if estimator == "bayes" else UNINFORMATIVE_ML)
