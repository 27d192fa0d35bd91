"""Thresholds, phase regions, fixed points, stability, free energy and spinodals."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError
from .model import ModelParams
from .state_evolution import (INFORMATIVE, SEKind, channel_map, ml_variances, run_se,
                              se_jacobian, se_step, spectral_radius, uninformative_init)

ESTIMATORS = ("bayes", "ml")


def _check_estimator(estimator: str) -> None:
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")


class PhaseRegion(str, enum.Enum):
    R0 = "R0"
    RM = "Rm"
    RT = "Rt"


def delta_c(alpha2: float, alpha3: float, alpha4: float, delta_m: float) -> float:
    """Tensor threshold sqrt(a3 a4) (a2 - dm^2) / (a2 + dm)."""
    return math.sqrt(alpha3 * alpha4) * (alpha2 - delta_m ** 2) / (alpha2 + delta_m)


def delta_c_bayes(params: ModelParams) -> float:
    return delta_c(params.alpha2, params.alpha3, params.alpha4, params.delta_m)


@dataclass(frozen=True)
class EffectiveConstants:
    alpha2_tilde: float
    delta_c_tilde: float
    q_m_tilde: Tuple[float, float]


def alpha2_tilde(params: ModelParams, rho: Optional[float] = None) -> float:
    rho = params.rho if rho is None else rho
    a2, dm = params.alpha2, params.delta_m
    m = a2 / dm
    return a2 * m / (m + params.alpha3 * params.alpha4 / (rho * rho * params.delta_t))


def effective_constants_ml(params: ModelParams, rho: Optional[float] = None) -> EffectiveConstants:
    a2t = alpha2_tilde(params, rho)
    dm = params.delta_m
    dct = delta_c(a2t, params.alpha3, params.alpha4, dm)
    x1 = (a2t - dm * dm) / (a2t + dm)
    x2 = (a2t - dm * dm) / (a2t * (1 + dm))
    qm = (math.sqrt(x1), math.sqrt(x2)) if x1 > 0 else (0.0, 0.0)
    return EffectiveConstants(a2t, dct, qm)


def _thresholds(params: ModelParams, estimator: str) -> Tuple[float, float]:
    """(effective alpha2, tensor threshold) for the estimator."""
    _check_estimator(estimator)
    if estimator == "bayes":
        return params.alpha2, delta_c_bayes(params)
    eff = effective_constants_ml(params)
    return eff.alpha2_tilde, eff.delta_c_tilde


def classify_region(params: ModelParams, estimator: str = "bayes") -> PhaseRegion:
    """R0 / Rm / Rt.  Ties (dm = sqrt(a2), dt = delta_c) resolve to Rm."""
    a2, dc = _thresholds(params, estimator)
    if params.delta_m > math.sqrt(a2):
        return PhaseRegion.R0
    if params.delta_t < dc:
        return PhaseRegion.RT
    return PhaseRegion.RM


def rank_one_system_solve(a: float, b: float, delta: float) -> Tuple[float, float]:
    """Non-trivial solution of x1 = a x2/(delta + a x2), x2 = b x1/(delta + b x1).

    Values are returned as is, so they are negative when ab < delta^2 (no
    solution in the unit square besides the origin).  a = 0 or b = 0 gives
    the origin.
    """
    if a < 0 or b < 0 or not delta > 0:
        raise ConfigurationError("need a, b >= 0 and delta > 0")
    if a == 0 or b == 0:
        return 0.0, 0.0
    num = a * b - delta * delta
    return num / (b * (a + delta)), num / (a * (b + delta))


def matrix_fixed_point(params: ModelParams, estimator: str = "bayes") -> Optional[np.ndarray]:
    """The matrix-only fixed point (q1, q2, 0, 0), or None when it does not exist."""
    _check_estimator(estimator)
    dm = params.delta_m
    if estimator == "bayes":
        x1, x2 = rank_one_system_solve(params.alpha2, 1.0, dm)
        if x1 <= 0:
            return None
        return np.array([x1, x2, 0.0, 0.0])
    eff = effective_constants_ml(params)
    if eff.alpha2_tilde <= dm * dm:
        return None
    return np.array([eff.q_m_tilde[0], eff.q_m_tilde[1], 0.0, 0.0])


def sequential_overlaps(params: ModelParams) -> np.ndarray:
    """Limiting |overlaps| of the two-stage spectral estimator."""
    x1, x2 = rank_one_system_solve(params.alpha2, 1.0, params.delta_m)
    if x1 <= 0:
        return np.zeros(4)
    q1s = x1
    a3, a4, dt = params.alpha3, params.alpha4, params.delta_t
    x3, x4 = rank_one_system_solve(a4 * q1s, a3 * q1s, dt)
    q = np.array([math.sqrt(x1), math.sqrt(x2), 0.0, 0.0])
    if x3 > 0:
        q[2] = math.sqrt(x3)
        q[3] = math.sqrt(x4)
    return q


def _fprime0(params: ModelParams, estimator: str) -> np.ndarray:
    if estimator == "bayes":
        return np.ones(4)
    return 1.0 / np.sqrt(ml_variances(params, params.rho))


def stability_null(params: ModelParams, estimator: str = "bayes") -> bool:
    _check_estimator(estimator)
    d = _fprime0(params, estimator)
    return params.alpha2 / params.delta_m ** 2 * d[0] * d[1] < 1.0


def stability_matrix_fp(params: ModelParams, estimator: str = "bayes") -> bool:
    """Both linear-stability inequalities at the matrix fixed point.

    Returns False when the matrix fixed point does not exist.
    """
    q = matrix_fixed_point(params, estimator)
    if q is None:
        return False
    rho = 1.0 if estimator == "bayes" else params.rho
    g = channel_map(q, params, rho)
    if estimator == "bayes":
        d = 1.0 / (1.0 + g) ** 2
    else:
        c = ml_variances(params, rho)
        d = c / (c + g * g) ** 1.5
    mat = params.alpha2 / params.delta_m ** 2 * d[0] * d[1]
    ten = (params.alpha3 * params.alpha4 / (rho * params.delta_t) ** 2) * q[0] ** 2 * d[2] * d[3]
    return bool(mat < 1.0 and ten < 1.0)


def free_energy(q, params: ModelParams) -> float:
    """Replica free energy whose local minima are the stable Bayes fixed points.

    f(q) = -(a2/(2 dm)) q1 q2 - (a3 a4/(2 dt)) q1 q3 q4
           - 1/2 sum_k a_k [q_k + log(1 - q_k)],     a1 = 1.
    Returns +inf when some q_k >= 1.
    """
    q = np.asarray(q, dtype=np.float64)
    if (q >= 1.0).any():
        return math.inf
    a = params.alphas
    val = (params.alpha2 / (2 * params.delta_m) * q[0] * q[1]
           + params.alpha3 * params.alpha4 / (2 * params.delta_t) * q[0] * q[2] * q[3]
           + 0.5 * float(np.sum(a * (q + np.log1p(-q)))))
    return -val


# --- matrix-tensor fixed points -------------------------------------------

def _tensor_sq(z, params: ModelParams):
    """(q3^2 or q3, q4^2 or q4) as functions of z = q1 (Bayes) or q1^2 (ML)."""
    a3, a4, dt = params.alpha3, params.alpha4, params.delta_t
    num = a3 * a4 * z * z - dt * dt
    return num / (a3 * z * (a4 * z + dt)), num / (a4 * z * (a3 * z + dt))


def fp_residual(q1, params: ModelParams, estimator: str = "bayes"):
    """Scalar residual whose zeros in (0, 1] are the matrix-tensor fixed points.

    Bayes: the cleared-denominator degree-6 polynomial in q1.
    ML: c1 q1^2 + g1^2 (q1^2 - 1), with q3 q4 continued with its sign.
    Both are negative near 0 and positive at q1 = 1.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    a2, a3, a4 = params.alpha2, params.alpha3, params.alpha4
    dm, dt = params.delta_m, params.delta_t
    if estimator == "bayes":
        p = a3 * a4 * q1 * q1 - dt * dt
        den = (a4 * q1 + dt) * (a3 * q1 + dt)
        return (q1 * q1 * q1 * den * (dm + q1)
                + (q1 - 1) * (a2 / dm * q1 ** 3 * den + p * p * (dm + q1) / dt))
    _check_estimator(estimator)
    rho = params.rho
    x = q1 * q1
    p = a3 * a4 * x * x - dt * dt
    s = p / (x * np.sqrt(a3 * a4 * (a4 * x + dt) * (a3 * x + dt)))
    g1 = a2 / dm * np.sqrt(x / (dm + x)) + a3 * a4 / (rho * dt) * s
    c1 = a2 / dm + a3 * a4 / (rho * rho * dt)
    return c1 * x + g1 * g1 * (x - 1)


def reconstruct(q1: float, params: ModelParams, estimator: str = "bayes") -> np.ndarray:
    """Full q vector from q1 on the matrix-tensor branch.

    Components that do not exist (negative squares) are returned with a
    negative sign so the curve can still be drawn.
    """
    if estimator == "bayes":
        q3, q4 = _tensor_sq(q1, params)
        return np.array([q1, q1 / (params.delta_m + q1), q3, q4])
    x = q1 * q1
    x3, x4 = _tensor_sq(x, params)
    sq = lambda t: math.copysign(math.sqrt(abs(t)), t)  # noqa: E731
    return np.array([q1, math.sqrt(x / (params.delta_m + x)), sq(x3), sq(x4)])


def _scan_roots(params: ModelParams, estimator: str, resolution: float) -> List[float]:
    n = int(round(1.0 / resolution))
    grid = np.arange(1, n + 1) / n
    f = fp_residual(grid, params, estimator)
    sgn = np.sign(f)
    roots = []
    for i in np.nonzero(f == 0)[0]:
        roots.append(float(grid[i]))
    for i in np.nonzero(sgn[:-1] * sgn[1:] < 0)[0]:
        lo, hi = float(grid[i]), float(grid[i + 1])
        roots.append(brentq(lambda t: float(fp_residual(t, params, estimator)), lo, hi,
                            xtol=1e-14, rtol=4 * np.finfo(float).eps))
    return sorted(roots)


def root_count(params: ModelParams, estimator: str = "bayes", resolution: float = 1e-4) -> int:
    """Number of sign changes of the residual on the (0, 1] grid."""
    n = int(round(1.0 / resolution))
    f = fp_residual(np.arange(1, n + 1) / n, params, estimator)
    s = np.sign(f)
    return int(np.count_nonzero(s[:-1] * s[1:] < 0) + np.count_nonzero(s == 0))


@dataclass(frozen=True)
class FixedPointReport:
    q: np.ndarray
    kind: str                  # "null", "matrix" or "matrix-tensor"
    stable: bool
    free_energy: Optional[float]
    informative: bool          # reached by SE from the informative init
    uninformative: bool        # reached by SE from the uninformative init
    defined: bool = True       # False for roots with components outside [0, 1]
    spectral_radius: float = float("nan")

    @property
    def mse_spherical(self) -> np.ndarray:
        return 2.0 * (1.0 - np.abs(self.q))

    @property
    def mse_bayes(self) -> np.ndarray:
        return 1.0 - self.q


def _classify_endpoint(q, candidates, tol=1e-5):
    best, dist = None, math.inf
    for i, c in enumerate(candidates):
        d = float(np.max(np.abs(c - q)))
        if d < dist:
            best, dist = i, d
    return best if dist < tol else None


def solve_all_fixed_points(params: ModelParams, estimator: str = "bayes",
                           resolution: float = 1e-4, include_nondefined: bool = False,
                           se_tol: float = 1e-13, se_max_iters: int = 400_000
                           ) -> List[FixedPointReport]:
    """All SE fixed points: null, matrix (if any) and matrix-tensor roots."""
    _check_estimator(estimator)
    kind = SEKind.bayes() if estimator == "bayes" else SEKind.ml(params.rho)
    found: List[Tuple[np.ndarray, str, bool]] = [(np.zeros(4), "null", True)]
    qm = matrix_fixed_point(params, estimator)
    if qm is not None:
        found.append((qm, "matrix", True))
    for r in _scan_roots(params, estimator, resolution):
        q = reconstruct(r, params, estimator)
        defined = bool(np.all((q >= 0) & (q <= 1)))
        if defined and np.max(np.abs(se_step(q, kind, params) - q)) > 1e-8:
            continue  # removable singularity, not a genuine fixed point
        found.append((q, "matrix-tensor", defined))

    valid = [q for q, _, d in found if d]
    ends = []
    for q0 in (np.full(4, INFORMATIVE), uninformative_init(estimator)):
        res = run_se(q0, kind, params, tol=se_tol, max_iters=se_max_iters, keep_trace=False)
        ends.append(_classify_endpoint(res.q, valid))

    reports = []
    vi = 0
    for q, name, defined in found:
        if not defined:
            if include_nondefined:
                reports.append(FixedPointReport(q, name, False, None, False, False, False))
            continue
        rad = spectral_radius(se_jacobian(q, kind, params))
        fe = free_energy(q, params) if estimator == "bayes" else None
        reports.append(FixedPointReport(q, name, rad < 1.0, fe, ends[0] == vi,
                                        ends[1] == vi, True, rad))
        vi += 1
    return reports


# --- spinodals and hard phase ---------------------------------------------

SWEEP_AXES = ("delta_m", "delta_t")


def spinodal_boundary(params_base: ModelParams, sweep_axis: str, estimator: str = "bayes",
                      lo: Optional[float] = None, hi: Optional[float] = None,
                      steps: int = 400, tol: float = 1e-8,
                      resolution: float = 2e-5) -> List[float]:
    """Parameter values where two matrix-tensor roots merge (double roots).

    The root count is followed along the sweep; each change is bisected.
    """
    if sweep_axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep_axis must be one of {SWEEP_AXES}")
    _check_estimator(estimator)
    base = getattr(params_base, sweep_axis)
    lo = 0.05 * base if lo is None else lo
    hi = 3.0 * base if hi is None else hi
    if not 0 < lo < hi:
        raise ConfigurationError("need 0 < lo < hi")

    def count(v):
        return root_count(params_base.replace(**{sweep_axis: v}), estimator, resolution)

    vals = np.linspace(lo, hi, steps + 1)
    counts = [count(v) for v in vals]
    out = []
    for i in range(steps):
        if counts[i] == counts[i + 1]:
            continue
        a, b, ca = float(vals[i]), float(vals[i + 1]), counts[i]
        while b - a > tol:
            mid = 0.5 * (a + b)
            if count(mid) == ca:
                a = mid
            else:
                b = mid
        out.append(0.5 * (a + b))
    return out


@dataclass(frozen=True)
class HardPhaseReport:
    coexistence: bool        # informative and uninformative inits disagree
    hard: bool               # ... and the informative end point has lower free energy
    q_informative: Optional[np.ndarray]
    q_uninformative: Optional[np.ndarray]
    f_informative: Optional[float]
    f_uninformative: Optional[float]


def hard_phase(params: ModelParams, se_tol: float = 1e-13,
               se_max_iters: int = 400_000) -> HardPhaseReport:
    """Bayes hard-phase test from the two SE end points and their free energies."""
    kind = SEKind.bayes()
    qi = run_se(np.full(4, INFORMATIVE), kind, params, se_tol, se_max_iters, keep_trace=False).q
    qu = run_se(uninformative_init("bayes"), kind, params, se_tol, se_max_iters,
                keep_trace=False).q
    if np.max(np.abs(qi - qu)) < 1e-6:
        return HardPhaseReport(False, False, qi, qu, None, None)
    fi, fu = free_energy(qi, params), free_energy(qu, params)
    return HardPhaseReport(True, fi < fu, qi, qu, fi, fu)
