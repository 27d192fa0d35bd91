"""Approximate message passing for the spiked matrix-tensor model.

Fields (n_k sizes, a_k = n_k / n1, c_k = <w_k^t, w_k^{t-1}>):

    b1 = Y_m v/(dm sqrt n1) + T(., x, y)/(rho dt n1) - r1 u_prev
    b2 = Y_m^T u/(dm sqrt n1)                       - r2 v_prev
    b3 = T(u, ., y)/(rho dt n1)                     - r3 x_prev
    b4 = T(u, x, .)/(rho dt n1)                     - r4 y_prev

with Onsager coefficients

    r1 = a2 s2/dm + (a3 s3 c4 + a4 s4 c3)/(rho^2 dt n1)
    r2 = s1/dm
    r3 = (s1 c4 + a4 s4 c1)/(rho^2 dt n1)
    r4 = (s1 c3 + a3 s3 c1)/(rho^2 dt n1)

where s_k are the mean denoiser derivatives of the previous step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .model import EstimateSet, PlantedInstance, PlantedSignals, overlaps_and_mse
from .phase import sequential_overlaps
from .spectral import sequential_pca

DENOISERS = ("bayes", "ml")
SPECTRAL_FLOOR = 0.05


@dataclass(frozen=True)
class AmpConfig:
    """Run settings.  Bayes always uses rho = 1.

    criterion: "overlap" (needs the truth), "iterate" (angular change
    between successive iterates) or "auto" (overlap when the truth is known).
    ``onsager=False`` drops the memory terms; it exists only for tests.
    """

    denoiser: str = "bayes"
    rho: float = 1.0
    max_iters: int = 100
    convergence_tol: float = 1e-8
    damping: float = 0.0
    criterion: str = "auto"
    onsager: bool = True

    def __post_init__(self):
        if self.denoiser not in DENOISERS:
            raise ConfigurationError(f"denoiser must be one of {DENOISERS}")
        if self.denoiser == "bayes":
            object.__setattr__(self, "rho", 1.0)
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigurationError("rho must be positive and finite")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigurationError("damping must lie in [0, 1)")
        if self.max_iters < 0 or self.convergence_tol < 0:
            raise ConfigurationError("max_iters and convergence_tol must be >= 0")
        if self.criterion not in ("auto", "overlap", "iterate"):
            raise ConfigurationError("criterion must be auto, overlap or iterate")


@dataclass(frozen=True)
class AmpState:
    """Current and previous iterates.  ``first_onsager`` (optional) holds the
    memory coefficients of the first step, used when the starting point is
    itself the output of an earlier linear iteration (spectral start)."""

    w: Tuple[np.ndarray, ...]
    w_prev: Tuple[np.ndarray, ...]
    sigma: np.ndarray
    t: int = 0
    first_onsager: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, init: EstimateSet, first_onsager=None) -> "AmpState":
        w = tuple(np.array(a, dtype=np.float64) for a in init.w)
        r0 = None if first_onsager is None else np.asarray(first_onsager, dtype=np.float64)
        return cls(w, tuple(np.zeros_like(a) for a in w), np.zeros(4), 0, r0)

    def estimate(self, denoiser: str) -> EstimateSet:
        return EstimateSet(self.w, "spherical" if denoiser == "ml" else "free")


@dataclass
class AmpTrace:
    overlaps: List[np.ndarray] = field(default_factory=list)   # signed q^t
    sigma: List[np.ndarray] = field(default_factory=list)
    sq_norms: List[np.ndarray] = field(default_factory=list)   # ||w^t||^2 / n_k
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.sigma) - 1, 0)

    def as_array(self) -> np.ndarray:
        return np.array(self.overlaps)


def _fields(instance: PlantedInstance, state: AmpState, t1, t3, t4, rho: float,
            onsager: bool):
    p = instance.params
    n1, n2, n3, n4 = instance.dims.sizes
    a2, a3, a4 = n2 / n1, n3 / n1, n4 / n1
    dm, dt = p.delta_m, p.delta_t
    u, v, x, y = state.w
    up, vp, xp, yp = state.w_prev
    s1, s2, s3, s4 = state.sigma
    sq = math.sqrt(n1)
    ct = 1.0 / (rho * dt * n1)
    b = [instance.y_m @ v / (dm * sq) + ct * t1,
         instance.y_m.T @ u / (dm * sq),
         ct * t3,
         ct * t4]
    if onsager and state.t > 0:
        c1, c2, c3, c4 = (a @ bb for a, bb in zip(state.w, state.w_prev))
        co = 1.0 / (rho * rho * dt * n1)
        r = (a2 * s2 / dm + co * (a3 * s3 * c4 + a4 * s4 * c3),
             s1 / dm,
             co * (s1 * c4 + a4 * s4 * c1),
             co * (s1 * c3 + a3 * s3 * c1))
        b = [bk - rk * wp for bk, rk, wp in zip(b, r, state.w_prev)]
    elif onsager and state.first_onsager is not None:
        b = [bk - rk * w for bk, rk, w in zip(b, state.first_onsager, state.w)]
    return b


def _denoise(instance: PlantedInstance, state: AmpState, b, config: AmpConfig) -> AmpState:
    p = instance.params
    n1 = instance.dims.n1
    if not all(np.all(np.isfinite(bk)) for bk in b):
        raise DivergenceError(f"non-finite AMP field at iteration {state.t}")
    if config.denoiser == "bayes":
        u, v, x, y = state.w
        nu, nv, nx, ny = (a @ a for a in state.w)
        ct = 1.0 / (p.delta_t * n1 * n1)
        A = np.array([nv / (p.delta_m * n1) + nx * ny * ct,
                      nu / (p.delta_m * n1),
                      nu * ny * ct,
                      nu * nx * ct])
        new = [bk / (1.0 + Ak) for bk, Ak in zip(b, A)]
        sigma = 1.0 / (1.0 + A)
    else:
        norms = np.array([np.linalg.norm(bk) for bk in b])
        if not np.all(norms > 0):
            raise DivergenceError(f"vanishing ML field at iteration {state.t}")
        roots = np.sqrt([len(bk) for bk in b])
        new = [r * bk / nb for r, bk, nb in zip(roots, b, norms)]
        sigma = roots / norms
    if config.damping > 0:
        d = config.damping
        new = [(1 - d) * a + d * o for a, o in zip(new, state.w)]
        if config.denoiser == "ml":
            new = [math.sqrt(len(a)) * a / np.linalg.norm(a) for a in new]
    return AmpState(tuple(new), state.w, sigma, state.t + 1)


def amp_step(state: AmpState, instance: PlantedInstance, config: AmpConfig) -> AmpState:
    """One AMP iteration."""
    u, v, x, y = state.w
    t1, t3, t4 = instance.tensor.contract_all(u[None], x[None], y[None])
    b = _fields(instance, state, t1[0], t3[0], t4[0], config.rho, config.onsager)
    return _denoise(instance, state, b, config)


def _record(trace: AmpTrace, state: AmpState, truth: Optional[PlantedSignals]):
    trace.sigma.append(state.sigma.copy())
    trace.sq_norms.append(np.array([a @ a / len(a) for a in state.w]))
    if truth is not None:
        q = np.array([a @ t / len(t) for a, t in zip(state.w, truth.as_tuple())])
        trace.overlaps.append(q)


def _direction_change(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    """Largest sign-invariant chord distance between successive unit directions.

    Equals 2 sin(angle / 2), so it is linear in the angle (1 - cos would
    only resolve angles down to about 1e-8).
    """
    worst = 0.0
    for x, y in zip(a, b):
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0 or ny == 0:
            if nx != ny:
                return math.inf
            continue
        ux, uy = x / nx, y / ny
        worst = max(worst, min(np.linalg.norm(ux - uy), np.linalg.norm(ux + uy)))
    return worst


def _change(config: AmpConfig, trace: AmpTrace, new: AmpState, old: AmpState) -> float:
    """Progress measure for the stopping rule.

    Overlaps are compared in absolute value: a pair of factors may settle
    into a period-two sign flip that leaves every |q_k| fixed.
    """
    crit = config.criterion
    if crit == "auto":
        crit = "overlap" if trace.overlaps else "iterate"
    if crit == "overlap":
        if not trace.overlaps:
            raise ConfigurationError("overlap criterion needs the planted signals")
        return float(np.max(np.abs(np.abs(trace.overlaps[-1]) - np.abs(trace.overlaps[-2]))))
    return _direction_change(new.w, old.w)


def run_amp_batch(instance: PlantedInstance, inits: Sequence[Union[EstimateSet, AmpState]],
                  configs: Sequence[AmpConfig], track: bool = True
                  ) -> List[Tuple[EstimateSet, AmpTrace]]:
    """Run several AMP iterations on one instance in lockstep.

    All active runs share a single pass over the tensor per iteration.
    Each init is an EstimateSet or a prepared AmpState (see spectral_start).
    """
    if len(inits) != len(configs):
        raise ConfigurationError("need one config per init")
    truth = instance.signals if track else None
    states = [e if isinstance(e, AmpState) else AmpState.initial(e) for e in inits]
    traces = [AmpTrace() for _ in inits]
    for s, tr in zip(states, traces):
        _record(tr, s, truth)
    active = [i for i, c in enumerate(configs) if c.max_iters > 0]
    while active:
        U = np.stack([states[i].w[0] for i in active])
        X = np.stack([states[i].w[2] for i in active])
        W = np.stack([states[i].w[3] for i in active])
        t1, t3, t4 = instance.tensor.contract_all(U, X, W)
        still = []
        for row, i in enumerate(active):
            cfg = configs[i]
            old = states[i]
            b = _fields(instance, old, t1[row], t3[row], t4[row], cfg.rho, cfg.onsager)
            try:
                new = _denoise(instance, old, b, cfg)
            except DivergenceError as err:
                err.trace = traces[i]
                raise
            states[i] = new
            _record(traces[i], new, truth)
            change = _change(cfg, traces[i], new, old)
            if change < cfg.convergence_tol:
                traces[i].converged = True
            elif new.t < cfg.max_iters:
                still.append(i)
        active = still
    return [(s.estimate(c.denoiser), tr) for s, c, tr in zip(states, configs, traces)]


def run_amp(instance: PlantedInstance, init: Union[EstimateSet, AmpState], config: AmpConfig,
            track: bool = True) -> Tuple[EstimateSet, AmpTrace]:
    return run_amp_batch(instance, [init], [config], track)[0]


# --- initialisations --------------------------------------------------------

def random_init(instance: PlantedInstance, seed: int) -> EstimateSet:
    """I.i.d. Gaussian vectors rescaled to norm sqrt(n_k)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    return EstimateSet.spherical([rng.standard_normal(n) for n in instance.dims.sizes])


def informative_init(signals: PlantedSignals, q0, seed: int, denoiser: str = "bayes") -> EstimateSet:
    """Estimates with exact overlap q0_k with the truth.

    ML: w = q0 w* + sqrt(1 - q0^2) xi on the sphere.  Bayes: w = q0 w* +
    sqrt(q0 (1 - q0)) xi, so that also ||w||^2 / n = q0.  xi is Gaussian,
    orthogonalised against w* and rescaled to norm sqrt(n).
    """
    q0 = np.broadcast_to(np.asarray(q0, dtype=np.float64), (4,))
    if np.any(q0 < 0) or np.any(q0 > 1):
        raise ConfigurationError("initial overlaps must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    out = []
    for q, w in zip(q0, signals.as_tuple()):
        n = len(w)
        xi = rng.standard_normal(n)
        xi -= (xi @ w) / (w @ w) * w
        xi *= math.sqrt(n) / np.linalg.norm(xi)
        spread = math.sqrt(1 - q * q) if denoiser == "ml" else math.sqrt(q * (1 - q))
        out.append(q * w + spread * xi)
    return EstimateSet(tuple(out), "spherical" if denoiser == "ml" else "free")


def spectral_init(instance: PlantedInstance, denoiser: str = "bayes", seed: int = 0
                  ) -> Tuple[EstimateSet, np.ndarray]:
    """Two-stage spectral estimate, plus the SE starting overlaps it implies.

    For Bayes the unit directions are scaled by the predicted spectral
    overlaps (a floor of 0.05 keeps every component alive), which keeps
    ||w||^2/n equal to the overlap as the posterior-mean denoiser expects.
    """
    est, _ = sequential_pca(instance, seed=seed)
    if denoiser == "ml":
        return est, spectral_q0(instance.params, "ml")
    scale = np.maximum(sequential_overlaps(instance.params), SPECTRAL_FLOOR)
    w = tuple(s * a for s, a in zip(scale, est.w))
    return EstimateSet(w, "free"), spectral_q0(instance.params, "bayes")


def spectral_q0(params, denoiser: str = "bayes") -> np.ndarray:
    """SE starting overlaps of a spectral start (see spectral_init)."""
    qs = sequential_overlaps(params)
    if denoiser == "ml":
        return qs
    return np.maximum(qs, SPECTRAL_FLOOR) * qs


def _pair_slopes(p: float, q: float, beta: float, gamma: float) -> Tuple[float, float]:
    """Steady slopes (z, w) of a two-block linear iteration.

    Solves 1/z = p - beta w, 1/w = q - gamma z and keeps the root that
    tends to 1/p as the fields grow (the one reached from a random start).
    """
    a, b, c = p * gamma, -(p * q - beta + gamma), q
    disc = b * b - 4 * a * c
    if a == 0 or disc < 0:
        raise DivergenceError("spectral start has no steady linear memory; "
                              "the spike is below the spectral threshold")
    z = (-b - math.copysign(math.sqrt(disc), b)) / 2
    z = c / z if abs(z) > 0 else 0.0  # numerically stable small root
    return z, 1.0 / (q - gamma * z)


def spectral_memory(instance: PlantedInstance, init: EstimateSet, rho: float = 1.0) -> np.ndarray:
    """First-step memory coefficients for a start proportional to the spectral vectors.

    The spectral pairs are fixed points of linear AMP iterations: the
    matrix pair of the matrix-only one, the tensor pair of the one with u
    frozen.  Their steady slopes give the memory terms that the first
    joint step must subtract (the previous iterates being the start itself).
    """
    p = instance.params
    n1, n2, n3, n4 = instance.dims.sizes
    a2, a3, a4 = n2 / n1, n3 / n1, n4 / n1
    dm, dt = p.delta_m, p.delta_t
    u, v, x, y = init.w
    sq = math.sqrt(n1)
    p1 = (instance.y_m @ v) @ u / (dm * sq * (u @ u))
    p2 = (instance.y_m.T @ u) @ v / (dm * sq * (v @ v))
    _, t3, t4 = instance.tensor.contract_all(u[None], x[None], y[None])
    ct = 1.0 / (rho * dt * n1)
    p3 = ct * (t3[0] @ x) / (x @ x)
    p4 = ct * (t4[0] @ y) / (y @ y)
    c1, c3, c4 = u @ u, x @ x, y @ y
    co = 1.0 / (rho * rho * dt * n1)
    # a pair below its spectral threshold may have no steady state; it
    # then carries (almost) no signal and is started without memory
    try:
        k1, k2 = _pair_slopes(p1, p2, a2 / dm, 1.0 / dm)
    except DivergenceError:
        k1 = k2 = 0.0
    try:
        k3, k4 = _pair_slopes(p3, p4, a4 * c1 * co, a3 * c1 * co)
    except DivergenceError:
        k3 = k4 = 0.0
    return np.array([a2 * k2 / dm + co * (a3 * k3 * c4 + a4 * k4 * c3),
                     k1 / dm,
                     co * a4 * k4 * c1,
                     co * a3 * k3 * c1])


def spectral_start(instance: PlantedInstance, denoiser: str = "bayes", rho: float = 1.0,
                   seed: int = 0) -> Tuple[AmpState, np.ndarray]:
    """AMP state at the spectral estimate, with matching first-step memory, and SE q0."""
    est, q0 = spectral_init(instance, denoiser, seed)
    rho = 1.0 if denoiser == "bayes" else rho
    return AmpState.initial(est, spectral_memory(instance, est, rho)), q0


# --- sequential ML-AMP ------------------------------------------------------

def run_sequential_ml(instance: PlantedInstance, config: AmpConfig,
                      init: Optional[EstimateSet] = None, seed: int = 0,
                      track: bool = True) -> Tuple[EstimateSet, AmpTrace, AmpTrace]:
    """Matrix-only ML-AMP, then tensor ML-AMP with u frozen at the stage-1 output."""
    p = instance.params
    n1, n2, n3, n4 = instance.dims.sizes
    truth = instance.signals if track else None
    dm, dt = p.delta_m, p.delta_t
    a2, a3, a4 = n2 / n1, n3 / n1, n4 / n1
    if init is None:
        init = random_init(instance, seed)
    init = EstimateSet.spherical(init.w)
    cfg = replace(config, denoiser="ml")
    sq = math.sqrt(n1)

    def normalise(b, t):
        nb = np.linalg.norm(b)
        if not np.isfinite(nb) or nb == 0:
            raise DivergenceError(f"degenerate sequential ML field at iteration {t}")
        return math.sqrt(len(b)) * b / nb, math.sqrt(len(b)) / nb

    def loop(update, state, trace):
        _record(trace, state, truth)
        while state.t < cfg.max_iters:
            old = state
            state = update(state)
            _record(trace, state, truth)
            change = _change(cfg, trace, state, old)
            if change < cfg.convergence_tol:
                trace.converged = True
                break
        return state

    def stage1(st):
        u, v, x, y = st.w
        up, vp = st.w_prev[0], st.w_prev[1]
        b1 = instance.y_m @ v / (dm * sq)
        b2 = instance.y_m.T @ u / (dm * sq)
        if st.t > 0 and cfg.onsager:
            b1 = b1 - a2 * st.sigma[1] / dm * up
            b2 = b2 - st.sigma[0] / dm * vp
        nu, s1 = normalise(b1, st.t)
        nv, s2 = normalise(b2, st.t)
        sig = np.array([s1, s2, 0.0, 0.0])
        return AmpState((nu, nv, x, y), (u, v, x, y), sig, st.t + 1)

    tr1 = AmpTrace()
    st = loop(stage1, AmpState.initial(init), tr1)
    u_mat, v_mat = st.w[0], st.w[1]

    m = instance.tensor.contract_mode1(u_mat) / (dt * n1)

    def stage2(st):
        u, v, x, y = st.w
        xp, yp = st.w_prev[2], st.w_prev[3]
        b3 = m @ y
        b4 = m.T @ x
        if st.t > 0 and cfg.onsager:
            b3 = b3 - a4 * st.sigma[3] / dt * xp
            b4 = b4 - a3 * st.sigma[2] / dt * yp
        nx, s3 = normalise(b3, st.t)
        ny, s4 = normalise(b4, st.t)
        return AmpState((u, v, nx, ny), (u, v, x, y), np.array([0.0, 0.0, s3, s4]), st.t + 1)

    start = AmpState((u_mat, v_mat, init.w[2], init.w[3]),
                     tuple(np.zeros_like(a) for a in init.w), np.zeros(4), 0)
    tr2 = AmpTrace()
    st = loop(stage2, start, tr2)
    return EstimateSet(st.w, "spherical"), tr1, tr2


# --- stationarity of the ML loss --------------------------------------------

def loss_fields(instance: PlantedInstance, est: EstimateSet, rho: float) -> List[np.ndarray]:
    """Negative gradients of the ML loss up to terms parallel to each w_k."""
    p = instance.params
    n1 = instance.dims.n1
    u, v, x, y = est.w
    t1, t3, t4 = instance.tensor.contract_all(u[None], x[None], y[None])
    ct = 1.0 / (rho * p.delta_t * n1)
    sq = math.sqrt(n1)
    return [instance.y_m @ v / (p.delta_m * sq) + ct * t1[0],
            instance.y_m.T @ u / (p.delta_m * sq),
            ct * t3[0],
            ct * t4[0]]


def gd_stationarity_residual(instance: PlantedInstance, est: EstimateSet, rho: float = 1.0
                             ) -> np.ndarray:
    """Tangential gradient norms ||P_perp grad_k L|| / sqrt(n_k) on the spheres."""
    if est.normalization != "spherical":
        raise ConfigurationError("stationarity is defined for spherical estimates")
    out = np.empty(4)
    for k, (f, w) in enumerate(zip(loss_fields(instance, est, rho), est.w)):
        tang = f - (f @ w) / (w @ w) * w
        out[k] = np.linalg.norm(tang) / math.sqrt(len(w))
    return out


def metrics_of(est: EstimateSet, instance: PlantedInstance):
    return overlaps_and_mse(est, instance.signals)
