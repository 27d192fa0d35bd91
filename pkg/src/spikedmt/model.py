"""Parameters, planted instances, tensor backends, contractions and metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import _noise
from .errors import CapacityError, ConfigurationError, DimensionError

SIGNAL_STREAM = 0
MATRIX_STREAM = 1
TENSOR_STREAM = 2

BACKENDS = ("dense64", "dense32", "virtual")
DEFAULT_MEMORY_BUDGET = 4 * 1024 ** 3
MEMORY_ENV = "SPIKEDMT_MEMORY_BUDGET"

_UNITS = {"": 1, "b": 1, "k": 1024, "kb": 1000, "kib": 1024, "m": 1024 ** 2,
          "mb": 1000 ** 2, "mib": 1024 ** 2, "g": 1024 ** 3, "gb": 1000 ** 3,
          "gib": 1024 ** 3}


def memory_budget() -> int:
    """Dense tensor budget in bytes, read from SPIKEDMT_MEMORY_BUDGET."""
    raw = os.environ.get(MEMORY_ENV, "").strip().lower().replace(" ", "")
    if not raw:
        return DEFAULT_MEMORY_BUDGET
    num = raw.rstrip("abcdefghijklmnopqrstuvwxyz")
    unit = raw[len(num):]
    if unit not in _UNITS:
        raise ConfigurationError(f"cannot parse {MEMORY_ENV}={raw!r}")
    return int(float(num) * _UNITS[unit])


@dataclass(frozen=True)
class ModelParams:
    """Noise levels, aspect ratios and the ML loss weight rho.

    ``test_mode`` admits zero noise, which is only meant for oracle tests.
    """

    delta_m: float
    delta_t: float
    alpha2: float
    alpha3: float
    alpha4: float
    rho: float = 1.0
    test_mode: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("delta_m", "delta_t", "alpha2", "alpha3", "alpha4", "rho"):
            val = getattr(self, name)
            if not isinstance(val, (int, float, np.floating, np.integer)):
                raise ConfigurationError(f"{name} must be a real number")
            if math.isnan(val):
                raise ConfigurationError(f"{name} is NaN")
            object.__setattr__(self, name, float(val))
        for name in ("alpha2", "alpha3", "alpha4", "rho"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if not math.isfinite(self.rho):
            raise ConfigurationError("rho must be finite")
        for name in ("delta_m", "delta_t"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0 or (val == 0 and not self.test_mode):
                raise ConfigurationError(f"{name} must be finite and > 0")

    @property
    def alphas(self) -> np.ndarray:
        """(alpha1, alpha2, alpha3, alpha4) with alpha1 = 1."""
        return np.array([1.0, self.alpha2, self.alpha3, self.alpha4])

    def replace(self, **changes) -> "ModelParams":
        kw = {k: getattr(self, k) for k in
              ("delta_m", "delta_t", "alpha2", "alpha3", "alpha4", "rho", "test_mode")}
        kw.update(changes)
        return ModelParams(**kw)

    def to_dict(self) -> dict:
        return {"delta_m": self.delta_m, "delta_t": self.delta_t,
                "alpha2": self.alpha2, "alpha3": self.alpha3,
                "alpha4": self.alpha4, "rho": self.rho}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dimensions:
    n1: int
    n2: int
    n3: int
    n4: int

    def __post_init__(self):
        for name in ("n1", "n2", "n3", "n4"):
            val = getattr(self, name)
            if int(val) != val or val < 2:
                raise ConfigurationError(f"{name}={val} must be an integer >= 2")
            object.__setattr__(self, name, int(val))

    @classmethod
    def from_params(cls, params: ModelParams, n1: int) -> "Dimensions":
        if int(n1) != n1 or n1 < 2:
            raise ConfigurationError(f"n1={n1} must be an integer >= 2")
        n1 = int(n1)
        return cls(n1, _round_half_up(params.alpha2 * n1),
                   _round_half_up(params.alpha3 * n1), _round_half_up(params.alpha4 * n1))

    @property
    def sizes(self) -> Tuple[int, int, int, int]:
        return (self.n1, self.n2, self.n3, self.n4)

    @property
    def ratios(self) -> Tuple[float, float, float]:
        """Realised aspect ratios n_k / n1 for k = 2, 3, 4."""
        return (self.n2 / self.n1, self.n3 / self.n1, self.n4 / self.n1)


@dataclass(frozen=True)
class PlantedSignals:
    u: np.ndarray
    v: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def as_tuple(self) -> Tuple[np.ndarray, ...]:
        return (self.u, self.v, self.x, self.y)

    @property
    def dims(self) -> Dimensions:
        return Dimensions(*(len(w) for w in self.as_tuple()))


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *path]))


def _sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    g = rng.standard_normal(n)
    return g * (math.sqrt(n) / np.linalg.norm(g))


def sample_planted(params: ModelParams, n1: int, seed: int) -> PlantedSignals:
    """Gaussian draws projected onto the sphere of radius sqrt(n_k)."""
    dims = Dimensions.from_params(params, n1)
    rng = _stream(seed, SIGNAL_STREAM)
    return PlantedSignals(*(_sphere(rng, n) for n in dims.sizes))


class TensorObservation:
    """Common interface of the Dense and Virtual tensor backends."""

    n1: int
    n3: int
    n4: int
    backend: str

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n1, self.n3, self.n4)

    def contract_all(self, U: np.ndarray, X: np.ndarray, W: np.ndarray):
        """Batched contractions.

        U, X, W have shapes (K, n1), (K, n3), (K, n4).  Returns
        (T1, T3, T4) where T1[b] = T(., X[b], W[b]), T3[b] = T(U[b], ., W[b])
        and T4[b] = T(U[b], X[b], .).
        """
        raise NotImplementedError

    def contract_mode1(self, a: np.ndarray) -> np.ndarray:
        """The n3 x n4 matrix sum_i a_i T_ijk."""
        raise NotImplementedError

    def to_array(self) -> np.ndarray:
        raise NotImplementedError

    def _check_batch(self, U, X, W):
        U, X, W = (np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64) for a in (U, X, W))
        if U.shape[1] != self.n1 or X.shape[1] != self.n3 or W.shape[1] != self.n4:
            raise DimensionError(
                f"vectors of lengths {U.shape[1]}, {X.shape[1]}, {W.shape[1]} "
                f"do not match tensor shape {self.shape}")
        if not U.shape[0] == X.shape[0] == W.shape[0]:
            raise DimensionError("batch sizes differ")
        return U, X, W


class DenseTensor(TensorObservation):
    """Stored n1 x n3 x n4 array (64- or 32-bit elements)."""

    def __init__(self, data: np.ndarray):
        if data.ndim != 3:
            raise DimensionError("dense tensor must be 3-dimensional")
        if data.dtype not in (np.float64, np.float32):
            raise ConfigurationError("dense tensor elements must be float32 or float64")
        self.data = np.ascontiguousarray(data)
        self.data.setflags(write=False)
        self.n1, self.n3, self.n4 = data.shape
        self.backend = "dense64" if data.dtype == np.float64 else "dense32"

    def contract_all(self, U, X, W):
        U, X, W = self._check_batch(U, X, W)
        return _noise.fused_dense(self.data, U, X, W)

    def contract_mode1(self, a):
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.shape != (self.n1,):
            raise DimensionError(f"expected a vector of length {self.n1}")
        return _noise.mode1_dense(self.data, a)

    def to_array(self):
        return self.data


class VirtualTensor(TensorObservation):
    """sqrt(delta_t) Z + u x y / n1 with Z regenerated from a 64-bit key."""

    backend = "virtual"

    def __init__(self, key: int, u: np.ndarray, x: np.ndarray, y: np.ndarray, delta_t: float):
        self.key = int(key) & 0xFFFFFFFFFFFFFFFF
        self.u, self.x, self.y = (np.array(a, dtype=np.float64) for a in (u, x, y))
        for a in (self.u, self.x, self.y):
            a.setflags(write=False)
        self.n1, self.n3, self.n4 = len(u), len(x), len(y)
        self.scale = math.sqrt(delta_t)

    def contract_all(self, U, X, W):
        U, X, W = self._check_batch(U, X, W)
        z1, z3, z4 = _noise.fused_virtual(self.key, self.n1, self.n3, self.n4, U, X, W)
        s = self.scale
        n1 = self.n1
        # row-wise dots keep each row independent of the batch size
        cu = np.array([a @ self.u for a in U])
        cx = np.array([a @ self.x for a in X])
        cw = np.array([a @ self.y for a in W])
        t1 = s * z1 + np.outer(cx * cw / n1, self.u)
        t3 = s * z3 + np.outer(cu * cw / n1, self.x)
        t4 = s * z4 + np.outer(cu * cx / n1, self.y)
        return t1, t3, t4

    def contract_mode1(self, a):
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.shape != (self.n1,):
            raise DimensionError(f"expected a vector of length {self.n1}")
        m = _noise.mode1_virtual(self.key, self.n1, self.n3, self.n4, a)
        m *= self.scale
        m += np.outer((a @ self.u) / self.n1 * self.x, self.y)
        return m

    def to_array(self, dtype=np.float64):
        out = np.empty(self.shape, dtype=dtype)
        return _noise.materialize(self.key, self.n1, self.n3, self.n4, self.scale,
                                  self.u, self.x, self.y, out)


@dataclass(frozen=True)
class PlantedInstance:
    params: ModelParams
    signals: PlantedSignals
    y_m: np.ndarray
    tensor: TensorObservation
    seed: int

    @property
    def dims(self) -> Dimensions:
        return self.signals.dims


def tensor_key(seed: int) -> int:
    ss = np.random.SeedSequence([int(seed), TENSOR_STREAM])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_observations(signals: PlantedSignals, params: ModelParams, seed: int,
                          backend: str = "virtual",
                          budget: Optional[int] = None) -> Tuple[np.ndarray, TensorObservation]:
    """Matrix observation and tensor observation for the given spikes."""
    if backend not in BACKENDS:
        raise ConfigurationError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    dims = signals.dims
    n1, n2, n3, n4 = dims.sizes
    expect = Dimensions.from_params(params, n1)
    if expect != dims:
        raise DimensionError(f"signal sizes {dims.sizes} inconsistent with params {expect.sizes}")
    u, v, x, y = signals.as_tuple()
    rng = _stream(seed, MATRIX_STREAM)
    y_m = math.sqrt(params.delta_m) * rng.standard_normal((n1, n2)) + np.outer(u, v) / math.sqrt(n1)
    y_m.setflags(write=False)
    key = tensor_key(seed)
    virt = VirtualTensor(key, u, x, y, params.delta_t)
    if backend == "virtual":
        return y_m, virt
    dtype = np.float64 if backend == "dense64" else np.float32
    need = n1 * n3 * n4 * np.dtype(dtype).itemsize
    limit = memory_budget() if budget is None else int(budget)
    if need > limit:
        raise CapacityError(
            f"{backend} tensor needs {need} bytes ({need / 1024 ** 3:.2f} GiB) but the "
            f"memory budget is {limit} bytes; use the 'virtual' backend or raise {MEMORY_ENV}",
            requested=need, budget=limit)
    return y_m, DenseTensor(virt.to_array(dtype))


def make_instance(params: ModelParams, n1: int, seed: int, backend: str = "virtual",
                  budget: Optional[int] = None) -> PlantedInstance:
    signals = sample_planted(params, n1, seed)
    y_m, tensor = generate_observations(signals, params, seed, backend, budget)
    return PlantedInstance(params, signals, y_m, tensor, int(seed))


def contract_tensor(T: TensorObservation, a: np.ndarray, b: np.ndarray, out_mode: int) -> np.ndarray:
    """Contract T with a and b over the two modes other than ``out_mode``.

    out_mode=1: sum_jk T_ijk a_j b_k; out_mode=3: sum_ik T_ijk a_i b_k;
    out_mode=4: sum_ij T_ijk a_i b_j.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if out_mode == 1:
        U, X, W = np.zeros(T.n1), a, b
    elif out_mode == 3:
        U, X, W = a, np.zeros(T.n3), b
    elif out_mode == 4:
        U, X, W = a, b, np.zeros(T.n4)
    else:
        raise DimensionError(f"out_mode must be 1, 3 or 4, got {out_mode}")
    res = T.contract_all(U[None], X[None], W[None])
    return res[{1: 0, 3: 1, 4: 2}[out_mode]][0]


@dataclass(frozen=True)
class EstimateSet:
    """Four estimates (of u, v, x, y) and their normalisation convention."""

    w: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    normalization: str = "free"

    def __post_init__(self):
        if len(self.w) != 4:
            raise DimensionError("an estimate set holds exactly four vectors")
        if self.normalization not in ("spherical", "free"):
            raise ConfigurationError("normalization must be 'spherical' or 'free'")
        w = tuple(np.asarray(a, dtype=np.float64) for a in self.w)
        object.__setattr__(self, "w", w)
        if self.normalization == "spherical":
            for a in w:
                n = len(a)
                if abs(a @ a - n) > 1e-10 * n:
                    raise ConfigurationError("spherical estimate with norm != sqrt(n)")

    @classmethod
    def spherical(cls, vectors: Sequence[np.ndarray]) -> "EstimateSet":
        """Rescale each vector to norm sqrt(n) (zero vectors are rejected)."""
        out = []
        for a in vectors:
            a = np.asarray(a, dtype=np.float64)
            nrm = np.linalg.norm(a)
            if nrm == 0:
                raise ConfigurationError("cannot project a zero vector on the sphere")
            out.append(a * (math.sqrt(len(a)) / nrm))
        return cls(tuple(out), "spherical")


@dataclass(frozen=True)
class Metrics:
    overlaps: np.ndarray         # |q_k|
    signed_overlaps: np.ndarray  # <w_hat, w*> / n_k
    mse_per_coord: np.ndarray
    sq_norms: np.ndarray         # ||w_hat||^2 / n_k


def overlaps_and_mse(est: EstimateSet, truth: PlantedSignals) -> Metrics:
    q = np.empty(4)
    s = np.empty(4)
    for k, (a, b) in enumerate(zip(est.w, truth.as_tuple())):
        if a.shape != b.shape:
            raise DimensionError(f"estimate {k + 1} has length {a.shape} vs truth {b.shape}")
        n = len(b)
        q[k] = (a @ b) / n
        s[k] = (a @ a) / n
    t = np.array([(b @ b) / len(b) for b in truth.as_tuple()])
    mse = s + t - 2 * np.abs(q)
    return Metrics(np.abs(q), q, mse, s)
