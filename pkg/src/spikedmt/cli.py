"""Command-line harness.

Subcommands: se, experiment, phase-diagram, fixed-points, spinodal and
reproduce (figure presets).  Every command writes one table, as CSV or as
a JSON document that validates against ``schemas/table.schema.json``.
Failures print a JSON error record on stderr and exit nonzero.

Runs are reproducible: trial seeds come from SeedSequence([base_seed,
point index, trial index]) and results are aggregated in index order, so
the output does not depend on the worker count or on thread settings.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, SpikedError

SCHEMA_VERSION = 1
THREADS_ENV = "SPIKEDMT_THREADS"

ESTIMATORS = ("BayesAmp", "MlAmp", "SequentialMl", "SequentialSpectral", "SeOnly")
BACKENDS = ("Dense64", "Dense32", "Virtual")
INITS = ("Random", "Spectral", "Informative")
SWEEP_AXES = ("delta_m", "delta_t", "alpha2", "alpha3", "alpha4", "rho")
EXIT_CODES = {"configuration": 2, "dimension": 2, "capacity": 3, "divergence": 4}
ML_RHO_PRESETS = (0.5, 1.0, 2.0, 10.0)

DEFAULTS: Dict[str, Any] = {
    "params": {"delta_m": 0.7, "delta_t": 0.3, "alpha2": 1.5, "alpha3": 0.8,
               "alpha4": 1.0, "rho": 1.0},
    "n1": 300,
    "estimator": "SequentialSpectral",
    "sweep": {"axis": "delta_m", "start": 0.2, "stop": 1.6, "steps": 12},
    "trials": 20,
    "base_seed": 0,
    "tensor_backend": "Virtual",
    "init": {"kind": "Random", "level": 0.5},
    "output": {"path": "-", "format": "CSV"},
    "max_iters": 100,
    "tol": 1e-6,
    "se_tol": 1e-10,
    "se_max_iters": 200_000,
    "workers": 1,
}


def _canon(value: str, choices: Sequence[str], what: str) -> str:
    aliases = {"bayes": "BayesAmp", "ml": "MlAmp"} if what == "estimator" else {}
    def norm(s):
        return str(s).replace("-", "").replace("_", "").lower()
    key = norm(value)
    for c in choices:
        if key == norm(c):
            return c
    if key in aliases:
        return aliases[key]
    raise ConfigurationError(f"unknown {what} {value!r}; choose from {', '.join(choices)}")


@dataclass(frozen=True)
class Sweep:
    axis: str
    start: float
    stop: float
    steps: int

    def values(self) -> np.ndarray:
        if self.steps == 1:
            return np.array([self.start])
        return np.linspace(self.start, self.stop, self.steps)


@dataclass(frozen=True)
class ExperimentConfig:
    params: Dict[str, float]
    n1: int
    estimator: str
    sweep: Sweep
    trials: int
    base_seed: int
    tensor_backend: str
    init_kind: str
    init_level: float
    output_path: str
    output_format: str
    max_iters: int
    tol: float
    se_tol: float
    se_max_iters: int
    workers: int

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        try:
            sw = d["sweep"]
            init = d["init"]
            if isinstance(init, str):
                init = {"kind": init, "level": DEFAULTS["init"]["level"]}
            cfg = cls(
                params={k: float(v) for k, v in d["params"].items()},
                n1=int(d["n1"]),
                estimator=_canon(d["estimator"], ESTIMATORS, "estimator"),
                sweep=Sweep(_canon(sw["axis"], SWEEP_AXES, "sweep axis"), float(sw["start"]),
                            float(sw["stop"]), int(sw["steps"])),
                trials=int(d["trials"]),
                base_seed=int(d["base_seed"]),
                tensor_backend=_canon(d["tensor_backend"], BACKENDS, "tensor backend"),
                init_kind=_canon(init["kind"], INITS, "init"),
                init_level=float(init.get("level", DEFAULTS["init"]["level"])),
                output_path=str(d["output"]["path"]),
                output_format=_canon(d["output"]["format"], ("CSV", "JSON"), "format"),
                max_iters=int(d["max_iters"]),
                tol=float(d["tol"]),
                se_tol=float(d["se_tol"]),
                se_max_iters=int(d["se_max_iters"]),
                workers=int(d["workers"]),
            )
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, ConfigurationError):
                raise
            raise ConfigurationError(f"bad config: {err!r}") from None
        unknown = set(cfg.params) - set(DEFAULTS["params"])
        if unknown:
            raise ConfigurationError(f"unknown model parameters {sorted(unknown)}")
        if cfg.sweep.steps < 1 or cfg.trials < 1:
            raise ConfigurationError("steps and trials must be >= 1")
        if cfg.n1 < 2 or cfg.workers < 1 or cfg.max_iters < 0:
            raise ConfigurationError("need n1 >= 2, workers >= 1, max_iters >= 0")
        if not 0 <= cfg.init_level <= 1:
            raise ConfigurationError("informative init level must lie in [0, 1]")
        cfg.model_params()  # validates values
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": dict(self.params), "n1": self.n1, "estimator": self.estimator,
            "sweep": {"axis": self.sweep.axis, "start": self.sweep.start,
                      "stop": self.sweep.stop, "steps": self.sweep.steps},
            "trials": self.trials, "base_seed": self.base_seed,
            "tensor_backend": self.tensor_backend,
            "init": {"kind": self.init_kind, "level": self.init_level},
            "output": {"path": self.output_path, "format": self.output_format},
            "max_iters": self.max_iters, "tol": self.tol, "se_tol": self.se_tol,
            "se_max_iters": self.se_max_iters, "workers": self.workers,
        }

    def model_params(self, **changes):
        from .model import ModelParams
        kw = dict(self.params)
        kw.update(changes)
        return ModelParams(**kw)

    def point_params(self, value: float):
        return self.model_params(**{self.sweep.axis: float(value)})


# --- seeds ----------------------------------------------------------------

def trial_seed(base_seed: int, point: int, trial: int) -> int:
    """Seed of one trial; depends only on its own (point, trial) index."""
    ss = np.random.SeedSequence([int(base_seed), int(point), int(trial)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- tables ---------------------------------------------------------------

class Table:
    def __init__(self, command: str, columns: Sequence[str], config: Optional[dict] = None):
        self.command = command
        self.columns = ["schema_version"] + list(columns)
        self.rows: List[Dict[str, Any]] = []
        self.config = config or {}

    def add(self, **values):
        missing = set(self.columns[1:]) - set(values)
        if missing:
            raise KeyError(f"row misses {sorted(missing)}")
        row = {"schema_version": SCHEMA_VERSION}
        row.update((c, values[c]) for c in self.columns[1:])
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_csv_cell(r[c]) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "columns": self.columns,
            "config": _json_safe(self.config),
            "rows": [{c: _json_safe(r[c]) for c in self.columns} for r in self.rows],
        }
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"

    def render(self, fmt: str) -> str:
        return self.to_json() if fmt == "JSON" else self.to_csv()


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


def write_table(table: Table, path: str, fmt: str) -> None:
    text = table.render(fmt)
    if path in ("-", ""):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    # newline="" keeps the CRLF row endings of the CSV dialect intact
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def _qcols(prefix: str) -> List[str]:
    return [f"{prefix}{k}" for k in range(1, 5)]


def _qvals(prefix: str, q) -> Dict[str, Any]:
    return {f"{prefix}{k + 1}": float(q[k]) for k in range(4)}


# --- se -------------------------------------------------------------------

def _se_pair(cfg: ExperimentConfig, p):
    from .state_evolution import (INFORMATIVE, SEKind, run_se, run_sequential_se,
                                  uninformative_init)
    est = cfg.estimator
    out = []
    if est in ("SequentialMl", "SequentialSpectral"):
        for q0 in (np.full(4, INFORMATIVE), uninformative_init("ml")):
            out.append(run_sequential_se(p, q0, cfg.se_tol, cfg.se_max_iters))
        return out
    name = "ml" if est == "MlAmp" else "bayes"
    kind = SEKind.ml(p.rho) if name == "ml" else SEKind.bayes()
    for q0 in (np.full(4, INFORMATIVE), uninformative_init(name)):
        out.append(run_se(q0, kind, p, cfg.se_tol, cfg.se_max_iters, keep_trace=False))
    return out


def _region(cfg: ExperimentConfig, p) -> str:
    from .phase import classify_region
    return classify_region(p, "ml" if cfg.estimator == "MlAmp" else "bayes").value


def cmd_se(cfg: ExperimentConfig) -> Table:
    """Converged SE overlaps from the informative and uninformative inits."""
    cols = (["point", cfg.sweep.axis, "region"] + _qcols("q_inf_") +
            ["iters_inf", "converged_inf"] + _qcols("q_uninf_") +
            ["iters_uninf", "converged_uninf"])
    t = Table("se", cols, cfg.to_dict())
    for i, val in enumerate(cfg.sweep.values()):
        p = cfg.point_params(val)
        inf, unf = _se_pair(cfg, p)
        t.add(point=i, **{cfg.sweep.axis: float(val)}, region=_region(cfg, p),
              **_qvals("q_inf_", inf.q), iters_inf=inf.iterations,
              converged_inf=inf.converged, **_qvals("q_uninf_", unf.q),
              iters_uninf=unf.iterations, converged_uninf=unf.converged)
    return t


# --- experiment -----------------------------------------------------------

def predicted_overlaps(cfg: ExperimentConfig, p) -> np.ndarray:
    """SE prediction matching the estimator and its initialisation."""
    from .amp import spectral_q0
    from .phase import sequential_overlaps
    from .state_evolution import SEKind, run_se, uninformative_init
    est = cfg.estimator
    if est in ("SequentialMl", "SequentialSpectral"):
        return sequential_overlaps(p)
    den = "ml" if est == "MlAmp" else "bayes"
    if cfg.init_kind == "Spectral":
        q0 = spectral_q0(p, den)
    elif cfg.init_kind == "Informative":
        q0 = np.full(4, cfg.init_level)
    else:
        q0 = uninformative_init(den)
    kind = SEKind.ml(p.rho) if den == "ml" else SEKind.bayes()
    return run_se(q0, kind, p, cfg.se_tol, cfg.se_max_iters, keep_trace=False).q


def run_trial(task) -> Dict[str, Any]:
    """One Monte Carlo trial; module level so worker processes can pickle it."""
    from .amp import (AmpConfig, informative_init, random_init, run_amp, run_sequential_ml,
                      spectral_start)
    from .model import make_instance, overlaps_and_mse
    from .spectral import sequential_pca
    cfg_dict, point, value, trial = task
    cfg = ExperimentConfig.from_dict(cfg_dict)
    p = cfg.point_params(value)
    seed = trial_seed(cfg.base_seed, point, trial)
    inst = make_instance(p, cfg.n1, seed, cfg.tensor_backend.lower())
    est = cfg.estimator
    converged = True
    if est == "SequentialSpectral":
        out, diag = sequential_pca(inst, seed=seed % (2 ** 32))
        converged = diag.converged
    elif est == "SequentialMl":
        acfg = AmpConfig("ml", max_iters=cfg.max_iters, convergence_tol=cfg.tol)
        out, t1, t2 = run_sequential_ml(inst, acfg, seed=seed)
        converged = t1.converged and t2.converged
    else:
        den = "ml" if est == "MlAmp" else "bayes"
        acfg = AmpConfig(den, rho=p.rho, max_iters=cfg.max_iters, convergence_tol=cfg.tol)
        if cfg.init_kind == "Spectral":
            start, _ = spectral_start(inst, den, p.rho, seed % (2 ** 32))
        elif cfg.init_kind == "Informative":
            start = informative_init(inst.signals, cfg.init_level, seed, den)
        else:
            start = random_init(inst, seed)
        out, tr = run_amp(inst, start, acfg)
        converged = tr.converged
    m = overlaps_and_mse(out, inst.signals)
    return {"q": m.overlaps.tolist(), "mse": m.mse_per_coord.tolist(),
            "converged": bool(converged)}


def _map(fn, tasks: List, workers: int) -> List:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _mean_se(a: np.ndarray):
    mean = a.mean(axis=0)
    if len(a) < 2:
        return mean, np.zeros_like(mean)
    return mean, a.std(axis=0, ddof=1) / math.sqrt(len(a))


EXPERIMENT_COLUMNS = (["point", "value", "axis", "region", "trials"] + _qcols("mean_q") +
                      _qcols("se_q") + _qcols("mean_mse") + _qcols("se_mse") +
                      _qcols("pred_q") + _qcols("pred_mse") + ["converged_fraction"])


def cmd_experiment(cfg: ExperimentConfig) -> Table:
    """Monte Carlo sweep; MSE columns are per coordinate (MSE_k / n_k)."""
    values = cfg.sweep.values()
    t = Table("experiment", EXPERIMENT_COLUMNS, cfg.to_dict())
    if cfg.estimator != "SeOnly":
        # admit the backend once, before any work is spent
        from .model import Dimensions, memory_budget
        if cfg.tensor_backend != "Virtual":
            from .errors import CapacityError
            dims = Dimensions.from_params(cfg.point_params(values[0]), cfg.n1)
            item = 8 if cfg.tensor_backend == "Dense64" else 4
            need = dims.n1 * dims.n3 * dims.n4 * item
            if need > memory_budget():
                raise CapacityError(
                    f"{cfg.tensor_backend} tensor needs {need} bytes, over the memory budget",
                    requested=need, budget=memory_budget())
        cd = cfg.to_dict()
        tasks = [(cd, i, float(v), j) for i, v in enumerate(values) for j in range(cfg.trials)]
        results = _map(run_trial, tasks, cfg.workers)
    for i, v in enumerate(values):
        p = cfg.point_params(v)
        pred = predicted_overlaps(cfg, p)
        # spherical estimates: MSE = 2(1 - q); the Bayes SE gives 1 - q
        pred_mse = (1.0 - pred) if cfg.estimator == "BayesAmp" else 2.0 * (1.0 - pred)
        row = {"point": i, "value": float(v), "axis": cfg.sweep.axis,
               "region": _region(cfg, p), **_qvals("pred_q", pred), **_qvals("pred_mse", pred_mse)}
        if cfg.estimator == "SeOnly":
            row.update(trials=0, converged_fraction=None,
                       **{c: None for c in _qcols("mean_q") + _qcols("se_q") +
                          _qcols("mean_mse") + _qcols("se_mse")})
        else:
            chunk = results[i * cfg.trials:(i + 1) * cfg.trials]
            mq, sq = _mean_se(np.array([r["q"] for r in chunk]))
            mm, sm = _mean_se(np.array([r["mse"] for r in chunk]))
            row.update(trials=len(chunk),
                       converged_fraction=sum(r["converged"] for r in chunk) / len(chunk),
                       **_qvals("mean_q", mq), **_qvals("se_q", sq),
                       **_qvals("mean_mse", mm), **_qvals("se_mse", sm))
        t.add(**row)
    return t


# --- phase diagrams -------------------------------------------------------

PLANES = {"noise": ("delta_m", "delta_t"), "ratios": ("alpha2", "alpha3")}
PLANE_DEFAULTS = {"noise": ((0.05, 2.0, 60), (0.05, 1.5, 60)),
                  "ratios": ((0.1, 3.0, 60), (0.1, 3.0, 60))}


def _rho_tag(r: float) -> str:
    return f"{r:g}"


def cmd_phase_diagram(cfg: ExperimentConfig, plane: str = "noise", x_range=None, y_range=None,
                      rho_values: Sequence[float] = ML_RHO_PRESETS,
                      hard: bool = False) -> Table:
    from .phase import (alpha2_tilde, classify_region, delta_c, delta_c_bayes, hard_phase)
    if plane not in PLANES:
        raise ConfigurationError(f"plane must be one of {sorted(PLANES)}")
    xa, ya = PLANES[plane]
    xr = x_range or PLANE_DEFAULTS[plane][0]
    yr = y_range or PLANE_DEFAULTS[plane][1]
    xs = Sweep(xa, float(xr[0]), float(xr[1]), int(xr[2])).values()
    ys = Sweep(ya, float(yr[0]), float(yr[1]), int(yr[2])).values()
    if len(xs) < 1 or len(ys) < 1 or int(xr[2]) < 1 or int(yr[2]) < 1:
        raise ConfigurationError("grid ranges need at least one step")
    cols = [xa, ya, "region_bayes", "dm_threshold_bayes", "delta_c_bayes"]
    for r in rho_values:
        tag = _rho_tag(r)
        cols += [f"region_ml_rho{tag}", f"dm_threshold_ml_rho{tag}", f"delta_c_ml_rho{tag}"]
    if hard:
        cols += ["coexistence", "hard_phase"]
    t = Table("phase-diagram", cols, {**cfg.to_dict(), "plane": plane,
                                      "rho_values": list(rho_values)})
    for y in ys:
        for x in xs:
            p = cfg.model_params(**{xa: float(x), ya: float(y)})
            row = {xa: float(x), ya: float(y), "region_bayes": classify_region(p).value,
                   "dm_threshold_bayes": math.sqrt(p.alpha2), "delta_c_bayes": delta_c_bayes(p)}
            for r in rho_values:
                tag = _rho_tag(r)
                pr = p.replace(rho=float(r))
                a2t = alpha2_tilde(pr)
                row[f"region_ml_rho{tag}"] = classify_region(pr, "ml").value
                row[f"dm_threshold_ml_rho{tag}"] = math.sqrt(a2t)
                row[f"delta_c_ml_rho{tag}"] = delta_c(a2t, p.alpha3, p.alpha4, p.delta_m)
            if hard:
                h = hard_phase(p, se_max_iters=cfg.se_max_iters)
                row.update(coexistence=h.coexistence, hard_phase=h.hard)
            t.add(**row)
    return t


# --- fixed points and spinodals -------------------------------------------

def _denoiser_of(cfg: ExperimentConfig) -> str:
    if cfg.estimator == "MlAmp":
        return "ml"
    if cfg.estimator in ("BayesAmp", "SeOnly"):
        return "bayes"
    raise ConfigurationError("fixed points and spinodals need estimator BayesAmp or MlAmp")


def cmd_fixed_points(cfg: ExperimentConfig, include_nondefined: bool = True) -> Table:
    from .phase import solve_all_fixed_points
    from .state_evolution import se_kind_for, se_step
    den = _denoiser_of(cfg)
    cols = (["point", cfg.sweep.axis, "root", "kind", "defined", "stable", "spectral_radius",
             "informative", "uninformative"] + _qcols("q") + _qcols("mse") +
            ["free_energy", "residual"])
    t = Table("fixed-points", cols, cfg.to_dict())
    for i, v in enumerate(cfg.sweep.values()):
        p = cfg.point_params(v)
        kind = se_kind_for(den, p.rho)
        reps = solve_all_fixed_points(p, den, include_nondefined=include_nondefined,
                                      se_max_iters=cfg.se_max_iters)
        for j, r in enumerate(reps):
            res = float(np.max(np.abs(se_step(r.q, kind, p) - r.q))) if r.defined else None
            t.add(point=i, **{cfg.sweep.axis: float(v)}, root=j, kind=r.kind,
                  defined=r.defined, stable=r.stable if r.defined else None,
                  spectral_radius=r.spectral_radius if r.defined else None,
                  informative=r.informative, uninformative=r.uninformative,
                  **_qvals("q", r.q), **_qvals("mse", r.mse_spherical),
                  free_energy=r.free_energy, residual=res)
    return t


def cmd_spinodal(cfg: ExperimentConfig, curve_axis: Optional[str] = None,
                 curve_values: Iterable[float] = ()) -> Table:
    """Spinodal points along the sweep axis, optionally traced over a second axis."""
    from .phase import spinodal_boundary
    den = _denoiser_of(cfg)
    sw = cfg.sweep
    if sw.axis not in ("delta_m", "delta_t"):
        raise ConfigurationError("spinodals are traced along delta_m or delta_t")
    curve_axis = curve_axis or ("delta_t" if sw.axis == "delta_m" else "delta_m")
    if curve_axis == sw.axis:
        raise ConfigurationError("curve axis must differ from the sweep axis")
    vals = list(curve_values) or [cfg.params[curve_axis]]
    steps = max(sw.steps, 2)
    t = Table("spinodal", [curve_axis, "index", sw.axis], cfg.to_dict())
    for cv in vals:
        base = cfg.model_params(**{curve_axis: float(cv)})
        pts = spinodal_boundary(base, sw.axis, den, sw.start, sw.stop, steps)
        for k, s in enumerate(pts):
            t.add(**{curve_axis: float(cv), "index": k, sw.axis: float(s)})
    return t


# --- presets --------------------------------------------------------------

def preset_jobs(fig: str, paper_scale: bool = False) -> List[Dict[str, Any]]:
    """Command jobs regenerating the data behind one figure."""
    base = copy.deepcopy(DEFAULTS)

    def job(name, command, overrides, **extra):
        d = copy.deepcopy(base)
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
        return {"name": name, "command": command, "config": d, "extra": extra}

    ml_sweep = {"axis": "delta_m", "start": 0.2, "stop": 1.6,
                "steps": 29 if paper_scale else 12}
    if fig == "fig1":
        return [job("fig1_noise", "phase-diagram", {}, plane="noise", rho_values=()),
                job("fig1_ratios", "phase-diagram",
                    {"params": {"delta_m": 0.7, "delta_t": 0.8, "alpha4": 1.0}},
                    plane="ratios", rho_values=())]
    if fig == "fig2":
        return [job("fig2_noise", "phase-diagram", {}, plane="noise",
                    rho_values=ML_RHO_PRESETS),
                job("fig2_ratios", "phase-diagram",
                    {"params": {"delta_m": 0.7, "delta_t": 0.8, "alpha4": 1.0}},
                    plane="ratios", rho_values=ML_RHO_PRESETS)]
    if fig == "fig3":
        return [job("fig3", "experiment",
                    {"params": {"delta_t": 0.3}, "estimator": "SequentialSpectral",
                     "n1": 1000 if paper_scale else 300, "trials": 500 if paper_scale else 50,
                     "sweep": ml_sweep})]
    if fig == "fig4":
        sw = {"axis": "delta_m", "start": 0.3, "stop": 1.6, "steps": 131}
        over = {"params": {"delta_t": 0.24}, "estimator": "BayesAmp", "sweep": sw}
        return [job("fig4_roots", "fixed-points", over), job("fig4_se", "se", over)]
    if fig == "fig5":
        n = 60 if paper_scale else 24
        return [job("fig5_hard", "phase-diagram", {}, plane="noise",
                    x_range=(0.6, 1.5, n), y_range=(0.05, 0.4, n), rho_values=(), hard=True),
                job("fig5_spinodal", "spinodal",
                    {"estimator": "BayesAmp",
                     "sweep": {"axis": "delta_m", "start": 0.3, "stop": 1.6, "steps": 260}},
                    curve_axis="delta_t",
                    curve_values=tuple(np.round(np.linspace(0.05, 0.4, n // 2 + 1), 6)))]
    if fig in ("fig6", "fig7"):
        est = "BayesAmp" if fig == "fig6" else "MlAmp"
        return [job(fig, "experiment",
                    {"params": {"delta_t": 0.6, "rho": 1.0}, "estimator": est,
                     "init": {"kind": "Spectral", "level": 0.5},
                     "n1": 1000 if paper_scale else 500, "trials": 50 if paper_scale else 20,
                     "sweep": ml_sweep, "max_iters": 100, "tol": 1e-6})]
    raise ConfigurationError(f"unknown figure {fig!r}; choose fig1 ... fig7")


def run_job(command: str, cfg: ExperimentConfig, extra: Dict[str, Any]) -> Table:
    if command == "se":
        return cmd_se(cfg)
    if command == "experiment":
        return cmd_experiment(cfg)
    if command == "phase-diagram":
        return cmd_phase_diagram(cfg, extra.get("plane", "noise"), extra.get("x_range"),
                                 extra.get("y_range"), extra.get("rho_values", ML_RHO_PRESETS),
                                 extra.get("hard", False))
    if command == "fixed-points":
        return cmd_fixed_points(cfg, extra.get("include_nondefined", True))
    if command == "spinodal":
        return cmd_spinodal(cfg, extra.get("curve_axis"), extra.get("curve_values", ()))
    raise ConfigurationError(f"unknown command {command!r}")


# --- argument handling ----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="JSON file mirroring the experiment config")
    for name in DEFAULTS["params"]:
        g.add_argument("--" + name.replace("_", "-"), type=float, dest=name)
    g.add_argument("--n1", type=int)
    g.add_argument("--estimator")
    g.add_argument("--sweep-axis")
    g.add_argument("--start", type=float)
    g.add_argument("--stop", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--trials", type=int)
    g.add_argument("--base-seed", type=int)
    g.add_argument("--backend", dest="tensor_backend")
    g.add_argument("--init", dest="init_kind", help="Random, Spectral or Informative")
    g.add_argument("--init-level", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--tol", type=float)
    g.add_argument("--se-tol", type=float)
    g.add_argument("--se-max-iters", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--threads", type=int, help=f"kernel threads (sets {THREADS_ENV})")
    g.add_argument("--paper-scale", action="store_true", help="n1 = 1000")
    g.add_argument("-o", "--output", dest="output_path", help="file path, '-' for stdout")
    g.add_argument("--format", dest="output_format", help="CSV or JSON")


def _triple(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected lo,hi,steps")
    return float(parts[0]), float(parts[1]), int(parts[2])


def _floats(text: str):
    return tuple(float(s) for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikedmt", description="Spiked matrix-tensor experiments.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("se", "state-evolution sweep"),
                           ("experiment", "Monte Carlo sweep with SE predictions"),
                           ("fixed-points", "all SE fixed points along the sweep"),
                           ("spinodal", "double roots of the fixed-point equation")):
        sp = sub.add_parser(name, help=helptext)
        _add_common(sp)
        if name == "spinodal":
            sp.add_argument("--curve-axis")
            sp.add_argument("--curve-values", type=_floats, default=())
        if name == "fixed-points":
            sp.add_argument("--defined-only", action="store_true")
    sp = sub.add_parser("phase-diagram", help="region labels and boundaries on a grid")
    _add_common(sp)
    sp.add_argument("--plane", default="noise", choices=sorted(PLANES))
    sp.add_argument("--x-range", type=_triple)
    sp.add_argument("--y-range", type=_triple)
    sp.add_argument("--rho-values", type=_floats, default=ML_RHO_PRESETS)
    sp.add_argument("--hard-phase", action="store_true")
    sp = sub.add_parser("reproduce", help="figure presets")
    sp.add_argument("figure", choices=[f"fig{k}" for k in range(1, 8)])
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--format", dest="output_format", default="CSV")
    sp.add_argument("--paper-scale", action="store_true")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--backend", dest="tensor_backend")
    sp.add_argument("--n1", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--base-seed", type=int)
    sp.add_argument("--threads", type=int)
    return ap


def resolve_config(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None
                   ) -> ExperimentConfig:
    d = copy.deepcopy(base if base is not None else DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for k, v in doc.items():
            if k not in d:
                raise ConfigurationError(f"unknown config key {k!r}")
            if isinstance(v, dict) and isinstance(d[k], dict):
                d[k].update(v)
            else:
                d[k] = v
    if isinstance(d["init"], str):
        d["init"] = {"kind": d["init"], "level": DEFAULTS["init"]["level"]}
    if getattr(args, "paper_scale", False):
        d["n1"] = 1000
    get = lambda name: getattr(args, name, None)  # noqa: E731
    for name in d["params"]:
        if get(name) is not None:
            d["params"][name] = get(name)
    for name in ("n1", "estimator", "trials", "base_seed", "tensor_backend", "max_iters",
                 "tol", "se_tol", "se_max_iters", "workers"):
        if get(name) is not None:
            d[name] = get(name)
    for flag, key in (("sweep_axis", "axis"), ("start", "start"), ("stop", "stop"),
                      ("steps", "steps")):
        if get(flag) is not None:
            d["sweep"][key] = get(flag)
    if get("init_kind") is not None:
        d["init"]["kind"] = get("init_kind")
    if get("init_level") is not None:
        d["init"]["level"] = get("init_level")
    if get("output_path") is not None:
        d["output"]["path"] = get("output_path")
    if get("output_format") is not None:
        d["output"]["format"] = get("output_format")
    return ExperimentConfig.from_dict(d)


def _reproduce(args) -> List[str]:
    fmt = _canon(args.output_format, ("CSV", "JSON"), "format")
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for jb in preset_jobs(args.figure, args.paper_scale):
        d = jb["config"]
        for name in ("workers", "tensor_backend", "n1", "trials", "base_seed"):
            if getattr(args, name, None) is not None:
                d[name] = getattr(args, name)
        path = os.path.join(args.out_dir, f"{jb['name']}.{fmt.lower()}")
        d["output"] = {"path": path, "format": fmt}
        cfg = ExperimentConfig.from_dict(d)
        write_table(run_job(jb["command"], cfg, jb["extra"]), path, fmt)
        written.append(path)
    return written


def error_record(err: BaseException) -> Dict[str, Any]:
    if isinstance(err, SpikedError):
        rec = err.record()
    else:
        rec = {"error": "internal", "message": f"{type(err).__name__}: {err}"}
    return {"schema_version": SCHEMA_VERSION, **rec}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None):
            os.environ[THREADS_ENV] = str(args.threads)
            from . import _noise
            _noise._apply_thread_env()
        if args.command == "reproduce":
            for path in _reproduce(args):
                print(path)
            return 0
        cfg = resolve_config(args)
        extra: Dict[str, Any] = {}
        if args.command == "phase-diagram":
            extra = {"plane": args.plane, "x_range": args.x_range, "y_range": args.y_range,
                     "rho_values": args.rho_values, "hard": args.hard_phase}
        elif args.command == "spinodal":
            extra = {"curve_axis": args.curve_axis, "curve_values": args.curve_values}
        elif args.command == "fixed-points":
            extra = {"include_nondefined": not args.defined_only}
        table = run_job(args.command, cfg, extra)
        write_table(table, cfg.output_path, cfg.output_format)
        return 0
    except SystemExit as err:  # --help
        return int(err.code or 0)
    except Exception as err:  # noqa: BLE001 - every failure becomes a record
        rec = error_record(err)
        sys.stderr.write(json.dumps(_json_safe(rec)) + "\n")
        return EXIT_CODES.get(rec["error"], 1)


if __name__ == "__main__":
    sys.exit(main())
