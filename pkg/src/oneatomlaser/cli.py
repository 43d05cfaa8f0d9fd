"""Command-line experiments.

Each experiment writes ``<out>/<experiment>.csv`` (17 significant digits)
and ``<out>/<experiment>.json`` holding the resolved configuration, the
parameters in rad/us, summary values and version information.

Configuration comes from an optional YAML file (``--config``); flags
override file entries.  Schema (all keys optional)::

    experiment: q-scan          # or given as the subcommand
    model: four_state           # four_state | raman | zeeman
    params: {kappa: 4.2}        # FourStateParams / ZeemanParams fields; rates in MHz
    f: [1]                      # cavity-length scale factors
    I3: {start: 0, stop: 10, num: 41}     # or a list
    I4: 3
    beta34: 0.07                # raman model: beta34 as a fraction of gamma34
    delta3: {start: -40, stop: 40, step: 0.5}   # MHz, rabi-scan
    x: [0, 0.17, 0.5, 0.83]     # zeeman-io pump strengths
    phase_model: constant       # constant | velocity
    theta: 1.5707963267948966   # constant-phase angle
    method: both                # spectrum/g2: regression | trajectories | both
    n_traj: 20
    t_max: 50                   # us per trajectory
    burn_in: 5
    seed: 0
    lo_flux: 1.0                # heterodyne LO flux in units of kappa
    workers: 1
    out: results

Exit status: 0 on success, 2 on a configuration error, 3 on solver failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .constants import TWO_PI, mhz
from .dynamics import (CorrelationWindowError, StiffnessError, UndefinedCorrelationError, field_correlation,
                       g2_tau, optical_spectrum, rabi_scan)
from .fourstate import FourStateParams, build_four_state, build_raman_variant, critical_numbers, scale_cavity
from .semiclassical import ConvergenceError, knee_and_quench, lasing_window, sc_scan, sc_steady
from .steady import DegenerateSteadyStateError, SteadyStateError, solve_steady, steady_state
from .trajectories import (EnsembleError, TrajectoryConfig, TrajectoryError, ZeemanFamily, ensemble_average,
                           g2_from_clicks, heterodyne_spectrum, io_curve)
from .zeeman import ConstantPhase, ZeemanParams

log = logging.getLogger(__name__)

EXPERIMENTS = ("sc-scan", "q-scan", "ratio-scan", "scaling-sweep", "rabi-scan", "spectrum", "g2", "zeeman-io")
MODELS = ("four_state", "raman", "zeeman")
SOLVER_ERRORS = (SteadyStateError, DegenerateSteadyStateError, ConvergenceError, TrajectoryError,
                 EnsembleError, CorrelationWindowError, StiffnessError, UndefinedCorrelationError)

# params given in MHz and converted to rad/us
_RATE_FIELDS = {"g43", "kappa", "gamma", "Omega3", "Omega4", "Delta_AC", "Delta3", "Delta4", "g0",
                "excited_splitting"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_DEFAULT_GRIDS = {
    "sc-scan": {"I3": {"start": 0.0, "stop": 10.0, "num": 201}},
    "q-scan": {"I3": {"start": 0.0, "stop": 10.0, "num": 41}},
    "ratio-scan": {"I3": {"start": 0.5, "stop": 10.0, "num": 20}},
    "scaling-sweep": {"I3": [3.0], "f": [1 / 99, 0.1, 1.0, 10.0, 100.0, 1000.0, 2500.0]},
    "rabi-scan": {"I3": [0.1, 10.0]},
    "spectrum": {"I3": [0.5]},
    "g2": {"I3": [3.0]},
    "zeeman-io": {"I3": [0.0]},
}


@dataclass
class RunConfig:
    experiment: str
    model: str = "four_state"
    params: dict = field(default_factory=dict)
    f: list = field(default_factory=lambda: [1.0])
    I3: list = field(default_factory=list)
    I4: float | None = None
    beta34: float = 0.07
    delta3: list = field(default_factory=lambda: list(np.arange(-40.0, 40.25, 0.5)))
    x: list = field(default_factory=lambda: [0.0, 0.17, 0.33, 0.5, 0.67, 0.83, 1.0])
    phase_model: str = "constant"
    theta: float = math.pi / 2
    method: str = "both"
    n_traj: int = 20
    t_max: float = 50.0
    burn_in: float = 5.0
    seed: int = 0
    lo_flux: float = 1.0
    semiclassical: bool | None = None     # q-scan comparison column; default: only for f >= 1
    segment: float = 1.0
    workers: int = 1
    out: str = "."

    @property
    def default_I4(self) -> float:
        if self.I4 is not None:
            return self.I4
        if self.model == "zeeman":
            return 13.0
        return {"spectrum": 0.5}.get(self.experiment, 3.0)


# --- configuration -------------------------------------------------------------

def _grid(value, path):
    if isinstance(value, (int, float)):
        return [float(value)]
    if isinstance(value, str):
        parts = value.split(":")
        try:
            if len(parts) == 3:
                a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
                return list(np.linspace(a, b, n))
            return [float(v) for v in value.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(path, f"cannot parse grid {value!r}") from exc
    if isinstance(value, dict):
        try:
            a, b = float(value["start"]), float(value["stop"])
        except KeyError as exc:
            raise ConfigError(f"{path}.{exc.args[0]}", "missing") from exc
        if "num" in value:
            n = int(value["num"])
            if n < 1:
                raise ConfigError(f"{path}.num", "must be >= 1")
            return list(np.linspace(a, b, n))
        if "step" in value:
            s = float(value["step"])
            if s <= 0:
                raise ConfigError(f"{path}.step", "must be positive")
            return list(np.arange(a, b + s / 2, s))
        raise ConfigError(path, "grid mapping needs 'num' or 'step'")
    if isinstance(value, (list, tuple)):
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, "grid entries must be numbers") from exc
    raise ConfigError(path, f"unsupported grid value {value!r}")


def build_config(experiment: str, file_values: dict, overrides: dict) -> RunConfig:
    """Merge defaults, file values and flag overrides into a validated RunConfig."""
    merged = {**_DEFAULT_GRIDS.get(experiment, {}), **file_values, **{k: v for k, v in overrides.items() if v is not None}}
    merged.pop("experiment", None)
    known = {f.name for f in fields(RunConfig)}
    for key in merged:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    cfg = RunConfig(experiment=experiment)
    for key, value in merged.items():
        if key in ("f", "I3", "delta3", "x"):
            value = _grid(value, key)
        elif key == "params":
            if not isinstance(value, dict):
                raise ConfigError("params", "must be a mapping")
        elif key == "semiclassical":
            if not isinstance(value, bool):
                raise ConfigError(key, "must be true or false")
        elif key in ("model", "phase_model", "method", "out"):
            value = str(value)
        elif key in ("n_traj", "seed", "workers"):
            try:
                value = int(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, "must be an integer") from exc
        else:
            try:
                value = float(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, "must be a number") from exc
        setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {cfg.experiment!r}")
    if cfg.model not in MODELS:
        raise ConfigError("model", f"must be one of {MODELS}")
    if cfg.experiment == "zeeman-io" and cfg.model != "zeeman":
        cfg.model = "zeeman"
    if cfg.model == "zeeman" and cfg.experiment not in ("zeeman-io", "g2"):
        raise ConfigError("model", f"zeeman model is not available for {cfg.experiment}")
    if cfg.phase_model not in ("constant", "velocity"):
        raise ConfigError("phase_model", "must be 'constant' or 'velocity'")
    if cfg.method not in ("regression", "trajectories", "both"):
        raise ConfigError("method", "must be regression, trajectories or both")
    if any(v <= 0 for v in cfg.f):
        raise ConfigError("f", "scale factors must be positive")
    if any(v < 0 for v in cfg.I3):
        raise ConfigError("I3", "intensities must be nonnegative")
    if cfg.I4 is not None and cfg.I4 < 0:
        raise ConfigError("I4", "must be nonnegative")
    if cfg.experiment == "sc-scan" and np.any(np.diff(cfg.I3) <= 0):
        raise ConfigError("I3", "sc-scan grid must be strictly increasing")
    if not cfg.I3:
        raise ConfigError("I3", "empty grid")
    for name in ("n_traj", "workers"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, "must be >= 1")
    for name in ("t_max", "lo_flux", "segment"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(name, "must be positive")
    if not 0 <= cfg.burn_in < cfg.t_max:
        raise ConfigError("burn_in", "must lie in [0, t_max)")
    base = ZeemanParams if cfg.model == "zeeman" else FourStateParams
    names = {f.name for f in fields(base)}
    for key, value in cfg.params.items():
        if key not in names or key in ("phase_model",):
            raise ConfigError(f"params.{key}", f"unknown parameter for {base.__name__}")
        if key in _RATE_FIELDS and not isinstance(value, (int, float)):
            raise ConfigError(f"params.{key}", "must be a number (MHz)")
    try:
        if cfg.model == "zeeman":
            zeeman_params(cfg, cfg.x[0] if cfg.x else 0.0)
        else:
            four_state_params(cfg, cfg.I3[0], cfg.f[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError("params", str(exc)) from exc


def four_state_params(cfg: RunConfig, I3: float, f: float = 1.0) -> FourStateParams:
    """Cs defaults with overrides (rates in MHz), pumps, then length scaling."""
    over = {k: (mhz(v) if k in _RATE_FIELDS else v) for k, v in cfg.params.items()}
    if "branching" in over:
        over["branching"] = tuple(over["branching"])
    p = FourStateParams.cs_defaults(I3=I3, I4=cfg.default_I4, **over)
    return scale_cavity(p, f) if f != 1.0 else p


def zeeman_params(cfg: RunConfig, x: float) -> ZeemanParams:
    over = {k: (mhz(v) if k in _RATE_FIELDS else v) for k, v in cfg.params.items()}
    if "branching" in over:
        over["branching"] = tuple(over["branching"])
    return ZeemanParams.from_pump_ratio(x, I4=cfg.default_I4, phase_model=ConstantPhase(cfg.theta), **over)


def _builder(cfg: RunConfig):
    if cfg.model == "raman":
        return build_raman_variant, {"beta34": None}
    return build_four_state, {}


# --- experiments ---------------------------------------------------------------

def _map(func, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(func, items))
    return [func(it) for it in items]


def _steady_point(args):
    cfg, I3, f = args
    p = four_state_params(cfg, I3, f)
    kw = {}
    builder = build_four_state
    if cfg.model == "raman":
        builder = build_raman_variant
        kw["beta34"] = cfg.beta34 * p.gamma_ij["34"]
    try:
        res = solve_steady(p, builder=builder, **kw)
    except SOLVER_ERRORS as exc:
        return p, None, f"{type(exc).__name__}: {exc}"
    return p, res, "ok"


def _sc_point(p):
    try:
        return sc_steady(p).photons / critical_numbers(p).n0, "ok"
    except SOLVER_ERRORS as exc:
        return math.nan, f"{type(exc).__name__}: {exc}"


def run_sc_scan(cfg):
    rows, summary = [], {}
    for f in cfg.f:
        p = four_state_params(cfg, 0.0, f)
        scan = sc_scan(p, cfg.I3, I4=cfg.default_I4)
        n0f = critical_numbers(p).n0
        knee, quench = knee_and_quench(scan)
        onset, stop = lasing_window(p.with_intensities(I4=cfg.default_I4))
        summary[f"f={f:.17g}"] = {"n0f": n0f, "knee_1pct": knee, "quench_1pct": quench,
                                  "linear_onset": onset, "linear_quench": stop}
        br = scan.up
        for i, I3 in enumerate(br.I3):
            err = br.errors.get(float(I3))
            rows.append({"f": f, "I3": I3, "alpha2_over_n0f": br.alpha2_n0[i], "alpha2": br.alpha2_n0[i] * n0f,
                         **{f"pop_{k}": v[i] for k, v in br.populations.items()},
                         "status": "ok" if err is None else err})
    return rows, summary


def _q_rows(cfg, f, with_sc=True):
    pts = _map(_steady_point, [(cfg, I3, f) for I3 in cfg.I3], cfg.workers)
    # below f = 1 the off state can go unstable towards emission off the frame frequency,
    # which the fixed-point semiclassical solver does not cover
    want_sc = cfg.semiclassical if cfg.semiclassical is not None else f >= 1.0
    sc = _map(_sc_point, [p for p, _, _ in pts], cfg.workers) if with_sc and want_sc and cfg.model == "four_state" else None
    rows = []
    for i, (p, res, status) in enumerate(pts):
        n0f = critical_numbers(p).n0
        row = {"f": f, "I3": cfg.I3[i]}
        if res is None:
            row.update({"n_bar": math.nan, "n_bar_over_n0f": math.nan, "Q": math.nan, "g2_0": math.nan,
                        "pop_g3": math.nan, "pop_e3": math.nan, "pop_g4": math.nan, "pop_e4": math.nan,
                        "R": math.nan, "truncation": -1})
        else:
            o = res.obs
            nan = lambda v: math.nan if v is None else v  # noqa: E731
            row.update({"n_bar": o.n_bar, "n_bar_over_n0f": o.n_bar / n0f, "Q": nan(o.mandel_Q),
                        "g2_0": nan(o.g2_0), **{f"pop_{k}": o.populations[k] for k in ("g3", "e3", "g4", "e4")},
                        "R": nan(o.ratio_R), "truncation": res.truncation})
        if sc is not None:
            row["sc_alpha2_over_n0f"], row["sc_status"] = sc[i]
        row["status"] = status
        rows.append(row)
    return rows


def run_q_scan(cfg):
    rows = []
    for f in cfg.f:
        rows += _q_rows(cfg, f)
    p = four_state_params(cfg, 0.0, cfg.f[0])
    from .fourstate import purcell_fraction
    beta, c1 = purcell_fraction(p)
    return rows, {"n0f": {f"{f:.17g}": critical_numbers(four_state_params(cfg, 0.0, f)).n0 for f in cfg.f},
                  "beta43": beta, "C1_43": c1}


def run_ratio_scan(cfg):
    from .fourstate import purcell_fraction
    rows = []
    for f in cfg.f:
        beta, _ = purcell_fraction(four_state_params(cfg, 0.0, f))
        for r in _q_rows(cfg, f, with_sc=False):
            rows.append({"f": f, "I3": r["I3"], "R": r["R"], "beta_ratio": beta / (1 - beta),
                         "n_bar": r["n_bar"], "pop_e3": r["pop_e3"], "status": r["status"]})
    return rows, {}


def run_scaling_sweep(cfg):
    from .fourstate import purcell_fraction
    rows = []
    I3 = cfg.I3[0]
    pts = _map(_steady_point, [(cfg, I3, f) for f in cfg.f], cfg.workers)
    for f, (p, res, status) in zip(cfg.f, pts):
        beta, c1 = purcell_fraction(p)
        o = res.obs if res is not None else None
        nan = lambda v: math.nan if v is None else v  # noqa: E731
        rows.append({"f": f, "n0f": critical_numbers(p).n0,
                     "n_bar": o.n_bar if o else math.nan,
                     "n_bar_over_n0f": o.n_bar / critical_numbers(p).n0 if o else math.nan,
                     "Q": nan(o.mandel_Q) if o else math.nan, "g2_0": nan(o.g2_0) if o else math.nan,
                     "R": nan(o.ratio_R) if o else math.nan, "beta43": beta, "C1_43": c1, "status": status})
    return rows, {"I3": I3, "I4": cfg.default_I4}


def _rabi_point(args):
    cfg, I3 = args
    p = four_state_params(cfg, I3, cfg.f[0])
    return rabi_scan(p, I3, mhz(np.asarray(cfg.delta3)), I4=cfg.default_I4)


def run_rabi_scan(cfg):
    rows, summary = [], {}
    for I3, scan in zip(cfg.I3, _map(_rabi_point, [(cfg, I3) for I3 in cfg.I3], cfg.workers)):
        summary[f"I3={I3:.17g}"] = {"maxima_mhz": scan.maxima_mhz().tolist()}
        for d, n in zip(scan.delta3, scan.n_bar):
            err = scan.errors.get(float(d))
            rows.append({"I3": I3, "delta3_mhz": d / TWO_PI, "n_bar": n, "status": "ok" if err is None else err})
    return rows, summary


def _traj_config(cfg):
    return TrajectoryConfig(burn_in=cfg.burn_in)


def run_spectrum(cfg):
    rows, summary = [], {}
    I3 = cfg.I3[0]
    p = four_state_params(cfg, I3, cfg.f[0])
    res = solve_steady(p)
    model = build_four_state(p, truncation=res.truncation)
    if cfg.method in ("regression", "both"):
        corr = field_correlation(model, res.rho, rel_tol=1e-8)
        spec = optical_spectrum(corr)
        keep = np.abs(spec.freqs) <= 60.0
        peak = spec.phi.max()
        for nu, phi in zip(spec.freqs[keep], spec.phi[keep]):
            rows.append({"method": "regression", "nu_mhz": nu, "phi": phi, "phi_over_peak": phi / peak})
        summary["regression"] = {"window_us": corr.metadata["window"], "normalization": spec.normalization,
                                 "local_maxima_mhz": spec.local_maxima(1e-6 * peak).tolist()}
    if cfg.method in ("trajectories", "both"):
        het = heterodyne_spectrum(model, cfg.lo_flux * p.kappa, cfg.t_max, seed=cfg.seed, n_traj=cfg.n_traj,
                                  config=_traj_config(cfg), segment=cfg.segment, workers=cfg.workers)
        peak = het.phi.max()
        for nu, phi in zip(het.freqs, het.phi):
            rows.append({"method": "heterodyne", "nu_mhz": nu, "phi": phi, "phi_over_peak": phi / peak})
        summary["heterodyne"] = {"bin_mhz": 1.0 / cfg.segment, "normalization": het.normalization,
                                 "argmax_mhz": float(het.freqs[np.argmax(het.phi)])}
    return rows, summary


def run_g2(cfg):
    rows, summary = [], {}
    if cfg.model == "zeeman":
        p = zeeman_params(cfg, cfg.x[0] if cfg.x else 0.17)
        fam = ZeemanFamily(p, velocity=cfg.phase_model == "velocity")
        ens = ensemble_average(fam, cfg.n_traj, cfg.t_max, cfg.seed, _traj_config(cfg), cfg.workers,
                               g2_tau_max=0.6)
        _g2_traj_rows(rows, summary, ens)
        return rows, summary
    p = four_state_params(cfg, cfg.I3[0], cfg.f[0])
    res = solve_steady(p)
    model = build_four_state(p, truncation=res.truncation)
    if cfg.method in ("regression", "both"):
        g = g2_tau(model, res.rho)
        for t, v in zip(g.taus, g.values):
            rows.append({"method": "regression", "tau_us": t, "g2": v, "g2_err": 0.0})
        summary["regression"] = {"g2_0": float(g.values[0]), "window_us": g.metadata["window"]}
    if cfg.method in ("trajectories", "both"):
        ens = ensemble_average(model, cfg.n_traj, cfg.t_max, cfg.seed, _traj_config(cfg), cfg.workers,
                               g2_tau_max=min(1.0, cfg.t_max - cfg.burn_in))
        _g2_traj_rows(rows, summary, ens)
    return rows, summary


def _g2_traj_rows(rows, summary, ens):
    taus, g, se = ens.g2_curve()
    for t, v, e in zip(taus, g, se):
        rows.append({"method": "conditional", "tau_us": t, "g2": v, "g2_err": e})
    tc, gc, sc = g2_from_clicks(ens.records, bin_width=1e-3, window=0.5, smooth_sigma=5e-3)
    for t, v, e in zip(tc, gc, sc):
        rows.append({"method": "clicks", "tau_us": t, "g2": v, "g2_err": e})
    g0, e0 = ens.g2_0()
    summary["trajectories"] = {"n_traj": ens.n_traj, "failures": ens.failures, "g2_0": g0, "g2_0_err": e0,
                               "n_bar": ens.n_bar()[0], "n_bar_err": ens.n_bar()[1]}


def run_zeeman_io(cfg):
    def family(x):
        return ZeemanFamily(zeeman_params(cfg, x), velocity=cfg.phase_model == "velocity")
    curve = io_curve(family, cfg.x, cfg.n_traj, cfg.t_max, cfg.seed, _traj_config(cfg), cfg.workers)
    rows = [{"x": curve.x[i], "I3": 9 / 7 * curve.x[i] * cfg.default_I4, "n_a": curve.n_a[i], "n_b": curve.n_b[i],
             "n_avg": curve.n_avg[i], "n_avg_err": curve.n_avg_err[i], "g2_0": curve.g2_0[i],
             "g2_0_err": curve.g2_0_err[i]} for i in range(len(curve.x))]
    return rows, {"phase_model": cfg.phase_model, "I4": cfg.default_I4}


RUNNERS = {"sc-scan": run_sc_scan, "q-scan": run_q_scan, "ratio-scan": run_ratio_scan,
           "scaling-sweep": run_scaling_sweep, "rabi-scan": run_rabi_scan, "spectrum": run_spectrum,
           "g2": run_g2, "zeeman-io": run_zeeman_io}


# --- output --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, rows: list):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def resolved_params(cfg: RunConfig) -> dict:
    if cfg.model == "zeeman":
        p = zeeman_params(cfg, cfg.x[0] if cfg.x else 0.0)
        d = {k: v for k, v in asdict(p).items() if k != "phase_model"}
        d["phase_model"] = repr(p.phase_model)
        return d
    return asdict(four_state_params(cfg, cfg.I3[0], cfg.f[0]))


def run_experiment(cfg: RunConfig) -> int:
    """Run one experiment and write its CSV and JSON files; returns the exit status."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows, summary = RUNNERS[cfg.experiment](cfg)
    except SOLVER_ERRORS as exc:
        log.error("solver failure: %s", exc)
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    write_csv(out / f"{cfg.experiment}.csv", rows)
    meta = {"experiment": cfg.experiment, "config": asdict(cfg), "resolved_params_rad_per_us": resolved_params(cfg),
            "summary": summary, "version": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    (out / f"{cfg.experiment}.json").write_text(json.dumps(_jsonable(meta), indent=2) + "\n")
    statuses = [r.get("status", "ok") for r in rows]
    if statuses and all(s != "ok" for s in statuses):
        print("solver failure at every point", file=sys.stderr)
        return 3
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oneatomlaser", description="One-atom laser experiments.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", help="YAML configuration file")
    ap.add_argument("--model", choices=MODELS)
    ap.add_argument("--f", help="scale factor(s): list 'a,b' or 'start:stop:num'")
    ap.add_argument("--I3", help="pump intensity grid: list 'a,b' or 'start:stop:num'")
    ap.add_argument("--I4", type=float)
    ap.add_argument("--beta34", type=float, help="raman model: beta34 / gamma34")
    ap.add_argument("--delta3", help="Delta3 grid in MHz; write --delta3=-40:40:161 for negative starts")
    ap.add_argument("--x", help="zeeman pump strengths x = (7/9) I3/I4")
    ap.add_argument("--phase-model", dest="phase_model", choices=("constant", "velocity"))
    ap.add_argument("--theta", type=float)
    ap.add_argument("--method", choices=("regression", "trajectories", "both"))
    ap.add_argument("--n-traj", dest="n_traj", type=int)
    ap.add_argument("--t-max", dest="t_max", type=float)
    ap.add_argument("--burn-in", dest="burn_in", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--lo-flux", dest="lo_flux", type=float, help="LO flux in units of kappa")
    ap.add_argument("--semiclassical", action=argparse.BooleanOptionalAction, default=None,
                    help="q-scan: add the semiclassical |alpha|^2/n0f column")
    ap.add_argument("--segment", type=float, help="heterodyne segment length (us)")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    ap.add_argument("--set", action="append", default=[], metavar="PARAM=VALUE",
                    help="parameter override (rates in MHz); repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = {}
        if args.config:
            try:
                file_values = yaml.safe_load(Path(args.config).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError("config", str(exc)) from exc
            if not isinstance(file_values, dict):
                raise ConfigError("config", "top level must be a mapping")
            if file_values.get("experiment", args.experiment) != args.experiment:
                raise ConfigError("experiment", "differs from the subcommand")
        overrides = {k: getattr(args, k) for k in ("model", "f", "I3", "I4", "beta34", "delta3", "x", "phase_model",
                                                   "theta", "method", "n_traj", "t_max", "burn_in", "seed",
                                                   "lo_flux", "semiclassical", "segment", "workers", "out")}
        if args.set:
            params = dict(file_values.get("params") or {})
            for item in args.set:
                if "=" not in item:
                    raise ConfigError("set", f"expected PARAM=VALUE, got {item!r}")
                k, v = item.split("=", 1)
                params[k.strip()] = yaml.safe_load(v)
            overrides["params"] = params
        cfg = build_config(args.experiment, file_values, overrides)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg)


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
