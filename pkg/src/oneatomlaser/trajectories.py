"""Quantum-jump (Monte Carlo wave-function) simulation.

Between jumps the unnormalized state obeys ``d psi/dt = -i H_eff(t) psi``
with ``H_eff = H - (i/2) sum_j c_j^dag c_j``; a jump fires when ``|psi|^2``
falls below a uniform random number.  The deterministic part runs in a
numba-compiled adaptive Dormand-Prince 5(4) integrator.  Jump times are
located by bisection to 1e-6 us.

Each trajectory draws from its own Philox stream spawned from one
``SeedSequence``, so results do not depend on scheduling or worker count.
"""

from __future__ import annotations

import logging
import math
import weakref
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
import scipy.sparse as sp

from .model import ModelSpec, TimeDependence

log = logging.getLogger(__name__)

_KIND = {"const": 0, "sin": 1, "cos": 2}

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.zeros((7, 7))
_A[1, :1] = [1 / 5]
_A[2, :2] = [3 / 40, 9 / 40]
_A[3, :3] = [44 / 45, -56 / 15, 32 / 9]
_A[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
_A[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
_A[6, :6] = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
_B = _A[6].copy()
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

JUMP_TIME_TOL = 1e-6


class TrajectoryError(RuntimeError):
    pass


# --- compiled kernels ------------------------------------------------------------

@numba.njit(cache=True)
def _coef(kind, th0, om, t):
    if kind == 0:
        return 1.0
    if kind == 1:
        return math.sin(th0 + om * t)
    return math.cos(th0 + om * t)


@numba.njit(cache=True)
def _deriv(t, psi, out, data, indices, indptr, dptr, iptr, kinds, th0, om):
    d = psi.shape[0]
    for i in range(d):
        out[i] = 0.0
    for k in range(kinds.shape[0]):
        f = _coef(kinds[k], th0[k], om[k], t)
        if f == 0.0:
            continue
        do, io = dptr[k], iptr[k]
        for r in range(d):
            acc = 0.0j
            for jj in range(indptr[io + r], indptr[io + r + 1]):
                acc += data[do + jj] * psi[indices[do + jj]]
            out[r] += f * acc


@numba.njit(cache=True)
def _dp_step(t, h, y, k1, ks, ytmp, y5, err, A, C, B, E, data, indices, indptr, dptr, iptr, kinds, th0, om):
    """One Dormand-Prince step; fills y5 (5th order), err (embedded difference) and ks[6] = f(t+h, y5)."""
    d = y.shape[0]
    ks[0, :] = k1
    for s in range(1, 6):
        for i in range(d):
            acc = 0.0j
            for j in range(s):
                acc += A[s, j] * ks[j, i]
            ytmp[i] = y[i] + h * acc
        _deriv(t + C[s] * h, ytmp, ks[s], data, indices, indptr, dptr, iptr, kinds, th0, om)
    for i in range(d):
        acc = 0.0j
        for j in range(6):
            acc += B[j] * ks[j, i]
        y5[i] = y[i] + h * acc
    _deriv(t + h, y5, ks[6], data, indices, indptr, dptr, iptr, kinds, th0, om)
    for i in range(d):
        acc = 0.0j
        for j in range(7):
            acc += E[j] * ks[j, i]
        err[i] = h * acc


@numba.njit(cache=True)
def _norm2(y):
    s = 0.0
    for i in range(y.shape[0]):
        s += y[i].real * y[i].real + y[i].imag * y[i].imag
    return s


@numba.njit(cache=True)
def _sample(t0, t1, y0, y1, f0, f1, ts, W, acc, rec_w, rec, cnt, j, burn_in):
    """Hermite-interpolated diagonal observables at the sample times in (t0, t1]."""
    h = t1 - t0
    d = y0.shape[0]
    nobs = W.shape[0]
    while j < ts.shape[0] and ts[j] <= t1:
        s = (ts[j] - t0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        nrm = 0.0
        vals = np.zeros(nobs)
        rv = 0.0
        for i in range(d):
            z = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i]
            p = z.real * z.real + z.imag * z.imag
            nrm += p
            for o in range(nobs):
                vals[o] += W[o, i] * p
            rv += rec_w[i] * p
        if rec.shape[0] > 0:
            rec[j] = rv / nrm
        if ts[j] >= burn_in:
            for o in range(nobs):
                acc[o] += vals[o] / nrm
            cnt[0] += 1
        j += 1
    return j


@numba.njit(cache=True)
def _run_until_jump(y, t, t_end, r, h, hmax, rtol, atol, A, C, B, E,
                    data, indices, indptr, dptr, iptr, kinds, th0, om,
                    ts, j, W, acc, rec_w, rec, cnt, burn_in):
    """Integrate until ``|y|^2 < r`` (status 1) or ``t_end`` (status 0).

    Returns (status, t, h, j); ``y`` is overwritten with the state at ``t``.
    """
    d = y.shape[0]
    k1 = np.empty(d, dtype=np.complex128)
    ks = np.empty((7, d), dtype=np.complex128)
    ytmp = np.empty(d, dtype=np.complex128)
    y5 = np.empty(d, dtype=np.complex128)
    err = np.empty(d, dtype=np.complex128)
    _deriv(t, y, k1, data, indices, indptr, dptr, iptr, kinds, th0, om)
    nsteps = 0
    while t < t_end:
        h = min(h, hmax, t_end - t)
        _dp_step(t, h, y, k1, ks, ytmp, y5, err, A, C, B, E, data, indices, indptr, dptr, iptr, kinds, th0, om)
        nrm = math.sqrt(_norm2(y))
        e = 0.0
        for i in range(d):
            sc = atol * nrm + rtol * max(abs(y[i]), abs(y5[i]))
            e += (abs(err[i]) / sc) ** 2
        e = math.sqrt(e / d)
        nsteps += 1
        if nsteps > 200_000_000:
            return -1, t, h, j
        if e > 1.0:
            h = h * max(0.2, 0.9 * e ** -0.2)
            if h < 1e-14:
                return -1, t, h, j
            continue
        if _norm2(y5) < r:
            # bisect the jump time inside the accepted step
            lo, hi = 0.0, h
            yhi = y5.copy()
            fhi = ks[6].copy()
            while hi - lo > 1e-6:
                mid = 0.5 * (lo + hi)
                _dp_step(t, mid, y, k1, ks, ytmp, y5, err, A, C, B, E,
                         data, indices, indptr, dptr, iptr, kinds, th0, om)
                if _norm2(y5) < r:
                    hi = mid
                    yhi[:] = y5
                    fhi[:] = ks[6]
                else:
                    lo = mid
            j = _sample(t, t + hi, y, yhi, k1, fhi, ts, W, acc, rec_w, rec, cnt, j, burn_in)
            y[:] = yhi
            return 1, t + hi, h, j
        j = _sample(t, t + h, y, y5, k1, ks[6], ts, W, acc, rec_w, rec, cnt, j, burn_in)
        t = t + h
        y[:] = y5
        k1[:] = ks[6]
        h = h * min(5.0, max(0.2, 0.9 * (e + 1e-300) ** -0.2))
    return 0, t, h, j


@numba.njit(cache=True)
def _apply_jump(y, t, u, jdata, jindices, jindptr, jdptr, jiptr, lo_amp, lo_omega):
    """Pick channel with probability ``|C_j y|^2 / sum`` and return (channel, new state)."""
    d = y.shape[0]
    nch = jdptr.shape[0]
    outs = np.zeros((nch, d), dtype=np.complex128)
    w = np.zeros(nch)
    ph = complex(math.cos(lo_omega * t), -math.sin(lo_omega * t))
    for k in range(nch):
        do, io = jdptr[k], jiptr[k]
        for r in range(d):
            acc = 0.0j
            for jj in range(jindptr[io + r], jindptr[io + r + 1]):
                acc += jdata[do + jj] * y[jindices[do + jj]]
            outs[k, r] = acc + lo_amp[k] * ph * y[r]
        w[k] = _norm2(outs[k])
    tot = w.sum()
    x = u * tot
    c = 0.0
    ch = nch - 1
    for k in range(nch):
        c += w[k]
        if x < c:
            ch = k
            break
    nrm = math.sqrt(w[ch])
    for r in range(d):
        y[r] = outs[ch, r] / nrm
    return ch


# --- packing -----------------------------------------------------------------

def _stack_csr(mats):
    data, indices, indptr, dptr, iptr = [], [], [], [], []
    do = io = 0
    for m in mats:
        m = sp.csr_matrix(m, dtype=complex)
        m.sort_indices()
        data.append(m.data)
        indices.append(m.indices.astype(np.int64))
        indptr.append(m.indptr.astype(np.int64))
        dptr.append(do)
        iptr.append(io)
        do += m.nnz
        io += m.shape[0] + 1
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    return (cat(data, np.complex128), cat(indices, np.int64), cat(indptr, np.int64),
            np.asarray(dptr, dtype=np.int64), np.asarray(iptr, dtype=np.int64))


@dataclass(frozen=True)
class LocalOscillator:
    """Coherent field added to cavity channels: ``C = c + sqrt(flux) exp(-i offset t)``."""

    flux: float
    offset: float          # rad/us


class _Compiled:
    """Generator and jump operators of a model packed for the compiled kernels."""

    def __init__(self, model: ModelSpec, lo: LocalOscillator | None = None):
        d = model.dim
        self.dim = d
        self.labels = model.channel_labels
        self.cavity_mask = np.array([c.cavity for c in model.collapse])
        decay = sp.csr_matrix((d, d), dtype=complex)
        for c in model.collapse:
            decay = decay + c.op.matrix.conj().T @ c.op.matrix
        gen = []       # (TimeDependence, matrix of the generator -i H_eff)
        groups = model.grouped_terms()
        gen.append((groups[0][0], -1j * groups[0][1] - 0.5 * decay))
        for td, h in groups[1:]:
            gen.append((td, -1j * h))
        lo_amp = np.zeros(len(model.collapse))
        lo_omega = 0.0
        if lo is not None:
            amp = math.sqrt(lo.flux)
            lo_omega = lo.offset
            eye = sp.identity(d, dtype=complex, format="csr")
            cav = [c for c in model.collapse if c.cavity]
            if len(cav) != 1:
                raise ValueError("heterodyne detection needs exactly one cavity channel")
            cm = cav[0].op.matrix
            gen.append((TimeDependence("cos", 0.0, lo.offset), -amp * cm))
            gen.append((TimeDependence("sin", 0.0, lo.offset), -1j * amp * cm))
            gen[0] = (gen[0][0], gen[0][1] - 0.5 * lo.flux * eye)
            lo_amp[self.cavity_mask] = amp
        # constant envelopes (e.g. a zero LO offset) are folded into their matrices
        gen = [(td, td(0.0) * m) if td.is_constant else (td, m) for td, m in gen]
        self.gen = _stack_csr([m for _, m in gen])
        self.kinds = np.array([0 if td.is_constant else _KIND[td.kind] for td, _ in gen], dtype=np.int64)
        self.th0 = np.array([td.theta0 for td, _ in gen], dtype=float)
        self.om = np.array([td.omega for td, _ in gen], dtype=float)
        self.jumps = _stack_csr([c.op.matrix for c in model.collapse])
        self.lo_amp = lo_amp
        self.lo_omega = lo_omega
        self.rate_scale = max(1.0, float(np.max(np.abs(decay.diagonal()))))
        self.weights = diagonal_weights(model)


_COMPILED: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _compiled(model: ModelSpec, lo: LocalOscillator | None) -> _Compiled:
    """Compiled form of ``model``, reused across the trajectories of a family."""
    per_model = _COMPILED.setdefault(model, {})
    if lo not in per_model:
        per_model[lo] = _Compiled(model, lo)
    return per_model[lo]


# --- records -----------------------------------------------------------------

class StepSizeError(TrajectoryError):
    pass


class StatisticsError(ValueError):
    pass


class EnsembleError(RuntimeError):
    pass


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _generator(ss: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class JumpRecord:
    """Clicks of one trajectory, tagged by channel label.

    ``seed`` is ``(entropy, spawn_key)`` of the trajectory's SeedSequence;
    ``SeedSequence(entropy, spawn_key=spawn_key)`` replays it exactly.
    """

    seed: tuple
    times: np.ndarray
    channels: np.ndarray                 # index into labels
    labels: tuple
    averages: dict = field(default_factory=dict)
    samples: dict | None = field(default=None, repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def clicks(self) -> list:
        return [(float(t), self.labels[c]) for t, c in zip(self.times, self.channels)]

    def of(self, labels) -> np.ndarray:
        """Click times on the given channel label(s)."""
        if isinstance(labels, str):
            labels = (labels,)
        idx = [self.labels.index(l) for l in labels]
        return self.times[np.isin(self.channels, idx)]

    def to_text(self) -> str:
        """One click per line: time in us (17 significant digits), channel label."""
        entropy, key = self.seed
        lines = [f"# seed entropy={entropy} spawn_key={','.join(map(str, key))}",
                 "# columns: t_us channel"]
        lines += [f"{t:.17g} {self.labels[c]}" for t, c in zip(self.times, self.channels)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, labels: tuple) -> "JumpRecord":
        times, chans, seed = [], [], (None, ())
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("# seed"):
                fields = dict(f.split("=", 1) for f in line[len("# seed"):].split())
                key = tuple(int(k) for k in fields["spawn_key"].split(",") if k)
                seed = (int(fields["entropy"]), key)
                continue
            if not line or line.startswith("#"):
                continue
            t, lab = line.split()
            if lab not in labels:
                raise ValueError(f"unknown channel label {lab!r}")
            times.append(float(t))
            chans.append(labels.index(lab))
        return cls(seed, np.asarray(times, dtype=float), np.asarray(chans, dtype=np.int64), tuple(labels))


@dataclass(frozen=True)
class TrajectoryConfig:
    """Integration and sampling settings (times in us)."""

    burn_in: float = 5.0
    dt_sample: float = 2e-3
    rtol: float = 1e-6
    atol: float = 1e-8
    h_max: float = 0.05
    record_intensity: bool = False


def diagonal_weights(model: ModelSpec) -> dict:
    """Diagonal observables of a model plus the total cavity click rate ``intensity``."""
    W = {}
    for name, op in model.observables.items():
        m = sp.csr_matrix(op.matrix)
        if (m - sp.diags(m.diagonal())).count_nonzero() == 0:
            W[name] = np.real(m.diagonal())
    inten = np.zeros(model.dim)
    for c in model.collapse:
        if c.cavity:
            inten += np.real((c.op.matrix.conj().T @ c.op.matrix).diagonal())
    W["intensity"] = inten
    return W


def _run(model, comp, psi0, t_max, rng, config, seed_info, metadata):
    W = comp.weights
    names = list(W)
    Wm = np.array([W[n] for n in names])
    ts = np.arange(1, int(round(t_max / config.dt_sample)) + 1) * config.dt_sample
    rec = np.zeros(len(ts) if config.record_intensity else 0)
    acc = np.zeros(len(names))
    cnt = np.zeros(1, dtype=np.int64)
    y = np.array(psi0, dtype=np.complex128)
    nrm = np.linalg.norm(y)
    if abs(nrm - 1.0) > 1e-8:
        raise ValueError(f"initial state not normalized (norm {nrm:.12g})")
    t, j = 0.0, 0
    h = 1e-3 / comp.rate_scale
    times, chans = [], []
    data, indices, indptr, dptr, iptr = comp.gen
    jd, ji, jp, jdp, jip = comp.jumps
    while True:
        r = rng.random()
        status, t, h, j = _run_until_jump(
            y, t, t_max, r, h, config.h_max, config.rtol, config.atol, _A, _C, _B, _E,
            data, indices, indptr, dptr, iptr, comp.kinds, comp.th0, comp.om,
            ts, j, Wm, acc, W["intensity"], rec, cnt, config.burn_in)
        if status < 0:
            raise StepSizeError(f"step size underflow at t={t:.6g} us")
        if status == 0:
            break
        times.append(t)
        chans.append(_apply_jump(y, t, rng.random(), jd, ji, jp, jdp, jip, comp.lo_amp, comp.lo_omega))
    n = max(int(cnt[0]), 1)
    meta = {"t_max": t_max, "burn_in": config.burn_in, "samples": int(cnt[0]),
            "cavity_channels": tuple(model.cavity_channels)}
    meta.update(metadata or {})
    samples = {"t": ts, "intensity": rec} if config.record_intensity else None
    return JumpRecord(seed_info, np.asarray(times, dtype=float), np.asarray(chans, dtype=np.int64),
                      comp.labels, {name: acc[i] / n for i, name in enumerate(names)}, samples, meta)


def run_trajectory(model: ModelSpec, psi0: np.ndarray, t_max: float, seed=0,
                   config: TrajectoryConfig | None = None,
                   lo: LocalOscillator | None = None) -> JumpRecord:
    """One quantum-jump trajectory from the normalized pure state ``psi0``.

    Parameters
    ----------
    seed : int or SeedSequence
        Source of the trajectory's Philox stream.
    config : TrajectoryConfig, optional
        Tolerances and sampling; time averages of the diagonal observables
        are taken over samples after ``config.burn_in``.

    Raises
    ------
    StepSizeError
        If the adaptive step collapses.
    """
    ss = _seed_sequence(seed)
    return _run(model, _compiled(model, lo), psi0, t_max, _generator(ss), config or TrajectoryConfig(),
                (ss.entropy, tuple(ss.spawn_key)), None)


def ground_vacuum(model: ModelSpec, label="g3") -> np.ndarray:
    """Basis state: atom in ``label``, every cavity mode empty."""
    labels = [0 if f.kind == "fock" else label for f in model.space.factors]
    return model.space.basis(labels)


# --- model families ------------------------------------------------------------

@dataclass
class FixedFamily:
    """The same model for every run; ``psi0`` may be a state or ``f(rng)``."""

    model: ModelSpec
    psi0: object = None

    def draw(self, rng):
        psi0 = self.psi0
        if psi0 is None:
            psi0 = ground_vacuum(self.model)
        elif callable(psi0):
            psi0 = psi0(rng)
        return self.model, psi0, {}


@dataclass
class ZeemanFamily:
    """Zeeman-model runs: the atom starts in a random ``m`` of F=3 with the cavity empty.

    With ``velocity=True`` each run draws pump phases uniformly on
    [0, 2 pi) and velocities uniformly in ``v_range`` (cm/s); see
    ``ConstantVelocity.random`` for the ``independent_axes`` geometry flag.
    """

    params: object
    velocity: bool = False
    v_range: tuple = (10.0, 20.0)
    independent_axes: bool = True

    def __post_init__(self):
        self._cache = None

    def draw(self, rng):
        from dataclasses import replace
        from .zeeman import ConstantVelocity, build_zeeman, level_slice

        meta = {}
        if self.velocity:
            pm = ConstantVelocity.random(rng, self.v_range, self.independent_axes)
            model = build_zeeman(replace(self.params, phase_model=pm))
            meta["phase_model"] = repr(pm)
        else:
            if self._cache is None:
                self._cache = build_zeeman(self.params)
            model = self._cache
        sl = level_slice("g", 3)
        i = sl.start + int(rng.integers(sl.stop - sl.start))
        nf = model.dim // 32
        psi0 = np.zeros(model.dim, dtype=complex)
        psi0[i * nf] = 1.0
        meta["initial_level"] = model.space.factors[0].labels[i]
        return model, psi0, meta

    def __getstate__(self):
        return {**self.__dict__, "_cache": None}


# --- ensembles ---------------------------------------------------------------

def _jackknife(num, den):
    """Leave-one-out standard error of ``sum(num) / sum(den)`` over the first axis."""
    M = num.shape[0]
    if M < 2:
        return np.full(num.shape[1:], np.nan)
    S, D = num.sum(0), den.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        loo = (S - num) / (D - den)
    return np.sqrt((M - 1) / M * np.sum((loo - loo.mean(0)) ** 2, axis=0))


@dataclass
class EnsembleResult:
    """Pooled statistics of independent trajectories.

    All standard errors are computed over trajectories.
    """

    records: list
    averages: dict                          # name -> per-trajectory time average
    t_max: float
    config: TrajectoryConfig
    failures: int = 0
    cond: tuple | None = field(default=None, repr=False)   # per-trajectory (sums, counts)

    @property
    def n_traj(self) -> int:
        return len(self.records)

    def mean(self, name: str) -> float:
        return float(np.mean(self.averages[name]))

    def stderr(self, name: str) -> float:
        x = self.averages[name]
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan

    def _photons(self):
        if "n" in self.averages:
            return self.averages["n"], self.averages["adag2a2"]
        return self.averages["n_a"] + self.averages["n_b"], self.averages["I2_normal"]

    def n_bar(self, mode: str = "avg") -> tuple:
        """Mean photon number and standard error; ``mode`` is ``"a"``, ``"b"`` or ``"avg"``."""
        if "n" in self.averages:
            x = self.averages["n"]
        elif mode == "avg":
            x = 0.5 * (self.averages["n_a"] + self.averages["n_b"])
        else:
            x = self.averages[f"n_{mode}"]
        se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan
        return float(x.mean()), se

    @property
    def populations(self) -> dict:
        return {k[4:]: (self.mean(k), self.stderr(k)) for k in self.averages if k.startswith("pop_")}

    def g2_0(self) -> tuple:
        """Pooled ``<:I^2:> / <I>^2`` of the summed cavity modes and its jackknife error."""
        n, A = self._photons()
        M = len(n)
        g2 = A.sum() / n.sum() ** 2 * M
        if M < 2:
            return float(g2), math.nan
        loo = (A.sum() - A) / (n.sum() - n) ** 2 * (M - 1)
        return float(g2), float(np.sqrt((M - 1) / M * np.sum((loo - loo.mean()) ** 2)))

    def g2_curve(self, mirrored: bool = False) -> tuple:
        """Conditional ``g2(tau)``: mean intensity at delay tau after a cavity click over the mean intensity.

        Returns ``(taus, g2, stderr)``; requires ``g2_tau_max`` in ``ensemble_average``.
        """
        if self.cond is None:
            raise ValueError("ensemble was run without g2_tau_max")
        sums, counts = self.cond
        inten = self.averages["intensity"]
        M = len(inten)
        K = sums.shape[1]
        taus = (np.arange(K) + 0.5) * self.config.dt_sample
        with np.errstate(invalid="ignore", divide="ignore"):
            g2 = sums.sum(0) / counts.sum(0) / inten.mean()
            if M > 1:
                loo = ((sums.sum(0) - sums) / (counts.sum(0) - counts)
                       / ((inten.sum() - inten) / (M - 1))[:, None])
                se = np.sqrt((M - 1) / M * np.nansum((loo - np.nanmean(loo, 0)) ** 2, axis=0))
            else:
                se = np.full(K, np.nan)
        if mirrored:
            return np.concatenate([-taus[::-1], taus]), np.concatenate([g2[::-1], g2]), np.concatenate([se[::-1], se])
        return taus, g2, se


def _conditional_accumulate(rec: JumpRecord, burn_in, tau_max, dt):
    """Sums of the sampled intensity in delay bins after each cavity click."""
    K = int(round(tau_max / dt))
    sums = np.zeros(K)
    counts = np.zeros(K)
    ts, I = rec.samples["t"], rec.samples["intensity"]
    clicks = rec.of(rec.metadata["cavity_channels"])
    clicks = clicks[clicks >= burn_in]
    if clicks.size == 0:
        return sums, counts
    first = np.searchsorted(ts, clicks, side="right")
    idx = first[:, None] + np.arange(K + 1)[None, :]
    valid = idx < ts.size
    idx = np.where(valid, idx, 0)
    b = np.floor((ts[idx] - clicks[:, None]) / dt).astype(int)
    ok = valid & (b >= 0) & (b < K)
    np.add.at(sums, b[ok], I[idx][ok])
    np.add.at(counts, b[ok], 1)
    return sums, counts


def _worker(args):
    family, t_max, ss, config, lo, tau_max = args
    rng = _generator(ss)
    try:
        model, psi0, meta = family.draw(rng)
        rec = _run(model, _compiled(model, lo), psi0, t_max, rng, config,
                   (ss.entropy, tuple(ss.spawn_key)), meta)
    except TrajectoryError as exc:
        return exc, None
    cond = None
    if tau_max is not None:
        cond = _conditional_accumulate(rec, config.burn_in, tau_max, config.dt_sample)
        rec.samples = None
    return rec, cond


def ensemble_average(family, n_traj: int, t_max: float, seed_base=0,
                     config: TrajectoryConfig | None = None, workers: int = 1,
                     lo: LocalOscillator | None = None, g2_tau_max: float | None = None,
                     max_failure_fraction: float = 0.1) -> EnsembleResult:
    """Run ``n_traj`` independent trajectories and pool them.

    Parameters
    ----------
    family : ModelSpec, FixedFamily or ZeemanFamily
        Anything with ``draw(rng) -> (model, psi0, metadata)``; a bare
        model starts every run in g3 with the cavity empty.
    seed_base : int or SeedSequence
        Trajectory k uses the k-th child of ``SeedSequence(seed_base)``, so
        results do not depend on ``workers``.
    g2_tau_max : float, optional
        Accumulate the conditional intensity after cavity clicks up to this
        delay (us) for ``EnsembleResult.g2_curve``.

    Raises
    ------
    EnsembleError
        If more than ``max_failure_fraction`` of the runs fail.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if isinstance(family, ModelSpec):
        family = FixedFamily(family)
    config = config or TrajectoryConfig()
    if g2_tau_max is not None and not config.record_intensity:
        config = TrajectoryConfig(**{**config.__dict__, "record_intensity": True})
    children = _seed_sequence(seed_base).spawn(n_traj)
    tasks = [(family, t_max, ss, config, lo, g2_tau_max) for ss in children]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_worker, tasks, chunksize=max(1, n_traj // (4 * workers))))
    else:
        out = [_worker(t) for t in tasks]
    good = [o for o in out if isinstance(o[0], JumpRecord)]
    failures = n_traj - len(good)
    if failures:
        log.warning("%d of %d trajectories failed: %s", failures, n_traj,
                    next(o[0] for o in out if not isinstance(o[0], JumpRecord)))
    if not good or failures > max_failure_fraction * n_traj:
        raise EnsembleError(f"{failures} of {n_traj} trajectories failed")
    records = [o[0] for o in good]
    averages = {k: np.array([r.averages[k] for r in records]) for k in records[0].averages}
    cond = None
    if g2_tau_max is not None:
        cond = (np.array([o[1][0] for o in good]), np.array([o[1][1] for o in good]))
    return EnsembleResult(records, averages, t_max, config, failures, cond)


# --- click-record estimators -------------------------------------------------------

def g2_from_clicks(records, bin_width: float = 1e-3, window: float = 0.5, channels=None,
                   t_start: float | None = None, t_end: float | None = None,
                   smooth_sigma: float | None = None) -> tuple:
    """Intensity correlation from click coincidences.

    Pair delays within each record are histogrammed over ``[-window,
    window]`` and divided by the uncorrelated expectation ``rate^2 (T -
    |tau|) bin_width``, then pooled over records.  ``smooth_sigma`` (us)
    applies Gaussian smoothing, e.g. 5e-3 for 5 ns detector timing.

    Returns
    -------
    taus, g2, stderr : ndarray
        Bin centres in us.  Errors are jackknife over records, or Poisson
        for a single record.

    Raises
    ------
    StatisticsError
        Fewer than two clicks in total.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    nb = int(math.ceil(window / bin_width))
    edges = (np.arange(-nb, nb + 2) - 0.5) * bin_width
    centers = 0.5 * (edges[1:] + edges[:-1])
    hists, expect = [], []
    total = 0
    for rec in records:
        ch = channels if channels is not None else rec.metadata.get("cavity_channels", rec.labels)
        a = rec.metadata.get("burn_in", 0.0) if t_start is None else t_start
        b = rec.metadata.get("t_max") if t_end is None else t_end
        t = np.sort(rec.of(ch))
        t = t[(t >= a) & (t <= b)]
        total += t.size
        h = np.zeros(len(centers))
        for k in range(1, t.size):
            dt = t[k:] - t[:-k]
            dt = dt[dt <= edges[-1]]
            if dt.size == 0:
                break
            h += np.histogram(dt, edges)[0] + np.histogram(-dt, edges)[0]
        T = b - a
        hists.append(h)
        expect.append((t.size / T) ** 2 * np.clip(T - np.abs(centers), 0.0, None) * bin_width)
    if total < 2:
        raise StatisticsError(f"only {total} clicks recorded; need at least 2")
    H, E = np.array(hists), np.array(expect)
    with np.errstate(invalid="ignore", divide="ignore"):
        g2 = H.sum(0) / E.sum(0)
        se = _jackknife(H, E) if len(H) > 1 else np.sqrt(H.sum(0)) / E.sum(0)
    if smooth_sigma:
        g2 = _gaussian_smooth(g2, smooth_sigma / bin_width)
        se = _gaussian_smooth(se, smooth_sigma / bin_width)
    return centers, g2, se


def _gaussian_smooth(y, sigma_bins):
    half = int(math.ceil(4 * sigma_bins))
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / sigma_bins) ** 2)
    k /= k.sum()
    return np.convolve(np.pad(y, half, mode="edge"), k, mode="valid")


def heterodyne_spectrum(model: ModelSpec, lo_flux: float, t_max: float, seed=0, n_traj: int = 1,
                        lo_offset: float = 2 * math.pi * 40.0, config: TrajectoryConfig | None = None,
                        count_bin: float = 1e-3, segment: float = 1.0, span: float = 30.0,
                        workers: int = 1):
    """Optical spectrum from simulated heterodyne detection of the cavity output.

    The cavity jump operator ``sqrt(2 kappa) a`` is augmented by a local
    oscillator amplitude of flux ``lo_flux`` (clicks/us) shifted by
    ``lo_offset`` (rad/us).  The periodogram of the binned click train near
    ``+lo_offset / 2 pi`` minus its shot-noise level, divided by
    ``2 kappa lo_flux``, estimates ``Phi(2 pi nu)`` at ``nu = f - lo_offset/2 pi``.
    The frequency bin is ``1 / segment`` MHz.

    Returns
    -------
    Spectrum
        ``freqs`` in MHz for ``|nu| <= span``; normalization ``"heterodyne"``.
    """
    from .dynamics import Spectrum
    from .steady import UnsupportedModelError

    if lo_flux <= 0:
        raise ValueError("local-oscillator flux must be positive")
    if model.is_time_dependent:
        raise UnsupportedModelError("heterodyne spectrum needs a time-independent model")
    config = config or TrajectoryConfig()
    lo = LocalOscillator(lo_flux, lo_offset)
    ens = ensemble_average(model, n_traj, t_max, seed, config, workers, lo=lo)
    cav = model.cavity_channels
    cm = model.channel(cav[0]).op.matrix
    # the cavity channel is sqrt(2 kappa) a, so c^dag c = 2 kappa n
    two_kappa = float(np.real((cm.conj().T @ cm).diagonal().sum() / model.observables["n"].matrix.diagonal().sum()))
    nb = int(round(segment / count_bin))
    f = np.fft.rfftfreq(nb, count_bin)
    power = np.zeros(f.size)
    nseg, clicks = 0, 0
    n_segs = int((t_max - config.burn_in + 1e-9) // segment)
    for rec in ens.records:
        t = rec.of(cav)
        for s in range(n_segs):
            a = config.burn_in + s * segment
            counts = np.histogram(t, bins=nb, range=(a, a + segment))[0].astype(float)
            power += np.abs(np.fft.rfft(counts)) ** 2 / segment
            clicks += counts.sum()
            nseg += 1
    if nseg == 0:
        raise ValueError("no complete segment after burn-in")
    power /= nseg
    shot = clicks / (nseg * segment)
    nu = f - lo_offset / (2 * math.pi)
    sel = np.abs(nu) <= span
    return Spectrum(nu[sel], (power[sel] - shot) / (two_kappa * lo_flux), "heterodyne")


# --- input/output curves -----------------------------------------------------------

@dataclass
class IOCurve:
    x: np.ndarray
    n_a: np.ndarray
    n_b: np.ndarray
    n_avg: np.ndarray
    n_avg_err: np.ndarray
    g2_0: np.ndarray
    g2_0_err: np.ndarray


def io_curve(family_for_x: Callable, x_grid, n_traj: int = 20, t_max: float = 50.0, seed_base=0,
             config: TrajectoryConfig | None = None, workers: int = 1) -> IOCurve:
    """Mean intracavity photon number against pump strength ``x = (7/9) I3/I4``.

    ``family_for_x(x)`` returns the model family at that pump strength,
    e.g. ``lambda x: ZeemanFamily(ZeemanParams.from_pump_ratio(x))``.  Point
    k uses the k-th child of ``SeedSequence(seed_base)``.  Single-mode
    families report ``n_b = 0`` and ``n_avg = n``.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    seeds = _seed_sequence(seed_base).spawn(len(x_grid))
    cols = {k: np.zeros(len(x_grid)) for k in ("n_a", "n_b", "n_avg", "n_avg_err", "g2_0", "g2_0_err")}
    for i, (x, ss) in enumerate(zip(x_grid, seeds)):
        ens = ensemble_average(family_for_x(x), n_traj, t_max, ss, config, workers)
        if "n" in ens.averages:
            cols["n_a"][i] = ens.mean("n")
        else:
            cols["n_a"][i], cols["n_b"][i] = ens.mean("n_a"), ens.mean("n_b")
        cols["n_avg"][i], cols["n_avg_err"][i] = ens.n_bar("avg")
        n_tot = ens._photons()[0].mean()
        cols["g2_0"][i], cols["g2_0_err"][i] = ens.g2_0() if n_tot > 0 else (math.nan, math.nan)
        log.info("x=%.4g n_avg=%.4g", x, cols["n_avg"][i])
    return IOCurve(x_grid, **cols)
