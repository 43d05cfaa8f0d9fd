"""Time evolution, two-time correlations, optical spectrum and g2(tau).

Two-time averages use the quantum regression theorem:
``<A(0) B(tau)> = Tr[B exp(L tau)(rho_ss A)]``.  The seeded operator is a
general (non-Hermitian) matrix and is propagated as such.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from .constants import mhz
from .fourstate import FourStateParams
from .hilbert import expectation
from .model import ModelSpec
from .steady import (SteadyStateError, dissipator_superops, hamiltonian_superop, liouvillian,
                     solve_steady, steady_state, unvec, vec)

log = logging.getLogger(__name__)


class StiffnessError(RuntimeError):
    pass


class CorrelationWindowError(RuntimeError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


# --- propagation --------------------------------------------------------------

def _uniform(t):
    d = np.diff(t)
    return len(d) > 0 and np.allclose(d, d[0], rtol=1e-10, atol=0.0)


def _propagate_const(L, v0, t_grid):
    t = np.asarray(t_grid, dtype=float)
    out = np.empty((len(t), v0.size), dtype=complex)
    v = v0 if t[0] == 0 else expm_multiply(L * t[0], v0)
    out[0] = v
    if len(t) == 1:
        return out
    if _uniform(t):
        out[1:] = expm_multiply(L, v, start=0.0, stop=t[-1] - t[0], num=len(t), endpoint=True)[1:]
        return out
    for i in range(1, len(t)):
        v = expm_multiply(L * (t[i] - t[i - 1]), v)
        out[i] = v
    return out


def _td_generator(model):
    """Constant superoperator plus ``[(TimeDependence, superop), ...]``."""
    groups = model.grouped_terms()
    const = hamiltonian_superop(groups[0][1]) + dissipator_superops(model)
    td = [(f, hamiltonian_superop(h)) for f, h in groups[1:]]
    return sp.csr_matrix(const), td


def evolve(model: ModelSpec, rho0: np.ndarray, t_grid, e_ops: dict | None = None,
           rtol: float = 1e-8, atol: float = 1e-10):
    """Integrate the master equation on ``t_grid``.

    Parameters
    ----------
    model : ModelSpec
        Time-independent models are propagated with ``expm_multiply``; models
        with harmonic phases are integrated adaptively (DOP853).
    rho0 : ndarray
        Initial density matrix (any square matrix is accepted, so regression
        seeds like ``rho a^dag`` evolve unchanged).
    t_grid : array_like
        Nondecreasing output times starting at 0.
    e_ops : dict, optional
        ``{name: Operator}``; if given, expectation values are returned
        instead of the states.

    Returns
    -------
    ndarray or dict
        States with shape ``(len(t_grid), d, d)``, or traces ``Tr[op rho(t)]``.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or t[0] < 0 or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be a nondecreasing 1-d grid starting at t >= 0")
    d = model.dim
    v0 = vec(np.asarray(rho0, dtype=complex))
    if not model.is_time_dependent:
        ys = _propagate_const(liouvillian(model).superoperator, v0, t)
    else:
        L0, td = _td_generator(model)

        def rhs(tt, y):
            out = L0 @ y
            for f, Lk in td:
                out += f(tt) * (Lk @ y)
            return out

        sol = solve_ivp(rhs, (0.0, t[-1]), v0, t_eval=t, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise StiffnessError(f"integration stopped at t={sol.t[-1] if sol.t.size else 0:.4g} us: "
                                 f"{sol.message}")
        ys = sol.y.T
    if e_ops is None:
        return np.stack([unvec(y, d) for y in ys])
    return {name: np.array([expectation(unvec(y, d), op) for y in ys]) for name, op in e_ops.items()}


# --- correlations ------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationSeries:
    taus: np.ndarray
    values: np.ndarray
    kind: str                     # "field_correlation" | "intensity_correlation"
    metadata: dict = field(default_factory=dict)

    def mirrored(self) -> "CorrelationSeries":
        """Extend to negative tau using stationarity."""
        taus = np.concatenate([-self.taus[:0:-1], self.taus])
        conj = np.conj if self.kind == "field_correlation" else (lambda x: x)
        vals = np.concatenate([conj(self.values[:0:-1]), self.values])
        return replace(self, taus=taus, values=vals)


def _regression(L, seed, readout, dtau, rel_tol, max_tau, chunk):
    """Propagate ``seed`` until ``|Tr[readout rho(tau)]|`` falls below ``rel_tol`` of its start."""
    read = vec(readout.toarray().T)          # Tr[B X] = vec(B^T) . vec(X)
    v = vec(seed)
    c0 = read @ v
    taus, vals = [0.0], [c0]
    steps = max(1, int(round(chunk / dtau)))
    t = 0.0
    while True:
        ys = expm_multiply(L, v, start=0.0, stop=steps * dtau, num=steps + 1, endpoint=True)
        chunk_vals = ys[1:] @ read
        taus.extend(t + dtau * np.arange(1, steps + 1))
        vals.extend(chunk_vals)
        v = ys[-1]
        t += steps * dtau
        if np.max(np.abs(chunk_vals)) < rel_tol * abs(c0):
            return np.asarray(taus), np.asarray(vals), False
        if t >= max_tau - 1e-12:
            return np.asarray(taus), np.asarray(vals), True


def field_correlation(model: ModelSpec, rho_ss: np.ndarray | None = None, dtau: float = 2e-3,
                      rel_tol: float = 1e-4, max_tau: float = 50.0, chunk: float = 1.0,
                      strict: bool = True) -> CorrelationSeries:
    """Field correlation ``<a^dag(0) a(tau)>`` by the regression recipe.

    ``rho_ss a^dag`` is evolved under the master equation and read out with
    ``a``.  The window grows in ``chunk`` steps until the correlation stays
    below ``rel_tol`` of its initial value, capped at ``max_tau`` (us).

    Raises
    ------
    CorrelationWindowError
        If the cap is reached first and ``strict`` is set.
    UndefinedCorrelationError
        If the intracavity field is empty, so there is no decay to measure against.
    """
    if rho_ss is None:
        rho_ss = steady_state(model)
    a = model.observables["a"]
    if expectation(rho_ss, a.dag() @ a).real <= 1e-14:
        raise UndefinedCorrelationError("field correlation undefined: the cavity is empty")
    L = liouvillian(model).superoperator
    seed = rho_ss @ a.dag().toarray()
    taus, vals, capped = _regression(L, seed, a, dtau, rel_tol, max_tau, chunk)
    if capped and strict:
        raise CorrelationWindowError(
            f"field correlation still at {abs(vals[-1] / vals[0]):.2e} of its start after {max_tau} us")
    meta = {"dtau": dtau, "window": float(taus[-1]), "rel_tol": rel_tol, "capped": capped}
    return CorrelationSeries(taus, vals, "field_correlation", meta)


def g2_tau(model: ModelSpec, rho_ss: np.ndarray | None = None, dtau: float = 2e-3,
           rel_tol: float = 1e-4, max_tau: float = 50.0, chunk: float = 1.0,
           tau_max: float | None = None) -> CorrelationSeries:
    """Normalized intensity correlation of the cavity output.

    The seed ``sum_k c_k rho_ss c_k^dag`` over the cavity collapse channels
    (``a rho a^dag`` for a single mode) is propagated and read out with the
    total output intensity.  For one mode this is
    ``g2(tau) = Tr[a^dag a rho(tau)] / n`` with ``rho(0) = a rho_ss a^dag / n``.

    With ``tau_max`` the grid is fixed to ``[0, tau_max]``; otherwise it runs
    until ``|g2 - 1|`` has decayed below ``rel_tol`` of ``|g2(0) - 1|``.
    """
    if rho_ss is None:
        rho_ss = steady_state(model)
    cav = [model.channel(lab).op for lab in model.cavity_channels]
    if not cav:
        raise UndefinedCorrelationError("model has no cavity output channel")
    intensity = cav[0].dag() @ cav[0]
    for c in cav[1:]:
        intensity = intensity + c.dag() @ c
    flux = expectation(rho_ss, intensity).real
    if flux <= 1e-14:
        raise UndefinedCorrelationError("g2(tau) undefined: the cavity output vanishes")
    seed = sum(c.matrix @ sp.csr_matrix(rho_ss) @ c.dag().matrix for c in cav).toarray() / flux
    L = liouvillian(model).superoperator
    read = vec(intensity.toarray().T) / flux
    if tau_max is not None:
        n = max(1, int(round(tau_max / dtau)))
        taus = np.linspace(0.0, n * dtau, n + 1)
        vals = _propagate_const(L, vec(seed), taus) @ read
        capped = False
    else:
        # the decaying quantity is g2 - 1; shift the seed by the steady part
        shifted = seed - np.trace(seed) * rho_ss
        taus, dv, capped = _regression(L, shifted, intensity / flux, dtau, rel_tol, max_tau, chunk)
        vals = dv + 1.0
    vals = np.real_if_close(vals, tol=1e6)
    meta = {"dtau": dtau, "window": float(taus[-1]), "flux": flux, "capped": capped}
    return CorrelationSeries(taus, np.real(vals), "intensity_correlation", meta)


# --- spectrum ----------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """``phi`` against ``freqs`` in cycles/us (MHz); ``Omega = 2 pi nu``."""

    freqs: np.ndarray
    phi: np.ndarray
    normalization: str = "absolute"

    def peak_normalized(self) -> "Spectrum":
        return Spectrum(self.freqs, self.phi / self.phi.max(), "peak-normalized")

    def local_maxima(self, threshold: float = 0.0) -> np.ndarray:
        y = self.phi
        i = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:]) & (y[1:-1] > threshold)) + 1
        return self.freqs[i]


def optical_spectrum(corr: CorrelationSeries, pad: int = 4) -> Spectrum:
    """``Phi(Omega) = 2 Re int_0^inf C(tau) exp(-i Omega tau) dtau``.

    Trapezoid weights on the uniform tau grid, then an FFT with at least
    ``pad`` times zero padding.  For a stationary field this equals the
    two-sided transform; ``int Phi dOmega = 2 pi C(0)``, i.e.
    ``int Phi dnu = C(0) = n``.
    """
    if corr.kind != "field_correlation":
        raise ValueError("optical_spectrum needs a field correlation")
    taus = np.asarray(corr.taus)
    if taus[0] != 0.0 or not _uniform(taus):
        raise ValueError("correlation must be sampled on a uniform grid from tau = 0")
    if pad < 4:
        raise ValueError("zero padding must be at least 4x")
    dt = taus[1] - taus[0]
    w = np.asarray(corr.values, dtype=complex).copy()
    w[0] *= 0.5
    w[-1] *= 0.5
    M = 1 << int(np.ceil(np.log2(pad * len(w))))
    F = np.fft.fft(w, M) * dt
    nu = np.fft.fftfreq(M, dt)
    order = np.argsort(nu)
    return Spectrum(nu[order], 2.0 * F.real[order], "absolute")


# --- vacuum-Rabi scan ----------------------------------------------------------

@dataclass
class RabiScan:
    delta3: np.ndarray            # rad/us
    n_bar: np.ndarray
    errors: dict = field(default_factory=dict)

    def maxima_mhz(self) -> np.ndarray:
        """Detunings (MHz) of interior local maxima of n(Delta3), refined parabolically."""
        x, y = self.delta3 / (2 * np.pi), self.n_bar
        out = []
        for i in range(1, len(y) - 1):
            if y[i] > y[i - 1] and y[i] >= y[i + 1]:
                den = y[i - 1] - 2 * y[i] + y[i + 1]
                shift = 0.5 * (y[i - 1] - y[i + 1]) / den if den != 0 else 0.0
                out.append(x[i] + shift * (x[i + 1] - x[i]))
        return np.asarray(out)


def rabi_scan(p: FourStateParams, I3: float, delta3_grid, I4: float | None = None) -> RabiScan:
    """Steady-state photon number against the pump detuning Delta3 (rad/us)."""
    p = p.with_intensities(I3=I3, I4=I4)
    grid = np.asarray(delta3_grid, dtype=float)
    n = np.full(grid.shape, np.nan)
    errors = {}
    for i, d3 in enumerate(grid):
        try:
            n[i] = solve_steady(replace(p, Delta3=float(d3))).obs.n_bar
        except SteadyStateError as exc:
            errors[float(d3)] = str(exc)
    return RabiScan(grid, n, errors)


def rabi_grid_mhz(span_mhz: float = 40.0, step_mhz: float = 0.5) -> np.ndarray:
    return mhz(np.arange(-span_mhz, span_mhz + step_mhz / 2, step_mhz))
