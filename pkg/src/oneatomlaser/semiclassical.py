"""Factorized (mean-field) equations for the atom-cavity system.

Operator products are factorized, ``<sigma_ij a> -> <sigma_ij> <a>``, and the
resulting equations are generated from the model's :class:`MeanFieldSpec`
rather than typed by hand.  The atom enters through its 4x4 expectation
matrix ``sigma[i, j] = <|j><i|>`` (a density matrix), the field through
``alpha = <a>``.  For the four-state atom the Hermitian parametrization
gives 2 + 16 = 18 real equations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .fourstate import FourStateParams, build_four_state, critical_numbers

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SCState:
    """Mean-field state: field amplitudes and atomic expectation matrix."""

    alpha: np.ndarray
    sigma: np.ndarray
    labels: tuple = ()

    @property
    def populations(self) -> dict:
        d = np.real(np.diag(self.sigma))
        return {lab: float(v) for lab, v in zip(self.labels, d)}

    @property
    def photons(self) -> float:
        return float(np.sum(np.abs(self.alpha) ** 2))


def _pw(z, n):
    return z ** n if n >= 0 else 0.0


class MeanFieldSystem:
    """Real-vector form of the factorized equations with analytic Jacobian.

    Parameters
    ----------
    spec : MeanFieldSpec
        Factored Hamiltonian, atomic collapse operators and cavity decay.
    """

    def __init__(self, spec, charge=None):
        self.spec = spec
        self.labels = tuple(spec.atom_labels)
        self.na = len(self.labels)
        self.modes = len(spec.cavity_decay)
        self.kappa = np.asarray(spec.cavity_decay, dtype=float)
        self.terms = [(np.asarray(t.atom, dtype=complex), t.creators, t.annihilators, t.mode)
                      for t in spec.terms]
        self.collapse = [(np.asarray(c, dtype=complex), np.asarray(c).conj().T @ np.asarray(c))
                         for c in spec.atom_collapse]
        n = self.na
        self._iu = np.triu_indices(n, 1)
        self.size = 2 * self.modes + n * n
        self._basis = [self.unpack_rho(e) for e in np.eye(n * n)]
        self.charge = np.zeros(n) if charge is None else np.asarray(charge, dtype=float)

    # packing ---------------------------------------------------------
    def unpack_rho(self, y):
        n = self.na
        k = len(self._iu[0])
        rho = np.diag(np.asarray(y[:n], dtype=complex))
        up = np.asarray(y[n:n + k]) + 1j * np.asarray(y[n + k:n + 2 * k])
        rho[self._iu] = up
        rho[(self._iu[1], self._iu[0])] = up.conj()
        return rho

    def pack_rho(self, m):
        return np.concatenate([np.real(np.diag(m)), m[self._iu].real, m[self._iu].imag])

    def pack(self, alpha, rho):
        alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
        a = np.empty(2 * self.modes)
        a[0::2], a[1::2] = alpha.real, alpha.imag
        return np.concatenate([a, self.pack_rho(rho)])

    def unpack(self, x):
        m = self.modes
        alpha = x[0:2 * m:2] + 1j * x[1:2 * m:2]
        return alpha, self.unpack_rho(x[2 * m:])

    # equations -------------------------------------------------------
    def hamiltonian(self, alpha):
        H = np.zeros((self.na, self.na), dtype=complex)
        for A, p, q, m in self.terms:
            H += A * _pw(np.conj(alpha[m]), p) * _pw(alpha[m], q)
        return H

    def _atom_linear(self, H, X):
        out = -1j * (H @ X - X @ H)
        for c, cdc in self.collapse:
            out += c @ X @ c.conj().T - 0.5 * (cdc @ X + X @ cdc)
        return out

    def _field_source(self, alpha, X):
        """``-i sum p a*^(p-1) a^q Tr[A X]`` per mode."""
        out = np.zeros(self.modes, dtype=complex)
        for A, p, q, m in self.terms:
            if p >= 1:
                out[m] += -1j * p * _pw(np.conj(alpha[m]), p - 1) * _pw(alpha[m], q) * np.trace(A @ X)
        return out

    def rhs_complex(self, alpha, rho):
        H = self.hamiltonian(alpha)
        drho = self._atom_linear(H, rho)
        dalpha = self._field_source(alpha, rho) - self.kappa * alpha
        return dalpha, drho

    def rhs(self, t, x):
        alpha, rho = self.unpack(x)
        dalpha, drho = self.rhs_complex(alpha, rho)
        return self.pack(dalpha, drho)

    def jacobian(self, t, x):
        alpha, rho = self.unpack(x)
        H = self.hamiltonian(alpha)
        J = np.empty((self.size, self.size))
        M = self.modes
        # field directions
        for m in range(M):
            for part, unit in ((0, 1.0), (1, 1j)):
                dH = np.zeros_like(H)
                dsrc = np.zeros(M, dtype=complex)
                ac, a = np.conj(alpha[m]), alpha[m]
                for A, p, q, mm in self.terms:
                    if mm != m:
                        continue
                    # d/dx of conj(a)^p a^q along a -> a + unit dx
                    dc = np.conj(unit) * p * _pw(ac, p - 1) * _pw(a, q) + unit * q * _pw(ac, p) * _pw(a, q - 1)
                    dH += A * dc
                    if p >= 1:
                        ds = (np.conj(unit) * p * (p - 1) * _pw(ac, p - 2) * _pw(a, q)
                              + unit * p * q * _pw(ac, p - 1) * _pw(a, q - 1))
                        dsrc[m] += -1j * ds * np.trace(A @ rho)
                dsrc[m] -= self.kappa[m] * unit
                J[:, 2 * m + part] = self.pack(dsrc, -1j * (dH @ rho - rho @ dH))
        # atomic directions: exact by linearity in rho
        for l, B in enumerate(self._basis):
            J[:, 2 * M + l] = self.pack(self._field_source(alpha, B), self._atom_linear(H, B))
        return J


# --- four-state interface ----------------------------------------------------

def _system(p: FourStateParams) -> MeanFieldSystem:
    model = build_four_state(p, truncation=1)
    labels = model.mean_field.atom_labels
    # atomic part of the conserved charge (photon number is the other part)
    charge = model.charge[::2]
    assert len(charge) == len(labels)
    return MeanFieldSystem(model.mean_field, charge=charge)


def sc_rhs(state: SCState, p: FourStateParams) -> SCState:
    """Time derivative of the factorized equations."""
    sysm = _system(p)
    dalpha, drho = sysm.rhs_complex(np.atleast_1d(np.asarray(state.alpha, dtype=complex)),
                                    np.asarray(state.sigma, dtype=complex))
    return SCState(dalpha, drho, sysm.labels)


def _ground_state(sysm, label="g3"):
    rho = np.zeros((sysm.na, sysm.na), dtype=complex)
    i = sysm.labels.index(label)
    rho[i, i] = 1.0
    return rho


def _newton(sysm, x, max_iter=40):
    """Newton iteration with trace and phase constraints appended (least squares)."""
    M, n = sysm.modes, sysm.na
    trace_row = np.zeros(sysm.size)
    trace_row[2 * M:2 * M + n] = 1.0
    for _ in range(max_iter):
        alpha, rho = sysm.unpack(x)
        # fix the free U(1) phase: rotate to real, nonnegative alpha_0 and pin Im alpha_0
        if abs(alpha[0]) > 0:
            ph = np.exp(-1j * np.angle(alpha[0]))
            x = _rotate(sysm, x, ph)
        F = sysm.rhs(0.0, x)
        J = sysm.jacobian(0.0, x)
        phase_row = np.zeros(sysm.size)
        phase_row[1] = 1.0
        A = np.vstack([J, trace_row, phase_row])
        b = -np.concatenate([F, [trace_row @ x - 1.0, x[1]]])
        dx = np.linalg.lstsq(A, b, rcond=None)[0]
        x = x + dx
        if np.linalg.norm(dx) <= 1e-13 * (1.0 + np.linalg.norm(x)):
            break
    F = sysm.rhs(0.0, x)
    return x, float(np.linalg.norm(F))


def _rotate(sysm, x, ph):
    """Apply the U(1) symmetry alpha -> ph alpha (atomic coherences follow)."""
    alpha, rho = sysm.unpack(x)
    # the conserved charge acts on the atom as exp(i phi Q)
    U = np.diag(np.exp(1j * np.angle(ph) * sysm.charge))
    return sysm.pack(alpha * ph, U @ rho @ U.conj().T)


def _stability(sysm, x, scale):
    """Largest real part among the non-symmetry eigenvalues of the Jacobian."""
    ev = la.eigvals(sysm.jacobian(0.0, x))
    keep = np.abs(ev) > 1e-7 * scale
    return float(np.max(ev[keep].real)) if np.any(keep) else 0.0


def sc_steady(p: FourStateParams, I3: float | None = None, init: SCState | None = None,
              tol: float = 1e-10, max_chunks: int = 16, seed: float = 0.05) -> SCState:
    """Stable steady state of the factorized equations.

    Parameters
    ----------
    p : FourStateParams
        Model parameters; zero detunings are assumed by the steady-state path.
    I3 : float, optional
        Overrides the g3 pump intensity ``(Omega3 / 2 gamma)**2``.
    init : SCState, optional
        Previous solution for continuation.  Without it the atom starts in g3
        with a small seed field ``seed * sqrt(n0)``.

    Returns
    -------
    SCState
        Fixed point with ``|d/dt| < tol * max rate`` at which every Jacobian
        eigenvalue apart from the symmetry zero modes has negative real part.

    Raises
    ------
    ConvergenceError
        If no stable fixed point is found within the integration budget.

    Notes
    -----
    A stable fixed point near the starting state is first sought by Newton
    iteration, which is what time integration converges to and avoids the
    critical slowing down next to threshold.  Integration (stiff BDF) is the
    fallback.
    """
    if I3 is not None:
        p = p.with_intensities(I3=I3)
    sysm = _system(p)
    n0 = critical_numbers(p).n0
    amp = seed * math.sqrt(n0)
    scale = max(p.kappa, p.gamma, p.g43, p.Omega3, p.Omega4)

    def accept(x0):
        xn, resid = _newton(sysm, x0.copy())
        if np.all(np.isfinite(xn)) and resid < tol * scale and _stability(sysm, xn, scale) <= 1e-9 * scale:
            return xn, resid
        return None, resid

    rho0 = atom_steady_no_field(p)
    off = sysm.pack(np.zeros(sysm.modes), rho0)
    off_stable = _stability(sysm, off, scale) <= 1e-9 * scale
    lasing_init = init is not None and abs(np.atleast_1d(init.alpha)[0]) > 1e-6 * math.sqrt(n0)

    starts = []
    if lasing_init:
        starts.append(sysm.pack(np.atleast_1d(init.alpha), np.asarray(init.sigma, dtype=complex)))
    elif off_stable:
        return _as_state(sysm, off)
    if not off_stable:
        base = np.asarray(init.sigma, dtype=complex) if lasing_init else rho0
        starts += [sysm.pack([k * math.sqrt(n0)], base) for k in (0.03, 0.1, 0.3, 1.0, 3.0)]
    for x0 in starts:
        xn, _ = accept(x0)
        if xn is not None and (abs(xn[0]) > 0 or off_stable):
            return _as_state(sysm, xn)

    # fall back to integration
    x = starts[0] if lasing_init else sysm.pack([amp], _ground_state(sysm))
    chunk = 20.0 / min(p.kappa, p.gamma)
    resid = math.inf
    for _ in range(max_chunks):
        sol = solve_ivp(sysm.rhs, (0.0, chunk), x, method="BDF", jac=sysm.jacobian,
                        rtol=1e-9, atol=1e-12 * max(1.0, math.sqrt(n0)))
        if not sol.success:
            raise ConvergenceError(f"integration failed: {sol.message}")
        x = sol.y[:, -1]
        xn, resid = accept(x)
        if xn is not None:
            return _as_state(sysm, xn)
        # bounded growth: a limit cycle (emission off the frame frequency) must fail in finite time
        chunk = min(1.5 * chunk, 100.0 / min(p.kappa, p.gamma))
    raise ConvergenceError(f"no stable steady state within {max_chunks} integration chunks", residual=resid)


def _as_state(sysm, x):
    alpha, rho = sysm.unpack(x)
    return SCState(alpha, 0.5 * (rho + rho.conj().T), sysm.labels)


def atom_steady_no_field(p: FourStateParams) -> np.ndarray:
    """Atomic steady state with the cavity field clamped to zero."""
    sysm = _system(p)
    n = sysm.na
    H = sysm.hamiltonian(np.zeros(sysm.modes, dtype=complex))
    L = np.column_stack([sysm.pack_rho(sysm._atom_linear(H, B)) for B in sysm._basis])
    A = np.vstack([L, np.r_[np.ones(n), np.zeros(n * n - n)]])
    b = np.r_[np.zeros(n * n), 1.0]
    y = np.linalg.lstsq(A, b, rcond=None)[0]
    return sysm.unpack_rho(y)


def field_growth_rate(p: FourStateParams, I3: float | None = None) -> float:
    """Largest growth rate of a small field about the non-lasing solution.

    Positive above the lasing threshold, negative below and after quenching.
    """
    if I3 is not None:
        p = p.with_intensities(I3=I3)
    sysm = _system(p)
    rho0 = atom_steady_no_field(p)
    x = sysm.pack(np.zeros(sysm.modes), rho0)
    ev = la.eigvals(sysm.jacobian(0.0, x))
    scale = max(p.kappa, p.gamma)
    keep = np.abs(ev) > 1e-9 * scale
    return float(np.max(ev[keep].real))


def lasing_window(p: FourStateParams, I3_max: float = 30.0, points: int = 300) -> tuple:
    """``(onset, quench)`` pump intensities where the non-lasing solution changes stability.

    Either entry is ``None`` when the corresponding crossing is not found
    below ``I3_max``.
    """
    grid = np.linspace(0.0, I3_max, points)
    rates = np.array([field_growth_rate(p, I) for I in grid])
    f = lambda I: field_growth_rate(p, I)  # noqa: E731
    onset = quench = None
    for i in range(len(grid) - 1):
        if rates[i] <= 0 < rates[i + 1] and onset is None:
            onset = brentq(f, grid[i], grid[i + 1], xtol=1e-10)
        elif rates[i] > 0 >= rates[i + 1] and onset is not None:
            quench = brentq(f, grid[i], grid[i + 1], xtol=1e-10)
            break
    return onset, quench


# --- scans -------------------------------------------------------------------

@dataclass
class SCBranch:
    I3: np.ndarray
    alpha2_n0: np.ndarray                 # |alpha|^2 / n0 (n0 of the params given)
    populations: dict
    states: list = field(repr=False, default_factory=list)
    errors: dict = field(default_factory=dict)


@dataclass
class SCScan:
    """Continuation scan; ``down`` is filled when a downward sweep was run."""

    up: SCBranch
    down: SCBranch | None = None
    hysteresis: bool = False

    @property
    def I3(self):
        return self.up.I3

    @property
    def alpha2_n0(self):
        return self.up.alpha2_n0


def _sweep(p, grid, n0):
    vals = np.full(len(grid), np.nan)
    pops = {lab: np.full(len(grid), np.nan) for lab in ("g3", "g4", "e3", "e4")}
    states, errors = [], {}
    prev = None
    for i, I3 in enumerate(grid):
        try:
            st = sc_steady(p, I3=I3, init=prev)
        except ConvergenceError as exc:
            log.warning("I3=%g: %s", I3, exc)
            errors[float(I3)] = str(exc)
            states.append(None)
            continue
        prev = st
        states.append(st)
        vals[i] = st.photons / n0
        for lab, v in st.populations.items():
            pops[lab][i] = v
    return SCBranch(np.asarray(grid, dtype=float), vals, pops, states, errors)


def sc_scan(p: FourStateParams, I3_grid, I4: float | None = None,
            bidirectional: bool = False, hysteresis_tol: float = 1e-6) -> SCScan:
    """Scan the pump intensity with continuation from point to point."""
    grid = np.asarray(I3_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("I3 grid must be strictly increasing")
    if I4 is not None:
        p = p.with_intensities(I4=I4)
    n0 = critical_numbers(p).n0
    up = _sweep(p, grid, n0)
    if not bidirectional:
        return SCScan(up)
    rev = _sweep(p, grid[::-1], n0)
    down = SCBranch(grid, rev.alpha2_n0[::-1], {k: v[::-1] for k, v in rev.populations.items()},
                    rev.states[::-1], rev.errors)
    diff = np.nanmax(np.abs(up.alpha2_n0 - down.alpha2_n0))
    return SCScan(up, down, hysteresis=bool(diff > hysteresis_tol * max(1.0, np.nanmax(up.alpha2_n0))))


def knee_and_quench(scan: SCScan, fraction: float = 0.01) -> tuple:
    """Threshold knee and quench point read off a scan.

    The knee is where ``|alpha|^2`` first rises above ``fraction`` of its peak
    (linearly interpolated); the quench is where it falls back below it.
    """
    I, y = scan.I3, np.nan_to_num(scan.alpha2_n0)
    peak = y.max()
    if peak <= 0:
        return None, None
    lev = fraction * peak
    above = y > lev
    i_on = int(np.argmax(above))
    knee = _cross(I, y, i_on - 1, lev) if i_on > 0 else I[0]
    after = np.flatnonzero(~above[i_on:])
    quench = _cross(I, y, i_on + after[0] - 1, lev) if after.size else None
    return knee, quench


def _cross(I, y, i, lev):
    return float(I[i] + (lev - y[i]) * (I[i + 1] - I[i]) / (y[i + 1] - y[i]))
