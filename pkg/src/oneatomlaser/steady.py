"""Liouvillian construction and steady states of the master equation.

Density matrices are vectorized column-stacked (``rho.ravel(order="F")``),
so ``vec(A rho B) = (B^T kron A) vec(rho)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fourstate import FourStateParams, build_four_state, default_truncation, purcell_fraction
from .hilbert import expectation
from .model import ModelSpec

log = logging.getLogger(__name__)


class UnsupportedModelError(ValueError):
    pass


class DegenerateSteadyStateError(RuntimeError):
    def __init__(self, message, null_dimension=None, conserved=()):
        super().__init__(message)
        self.null_dimension = null_dimension
        self.conserved = conserved


class SteadyStateError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Liouvillian:
    superoperator: sp.csr_matrix
    model: ModelSpec

    @property
    def dim(self) -> int:
        return self.model.dim

    def apply(self, rho: np.ndarray) -> np.ndarray:
        d = self.dim
        out = self.superoperator @ np.asarray(rho).ravel(order="F")
        return out.reshape((d, d), order="F")


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).ravel(order="F")


def unvec(x: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(x).reshape((d, d), order="F")


def hamiltonian_superop(h: sp.spmatrix) -> sp.csr_matrix:
    """``-i[H, .]`` as a superoperator."""
    d = h.shape[0]
    eye = sp.identity(d, dtype=complex, format="csr")
    return (-1j * (sp.kron(eye, h) - sp.kron(h.T, eye))).tocsr()


def dissipator_superop(c: sp.spmatrix) -> sp.csr_matrix:
    """``c . c^dag - 1/2 {c^dag c, .}`` as a superoperator."""
    d = c.shape[0]
    eye = sp.identity(d, dtype=complex, format="csr")
    cdc = (c.conj().T @ c).tocsr()
    return (sp.kron(c.conj(), c) - 0.5 * sp.kron(eye, cdc) - 0.5 * sp.kron(cdc.T, eye)).tocsr()


def liouvillian(model: ModelSpec) -> Liouvillian:
    """Generator of the master equation for a time-independent model."""
    if model.is_time_dependent:
        raise UnsupportedModelError(
            f"model {model.name!r} has time-dependent Hamiltonian terms; use dynamics.evolve")
    L = hamiltonian_superop(model.hamiltonian().matrix)
    for ch in model.collapse:
        L = L + dissipator_superop(ch.op.matrix)
    return Liouvillian(sp.csr_matrix(L), model)


def dissipator_superops(model: ModelSpec) -> sp.csr_matrix:
    d = model.dim
    D = sp.csr_matrix((d * d, d * d), dtype=complex)
    for ch in model.collapse:
        D = D + dissipator_superop(ch.op.matrix)
    return D


def _block_indices(model: ModelSpec) -> np.ndarray:
    """Vectorized indices of the zero-charge block, or all indices."""
    d = model.dim
    if model.charge is None:
        return np.arange(d * d)
    q = np.asarray(model.charge)
    rows, cols = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    mask = (q[rows] == q[cols]).ravel(order="F")
    return np.flatnonzero(mask)


def _describe_conserved(model, idx, left_null, d):
    out = []
    labels = model.space.basis_labels()
    for k in range(left_null.shape[1]):
        full = np.zeros(d * d, dtype=complex)
        full[idx] = left_null[:, k]
        X = unvec(full, d).conj()
        X = X / np.max(np.abs(X))
        diag = np.real_if_close(np.diag(X))
        terms = [f"{diag[i].real:+.3g}*P{labels[i]}" for i in range(d) if abs(diag[i]) > 1e-6]
        out.append(" ".join(terms[:12]) + (" ..." if len(terms) > 12 else ""))
    return tuple(out)


@dataclass
class SteadyInfo:
    residual: float
    clipped_mass: float
    unknowns: int
    min_eigenvalue: float


def steady_state(model: ModelSpec, check_degeneracy: bool | None = None,
                 return_info: bool = False):
    """Unique steady state of the master equation.

    Sparse LU on the Liouvillian with the row of one diagonal element replaced
    by the trace functional.  When the model carries a conserved U(1) charge
    only the block of coherences between equal charges is solved, which holds
    the unique steady state.
    """
    lv = liouvillian(model)
    d = model.dim
    idx = _block_indices(model)
    L = lv.superoperator[idx][:, idx].tocsc()
    n = L.shape[0]
    diag_pos = np.flatnonzero(idx % (d + 1) == 0)   # entries rho_ii
    scale = spla.norm(L, 1)

    if check_degeneracy is None:
        check_degeneracy = n <= 1024
    if check_degeneracy:
        _check_degeneracy(model, L, idx, scale)

    row = diag_pos[0]
    trace_row = np.zeros(n, dtype=complex)
    trace_row[diag_pos] = 1.0
    Lr = L.tolil()
    Lr[row, :] = trace_row
    Lr = Lr.tocsc()
    rhs = np.zeros(n, dtype=complex)
    rhs[row] = 1.0
    try:
        x = spla.splu(Lr, permc_spec="COLAMD").solve(rhs)
    except RuntimeError as exc:
        x = _smallest_eigvec(L, diag_pos)
        if x is None:
            raise DegenerateSteadyStateError(f"sparse LU failed ({exc}); steady state not unique") from exc

    if not np.all(np.isfinite(x)):
        x = _smallest_eigvec(L, diag_pos)
        if x is None:
            raise DegenerateSteadyStateError("singular Liouvillian: steady state not unique")

    full = np.zeros(d * d, dtype=complex)
    full[idx] = x
    rho = unvec(full, d)
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real

    evals, evecs = la.eigh(rho)
    negative = evals[evals < 0]
    clipped = float(-negative.sum())
    if clipped > 1e-8:
        raise SteadyStateError(f"steady state has negative weight {clipped:.3e}; solver failure")
    if clipped > 0:
        evals = np.clip(evals, 0.0, None)
        rho = (evecs * evals) @ evecs.conj().T
        rho /= np.trace(rho).real

    resid = float(np.linalg.norm(L @ vec(rho)[idx]))
    if resid > 1e-10 * max(scale, 1.0):
        raise SteadyStateError(f"steady-state residual {resid:.3e} exceeds tolerance (|L| = {scale:.3e})")

    if return_info:
        return rho, SteadyInfo(residual=resid, clipped_mass=clipped, unknowns=n,
                               min_eigenvalue=float(evals.min()))
    return rho


def _smallest_eigvec(L, diag_pos):
    try:
        vals, vecs = spla.eigs(L, k=1, sigma=0, which="LM")
    except Exception:  # noqa: BLE001  - ARPACK failure modes vary
        return None
    x = vecs[:, 0]
    tr = x[diag_pos].sum()
    if abs(tr) < 1e-12:
        return None
    return x / tr


def _check_degeneracy(model, L, idx, scale):
    dense = L.toarray()
    u, s, _ = la.svd(dense)
    tol = 1e-8 * max(scale, 1.0)
    null = int(np.sum(s < tol))
    if null >= 2:
        conserved = _describe_conserved(model, idx, u[:, s < tol], model.dim)
        raise DegenerateSteadyStateError(
            f"Liouvillian null space has dimension {null}; steady state depends on the "
            f"initial state. Conserved: {'; '.join(conserved)}",
            null_dimension=null, conserved=conserved)


# --- observables -------------------------------------------------------------

@dataclass(frozen=True)
class SteadyObservables:
    """Steady-state field and atom statistics.

    ``mandel_Q`` and ``g2_0`` are ``None`` when the photon number vanishes.
    """

    n_bar: float
    n_bar_modes: dict = field(default_factory=dict)
    populations: dict = field(default_factory=dict)
    mandel_Q: float | None = None
    g2_0: float | None = None
    ratio_R: float | None = None
    beta_43: float | None = None
    C1_43: float | None = None


N_BAR_FLOOR = 1e-12


def observables(rho: np.ndarray, model: ModelSpec, params: FourStateParams | None = None) -> SteadyObservables:
    params = params if params is not None else model.params
    obs = model.observables
    pops = {k[4:]: float(expectation(rho, op).real) for k, op in obs.items() if k.startswith("pop_")}

    if "n" in obs:
        n = float(expectation(rho, obs["n"]).real)
        modes = {"a": n}
        adag2a2 = float(expectation(rho, obs["adag2a2"]).real)
        n2 = float(expectation(rho, obs["n2"]).real)
    else:
        # two-mode model: statistics of the summed intensity, n_bar is the mode average
        na = float(expectation(rho, obs["n_a"]).real)
        nb = float(expectation(rho, obs["n_b"]).real)
        modes = {"a": na, "b": nb}
        tot = na + nb
        adag2a2 = float(expectation(rho, obs["I2_normal"]).real)
        n2 = adag2a2 + tot
        n = tot

    if n > N_BAR_FLOOR:
        g2 = adag2a2 / n ** 2
        Q = (n2 - n ** 2) / n - 1.0
    else:
        g2 = Q = None

    R = beta = c1_43 = None
    if isinstance(params, FourStateParams):
        beta, c1_43 = purcell_fraction(params)
        fl = params.gamma_ij["43"] * pops.get("e3", 0.0)
        if fl > 0:
            R = params.kappa * n / fl

    n_bar = n if "n" in obs else 0.5 * n
    return SteadyObservables(n_bar=n_bar, n_bar_modes=modes, populations=pops, mandel_Q=Q,
                             g2_0=g2, ratio_R=R, beta_43=beta, C1_43=c1_43)


# --- adaptive truncation ----------------------------------------------------

@dataclass(frozen=True)
class SteadyResult:
    params: FourStateParams
    truncation: int
    rho: np.ndarray = field(repr=False)
    obs: SteadyObservables
    info: SteadyInfo


def _rel_change(a, b, floor):
    if a is None or b is None:
        return 0.0 if a is b else math.inf
    return abs(a - b) / max(abs(b), floor)


def solve_steady(p: FourStateParams, builder=build_four_state, rtol: float = 1e-3,
                 step: int = 5, max_truncation: int = 400, **builder_kwargs) -> SteadyResult:
    """Steady state with the Fock truncation grown until n, Q and g2(0) settle."""
    N = default_truncation(p)
    fixed = p.fock_truncation is not None

    def solve(N):
        model = builder(p, truncation=N, **builder_kwargs)
        rho, info = steady_state(model, return_info=True)
        return SteadyResult(p, N, rho, observables(rho, model, p), info)

    cur = solve(N)
    if fixed:
        return cur
    while True:
        if N + step > max_truncation:
            raise SteadyStateError(f"Fock truncation did not converge below N={max_truncation}")
        nxt = solve(N + step)
        a, b = cur.obs, nxt.obs
        # absolute floors keep round-off in near-zero Q or g2 from blocking acceptance
        if (_rel_change(a.n_bar, b.n_bar, 1e-12) < rtol
                and _rel_change(a.mandel_Q, b.mandel_Q, 1e-6) < rtol
                and _rel_change(a.g2_0, b.g2_0, 1e-3) < rtol):
            return replace(nxt)
        log.debug("truncation N=%d not converged (n=%g vs %g)", N, a.n_bar, b.n_bar)
        cur, N = nxt, N + step
