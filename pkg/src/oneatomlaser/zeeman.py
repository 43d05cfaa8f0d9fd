"""Zeeman-resolved Cs model with two orthogonally polarized cavity modes.

32 atomic states (F=3,4 ground, F'=3',4' excited, all m_F), each cavity
mode truncated at ``fock_truncation`` photons.  The cavity axis is y; the
pump beams travel along x and z.  Mode ``a`` couples to the x dipole and
mode ``b`` to the z dipole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import constants as C
from .hilbert import (HilbertSpace, Operator, atomic_factor, angular_momentum_ops,
                      clebsch_gordan, fock_factor)
from .model import CollapseChannel, HamiltonianTerm, ModelSpec, TimeDependence

LEVELS = (("g", 3), ("g", 4), ("e", 3), ("e", 4))
ALLOWED_PAIRS = ((3, 3), (3, 4), (4, 3), (4, 4))     # (F ground, F' excited)
MODE_DIPOLE = {"a": "x", "b": "z"}                    # cavity polarization mapping


def _level_labels():
    labels = []
    for kind, F in LEVELS:
        labels += [f"{kind}{F}({m:+d})" for m in range(-F, F + 1)]
    return tuple(labels)


ATOM_LABELS = _level_labels()
N_ATOM = len(ATOM_LABELS)   # 32


def _offset(kind, F):
    off = 0
    for k, f in LEVELS:
        if (k, f) == (kind, F):
            return off
        off += 2 * f + 1
    raise ValueError(f"no level {kind}{F}")


def level_slice(kind: str, F: int) -> slice:
    o = _offset(kind, F)
    return slice(o, o + 2 * F + 1)


def atom_space() -> HilbertSpace:
    return HilbertSpace((atomic_factor(ATOM_LABELS),))


# --- atomic operators (dense 32 x 32) ---------------------------------------

def _sigma_q_dense(Fg: int, Fe: int, q: int) -> np.ndarray:
    if (Fg, Fe) not in ALLOWED_PAIRS:
        raise ValueError(f"transition F={Fg} -> F'={Fe} is not part of the model")
    if q not in (-1, 0, 1):
        raise ValueError(f"q must be -1, 0 or +1, got {q}")
    out = np.zeros((N_ATOM, N_ATOM))
    og, oe = _offset("g", Fg), _offset("e", Fe)
    for m in range(-Fg, Fg + 1):
        mp = m + q
        if abs(mp) <= Fe:
            out[og + m + Fg, oe + mp + Fe] = clebsch_gordan(Fg, m, 1, q, Fe, mp)
    return out


def sigma_q(Fg: int, Fe: int, q: int) -> Operator:
    """Lowering operator ``sum CG(Fg,m;1,q|Fe,m') |Fg,m><Fe,m'|`` on the 32 states."""
    return Operator(atom_space(), _sigma_q_dense(Fg, Fe, q))


def _sigma_cartesian_dense(Fg: int, Fe: int) -> dict:
    sp1, s0, sm1 = (_sigma_q_dense(Fg, Fe, q) for q in (1, 0, -1))
    r2 = math.sqrt(2.0)
    return {"x": -(sp1 - sm1) / r2, "y": 1j * (sp1 + sm1) / r2, "z": s0.astype(complex)}


def sigma_cartesian(Fg: int, Fe: int) -> dict:
    """Cartesian lowering operators ``{"x", "y", "z"}`` for one hyperfine pair."""
    return {k: Operator(atom_space(), v) for k, v in _sigma_cartesian_dense(Fg, Fe).items()}


def _pump_parts(omega, Fg, Fe):
    """Hermitian pieces of the pump Hamiltonian, keyed by the phase factor they multiply."""
    s = _sigma_cartesian_dense(Fg, Fe)
    h = {k: v + v.conj().T for k, v in s.items()}
    c = omega / (2.0 * math.sqrt(2.0))
    return {"sin_x": c * h["z"], "sin_z": c * h["x"], "cos_x": 0.5 * omega * h["y"],
            "cos_z": 0.5 * omega * h["y"]}


def pump_hamiltonian(omega: float, pair: tuple, theta_x: float, theta_z: float) -> Operator:
    """Polarization-gradient pump on one hyperfine pair at fixed phases."""
    Fg, Fe = pair
    parts = _pump_parts(omega, Fg, Fe)
    h = (parts["sin_x"] * math.sin(theta_x) + parts["sin_z"] * math.sin(theta_z)
         + parts["cos_x"] * math.cos(theta_x) + parts["cos_z"] * math.cos(theta_z))
    return Operator(atom_space(), h)


def pseudo_field_hamiltonian(B: float) -> Operator:
    """Zeeman term of a field ``B`` (Gauss) along the cavity axis y."""
    if B < 0:
        raise ValueError("pseudo-field magnitude must be nonnegative")
    h = np.zeros((N_ATOM, N_ATOM), dtype=complex)
    for kind, F in LEVELS:
        gF = C.CS_G_FACTORS[(kind, F)]
        _, Fy, _ = angular_momentum_ops(F)
        sl = level_slice(kind, F)
        h[sl, sl] = C.mhz(C.BOHR_MAGNETON_MHZ_PER_G * gF * B) * Fy
    return Operator(atom_space(), h)


# --- phase models ------------------------------------------------------------

@dataclass(frozen=True)
class ConstantPhase:
    theta: float = math.pi / 2

    def phases(self):
        """``{(beam, axis): TimeDependence-ready (theta0, omega)}``."""
        return {(b, ax): (self.theta, 0.0) for b in (3, 4) for ax in ("x", "z")}


def velocity_to_omega(v_cm_s: float, wavelength_um: float = C.CS_WAVELENGTH_UM) -> float:
    """Phase rate ``k v`` in rad/us for a speed in cm/s."""
    return C.TWO_PI / wavelength_um * v_cm_s * 1e-2


@dataclass(frozen=True)
class ConstantVelocity:
    """Atom moving at constant radial velocity through the pump gradients.

    Beams along the same axis share the velocity component on that axis.
    """

    theta0_3x: float
    theta0_3z: float
    theta0_4x: float
    theta0_4z: float
    v_x: float          # cm/s
    v_z: float          # cm/s

    @classmethod
    def random(cls, rng: np.random.Generator, v_range=(10.0, 20.0),
               independent_axes: bool = True) -> "ConstantVelocity":
        """Phases uniform on [0, 2 pi) and speeds uniform in ``v_range``.

        With ``independent_axes`` each of x and z gets its own speed;
        otherwise one speed is drawn along a uniformly random direction in
        the x-z plane.
        """
        th = rng.uniform(0.0, C.TWO_PI, size=4)
        if independent_axes:
            vx, vz = rng.uniform(*v_range, size=2)
        else:
            v, phi = rng.uniform(*v_range), rng.uniform(0.0, C.TWO_PI)
            vx, vz = v * math.cos(phi), v * math.sin(phi)
        return cls(*th, v_x=float(vx), v_z=float(vz))

    def phases(self):
        wx, wz = velocity_to_omega(self.v_x), velocity_to_omega(self.v_z)
        return {(3, "x"): (self.theta0_3x, wx), (3, "z"): (self.theta0_3z, wz),
                (4, "x"): (self.theta0_4x, wx), (4, "z"): (self.theta0_4z, wz)}


# --- parameters and model ----------------------------------------------------

@dataclass(frozen=True)
class ZeemanParams:
    """Parameters of the Zeeman-resolved model (rates in rad/us).

    ``g0`` is the coupling of a unit-strength transition; a hyperfine pair
    (F, F') couples with ``g0 * sqrt(gamma_FF' / gamma)`` times the
    Clebsch-Gordan coefficient, so the four-state g43 equals ``g0 / 2``.
    """

    kappa: float = C.CS_KAPPA
    gamma: float = C.CS_GAMMA
    branching: tuple = C.CS_BRANCHING
    Omega3: float = 0.0
    Omega4: float = 0.0
    Delta_AC: float = 0.0
    Delta3: float = 0.0
    Delta4: float = 0.0
    g0: float = 2.0 * C.CS_G43
    fock_truncation: int = 2
    B_pseudo: float = 0.75
    phase_model: object = field(default_factory=ConstantPhase)
    include_offresonant_e4: bool = True
    excited_splitting: float = C.CS_EXCITED_HFS

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(float(b) for b in self.branching))
        if self.fock_truncation < 1:
            raise ValueError("fock_truncation must be >= 1")
        for name in ("kappa", "gamma", "Omega3", "Omega4", "g0", "B_pseudo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def cs_defaults(cls, I3: float = 0.0, I4: float = 13.0, **overrides) -> "ZeemanParams":
        gamma = overrides.get("gamma", C.CS_GAMMA)
        overrides.setdefault("Omega3", C.intensity_to_rabi(I3, gamma))
        overrides.setdefault("Omega4", C.intensity_to_rabi(I4, gamma))
        return cls(**overrides)

    @classmethod
    def from_pump_ratio(cls, x: float, I4: float = 13.0, **overrides) -> "ZeemanParams":
        """Pump strength ``x = (7/9) I3 / I4``."""
        return cls.cs_defaults(I3=pump_ratio_to_I3(x, I4), I4=I4, **overrides)

    @property
    def gamma_pair(self) -> dict:
        """Amplitude decay rate for each (F, F') pair."""
        g33, g43, g44, g34 = (b * self.gamma for b in self.branching)
        return {(3, 3): g33, (4, 3): g43, (4, 4): g44, (3, 4): g34}

    def coupling(self, Fg: int, Fe: int) -> float:
        return self.g0 * math.sqrt(self.gamma_pair[(Fg, Fe)] / self.gamma)

    @property
    def offresonant_detuning(self) -> float:
        """Oscillation rate of the cavity coupling on F=4 <-> F'=4' in the model frame."""
        return self.excited_splitting + self.Delta3 - self.Delta4


def pump_ratio_to_I3(x: float, I4: float) -> float:
    return 9.0 / 7.0 * x * I4


def I3_to_pump_ratio(I3: float, I4: float) -> float:
    return 7.0 / 9.0 * I3 / I4


def cavity_coupling(p: ZeemanParams, space: HilbertSpace | None = None) -> list:
    """Atom-cavity coupling terms ``[HamiltonianTerm, ...]`` on the full space.

    The resonant F'=3' -> F=4 coupling is static; the F'=4' -> F=4 coupling,
    when included, carries the phase ``exp(-i delta t)`` split into cos and
    sin parts.
    """
    space = space or _full_space(p.fock_truncation)
    N = p.fock_truncation
    terms = []
    static = np.zeros((space.total_dim,) * 2, dtype=complex)
    cos_part = np.zeros_like(static)
    sin_part = np.zeros_like(static)
    for mode, dip in MODE_DIPOLE.items():
        ad = _mode_op(mode, N).conj().T
        s43 = p.coupling(4, 3) * _sigma_cartesian_dense(4, 3)[dip]
        x = np.kron(s43, ad)
        static += x + x.conj().T
        if p.include_offresonant_e4:
            s44 = p.coupling(4, 4) * _sigma_cartesian_dense(4, 4)[dip]
            y = np.kron(s44, ad)
            cos_part += y + y.conj().T
            sin_part += -1j * (y - y.conj().T)
    terms.append(HamiltonianTerm(Operator(space, static)))
    if p.include_offresonant_e4:
        d = p.offresonant_detuning
        terms.append(HamiltonianTerm(Operator(space, cos_part), TimeDependence("cos", 0.0, d)))
        terms.append(HamiltonianTerm(Operator(space, sin_part), TimeDependence("sin", 0.0, d)))
    return terms


def _full_space(N: int) -> HilbertSpace:
    return HilbertSpace((atomic_factor(ATOM_LABELS), fock_factor(N, "a"), fock_factor(N, "b")))


def _mode_op(mode: str, N: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, N + 1)), k=1).astype(complex)
    eye = np.eye(N + 1)
    return np.kron(a, eye) if mode == "a" else np.kron(eye, a)


def build_zeeman(p: ZeemanParams) -> ModelSpec:
    """Full Zeeman model: pumps, cavity, pseudo-field and all decay paths."""
    N = p.fock_truncation
    space = _full_space(N)
    nf = (N + 1) ** 2
    eye_f = np.eye(nf)
    full = lambda atom: np.kron(atom, eye_f)  # noqa: E731

    # static detunings and photon energy
    det = np.zeros(N_ATOM)
    det[level_slice("e", 3)] = p.Delta3
    det[level_slice("e", 4)] = p.Delta4
    a, b = _mode_op("a", N), _mode_op("b", N)
    n_ab = a.conj().T @ a + b.conj().T @ b
    static = full(np.diag(det)) + (p.Delta_AC + p.Delta3) * np.kron(np.eye(N_ATOM), n_ab)
    static = static + full(pseudo_field_hamiltonian(p.B_pseudo).toarray())

    terms = []
    phases = p.phase_model.phases()
    for beam, omega, pair in ((3, p.Omega3, (3, 3)), (4, p.Omega4, (4, 4))):
        parts = _pump_parts(omega, *pair)
        for key, mat in parts.items():
            trig, axis = key.split("_")
            th0, w = phases[(beam, axis)]
            td = TimeDependence(trig, th0, w)
            if td.is_constant:
                static = static + td(0.0) * full(mat)
            else:
                terms.append(HamiltonianTerm(Operator(space, full(mat)), td))
    terms = [HamiltonianTerm(Operator(space, static))] + cavity_coupling(p, space) + terms

    A, B = (np.kron(np.eye(N_ATOM), m) for m in (a, b))
    collapse = [CollapseChannel("cavity_a", Operator(space, math.sqrt(2 * p.kappa) * A), cavity=True),
                CollapseChannel("cavity_b", Operator(space, math.sqrt(2 * p.kappa) * B), cavity=True)]
    for (Fg, Fe), rate in p.gamma_pair.items():
        for q in (-1, 0, 1):
            c = math.sqrt(2 * rate) * _sigma_q_dense(Fg, Fe, q)
            collapse.append(CollapseChannel(f"e{Fe}->g{Fg},q={q:+d}", Operator(space, full(c))))

    nA, nB = A.conj().T @ A, B.conj().T @ B
    Ad, Bd = A.conj().T, B.conj().T
    observables = {
        "n_a": Operator(space, nA), "n_b": Operator(space, nB),
        "I2_normal": Operator(space, Ad @ Ad @ A @ A + Bd @ Bd @ B @ B + 2 * nA @ nB),
    }
    for kind, F in LEVELS:
        P = np.zeros((N_ATOM, N_ATOM))
        sl = level_slice(kind, F)
        P[sl, sl] = np.eye(2 * F + 1)
        observables[f"pop_{kind}{F}"] = Operator(space, full(P))

    charge = None
    if not p.include_offresonant_e4:
        q_atom = np.zeros(N_ATOM)
        q_atom[level_slice("g", 4)] = -1
        q_atom[level_slice("e", 4)] = -1
        photons = space.factor_values("a") + space.factor_values("b")
        charge = photons + np.repeat(q_atom, nf)

    return ModelSpec(name="zeeman", space=space, hamiltonian_terms=terms, collapse=collapse,
                     observables=observables, params=p, charge=charge,
                     metadata={"phase_model": repr(p.phase_model), "mode_dipole": dict(MODE_DIPOLE)})


def initial_ground_state(model: ModelSpec, level: tuple = ("g", 3)) -> np.ndarray:
    """Density matrix: vacuum, atom spread evenly over one ground manifold."""
    d = model.dim
    rho = np.zeros((d, d), dtype=complex)
    N = model.space.factor("a").truncation
    nf = (N + 1) ** 2
    sl = level_slice(*level)
    for i in range(sl.start, sl.stop):
        rho[i * nf, i * nf] = 1.0
    return rho / np.trace(rho)


def with_phase_model(p: ZeemanParams, model) -> ZeemanParams:
    return replace(p, phase_model=model)
