"""Four-state one-atom-laser model and its Raman reduction.

Levels (index order): g3, g4, e3, e4 -- the F=3,4 ground and F'=3',4'
excited hyperfine levels of the Cs D2 line.  The cavity couples e3 <-> g4,
Omega3 pumps g3 <-> e3 and Omega4 recycles g4 <-> e4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import constants as C
from .hilbert import HilbertSpace, Operator, atomic_factor, fock_factor
from .model import CollapseChannel, HamiltonianTerm, MeanFieldSpec, MeanFieldTerm, ModelSpec

FOUR_LEVELS = ("g3", "g4", "e3", "e4")
RAMAN_LEVELS = ("g3", "g4", "e3")


@dataclass(frozen=True)
class FourStateParams:
    """Parameters of the four-state model, angular frequencies in rad/us.

    ``branching`` holds (gamma33, gamma43, gamma44, gamma34) as multiples of
    ``gamma``; gamma_ij is the amplitude decay rate from excited F'=j' to
    ground F=i.  ``f`` is the cavity-length scale factor the parameters were
    produced with (bookkeeping only; it sets the default Fock truncation).
    """

    g43: float = C.CS_G43
    kappa: float = C.CS_KAPPA
    gamma: float = C.CS_GAMMA
    branching: tuple = C.CS_BRANCHING
    Omega3: float = 0.0
    Omega4: float = 0.0
    Delta_AC: float = 0.0
    Delta3: float = 0.0
    Delta4: float = 0.0
    fock_truncation: int | None = None
    f: float = 1.0
    # Eq. 1 as printed puts Delta4 in the cavity term; see photon_detuning.
    literal_h4: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(float(b) for b in self.branching))
        if len(self.branching) != 4:
            raise ValueError("branching needs four entries (gamma33, gamma43, gamma44, gamma34)")
        for name in ("g43", "kappa", "gamma", "Omega3", "Omega4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(b < 0 for b in self.branching):
            raise ValueError("branching ratios must be nonnegative")
        if self.fock_truncation is not None and self.fock_truncation < 1:
            raise ValueError("fock_truncation must be >= 1")
        if self.f <= 0:
            raise ValueError("scale factor f must be positive")

    @classmethod
    def cs_defaults(cls, I3: float = 0.0, I4: float = 3.0, **overrides) -> "FourStateParams":
        """Cs D2 parameters with pump intensities ``I = (Omega / 2 gamma)**2``."""
        gamma = overrides.get("gamma", C.CS_GAMMA)
        overrides.setdefault("Omega3", C.intensity_to_rabi(I3, gamma))
        overrides.setdefault("Omega4", C.intensity_to_rabi(I4, gamma))
        return cls(**overrides)

    @classmethod
    def from_mhz(cls, **values) -> "FourStateParams":
        """Build from values quoted as 2*pi x MHz (rates, couplings, detunings)."""
        angular = {"g43", "kappa", "gamma", "Omega3", "Omega4", "Delta_AC", "Delta3", "Delta4"}
        return cls(**{k: (C.mhz(v) if k in angular else v) for k, v in values.items()})

    @property
    def gamma_ij(self) -> dict:
        g33, g43, g44, g34 = (b * self.gamma for b in self.branching)
        return {"33": g33, "43": g43, "44": g44, "34": g34}

    @property
    def I3(self) -> float:
        return C.rabi_to_intensity(self.Omega3, self.gamma)

    @property
    def I4(self) -> float:
        return C.rabi_to_intensity(self.Omega4, self.gamma)

    @property
    def photon_detuning(self) -> float:
        """Cavity-photon energy in the frame where H1 is static.

        The frame that keeps every term of Eq. 1 time independent puts the
        photon at Delta_AC + Delta3; the printed Delta_AC + Delta4 is
        available through ``literal_h4``.
        """
        return self.Delta_AC + (self.Delta4 if self.literal_h4 else self.Delta3)

    def with_intensities(self, I3: float | None = None, I4: float | None = None):
        changes = {}
        if I3 is not None:
            changes["Omega3"] = C.intensity_to_rabi(I3, self.gamma)
        if I4 is not None:
            changes["Omega4"] = C.intensity_to_rabi(I4, self.gamma)
        return replace(self, **changes)


@dataclass(frozen=True)
class CriticalNumbers:
    n0: float
    N0: float
    C1: float


def critical_numbers(p: FourStateParams) -> CriticalNumbers:
    """Saturation photon number, critical atom number and cooperativity."""
    if p.g43 == 0:
        raise ZeroDivisionError("critical numbers need a nonzero coupling g43")
    g2 = p.g43 ** 2
    N0 = 2.0 * p.kappa * p.gamma / g2
    return CriticalNumbers(n0=p.gamma ** 2 / (2.0 * g2), N0=N0, C1=1.0 / N0)


def scale_cavity(p: FourStateParams, f: float) -> FourStateParams:
    """Length scaling l -> f l at fixed waist and mirror reflectivity."""
    if not f > 0:
        raise ValueError(f"scale factor must be positive, got {f}")
    return replace(p, g43=p.g43 / math.sqrt(f), kappa=p.kappa / f, f=p.f * f)


def purcell_fraction(p: FourStateParams) -> tuple:
    """``(beta43, C1_43)`` for emission on e3 -> g4."""
    c1_43 = critical_numbers(p).C1 * p.gamma / p.gamma_ij["43"]
    return 2 * c1_43 / (1 + 2 * c1_43), c1_43


def default_truncation(p: FourStateParams) -> int:
    """Starting Fock truncation for the adaptive steady-state solve."""
    if p.fock_truncation is not None:
        return p.fock_truncation
    if p.f <= 10:
        return 15
    return int(math.ceil(3 * critical_numbers(p).n0 + 10))


def _proj(labels, i, j):
    m = np.zeros((len(labels), len(labels)), dtype=complex)
    m[labels.index(i), labels.index(j)] = 1.0
    return m


def _ladder_power(N: int, creators: int, annihilators: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, N + 1)), k=1).astype(complex)
    return (np.linalg.matrix_power(a.conj().T, creators)
            @ np.linalg.matrix_power(a, annihilators))


def _full_operator(space, term: MeanFieldTerm, N: int) -> Operator:
    return Operator(space, np.kron(term.atom, _ladder_power(N, term.creators, term.annihilators)))


def _assemble(name, labels, terms, atom_channels, kappa, N, p, atom_charge, metadata=None) -> ModelSpec:
    """Generate the full model from its factored description."""
    atom = atomic_factor(labels)
    space = HilbertSpace((atom, fock_factor(N, "a")))
    na = len(labels)
    hamiltonian = [HamiltonianTerm(_full_operator(space, t, N)) for t in terms if np.any(t.atom)]

    a_full = Operator(space, np.kron(np.eye(na), _ladder_power(N, 0, 1)))
    collapse = [CollapseChannel("cavity", math.sqrt(2 * kappa) * a_full, cavity=True)]
    for label, mat in atom_channels:
        collapse.append(CollapseChannel(label, Operator(space, np.kron(mat, np.eye(N + 1)))))

    n_op = a_full.dag() @ a_full
    observables = {"n": n_op, "n2": n_op @ n_op, "adag2a2": a_full.dag() @ a_full.dag() @ a_full @ a_full,
                   "a": a_full}
    for lab in labels:
        observables[f"pop_{lab}"] = Operator(space, np.kron(_proj(labels, lab, lab), np.eye(N + 1)))

    photons = space.factor_values("a")
    charge = photons + np.repeat([atom_charge[lab] for lab in labels], N + 1)

    mean_field = MeanFieldSpec(
        atom_labels=tuple(labels), terms=tuple(terms),
        atom_collapse=tuple(mat for _, mat in atom_channels), cavity_decay=(kappa,))
    return ModelSpec(name=name, space=space, hamiltonian_terms=hamiltonian,
                     collapse=collapse, observables=observables, params=p,
                     charge=charge, mean_field=mean_field, metadata=metadata or {})


def _common_terms(p: FourStateParams, labels) -> list:
    P = lambda i, j: _proj(labels, i, j)  # noqa: E731
    terms = [
        MeanFieldTerm(p.g43 * P("g4", "e3"), creators=1),
        MeanFieldTerm(p.g43 * P("e3", "g4"), annihilators=1),
        MeanFieldTerm(0.5 * p.Omega3 * (P("g3", "e3") + P("e3", "g3"))),
        MeanFieldTerm(p.photon_detuning * np.eye(len(labels)), creators=1, annihilators=1),
        MeanFieldTerm(p.Delta3 * P("e3", "e3")),
    ]
    return terms


def build_four_state(p: FourStateParams, truncation: int | None = None) -> ModelSpec:
    """Four-state atom in a single-mode cavity with the five decay channels."""
    N = truncation if truncation is not None else default_truncation(p)
    labels = FOUR_LEVELS
    P = lambda i, j: _proj(labels, i, j)  # noqa: E731
    terms = _common_terms(p, labels)
    terms.append(MeanFieldTerm(0.5 * p.Omega4 * (P("g4", "e4") + P("e4", "g4"))))
    terms.append(MeanFieldTerm(p.Delta4 * P("e4", "e4")))
    r = p.gamma_ij
    channels = [
        ("e3->g3", math.sqrt(2 * r["33"]) * P("g3", "e3")),
        ("e3->g4", math.sqrt(2 * r["43"]) * P("g4", "e3")),
        ("e4->g3", math.sqrt(2 * r["34"]) * P("g3", "e4")),
        ("e4->g4", math.sqrt(2 * r["44"]) * P("g4", "e4")),
    ]
    charge = {"g3": 0, "e3": 0, "g4": -1, "e4": -1}
    return _assemble("four_state", labels, terms, channels, p.kappa, N, p, charge)


def build_raman_variant(p: FourStateParams, beta34: float, truncation: int | None = None) -> ModelSpec:
    """Three-level Raman reduction: recycling via e4 replaced by g4 -> g3 decay."""
    if not beta34 > 0:
        raise ValueError(f"beta34 must be positive, got {beta34}")
    N = truncation if truncation is not None else default_truncation(p)
    labels = RAMAN_LEVELS
    P = lambda i, j: _proj(labels, i, j)  # noqa: E731
    terms = _common_terms(p, labels)
    r = p.gamma_ij
    channels = [
        ("e3->g3", math.sqrt(2 * r["33"]) * P("g3", "e3")),
        ("e3->g4", math.sqrt(2 * r["43"]) * P("g4", "e3")),
        ("g4->g3", math.sqrt(2 * beta34) * P("g3", "g4")),
    ]
    charge = {"g3": 0, "e3": 0, "g4": -1}
    return _assemble("raman", labels, terms, channels, p.kappa, N, p, charge,
                     metadata={"beta34": beta34})
