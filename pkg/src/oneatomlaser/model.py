"""Open-system model container shared by the model builders and the solvers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np
import scipy.sparse as sp

from .hilbert import HilbertSpace, Operator, zero


@dataclass(frozen=True)
class TimeDependence:
    """Scalar envelope ``f(t)`` multiplying a Hamiltonian term.

    ``kind`` is ``"const"`` (f = 1), ``"sin"`` or ``"cos"`` of the harmonic
    phase ``theta(t) = theta0 + omega * t``.
    """

    kind: str = "const"
    theta0: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in ("const", "sin", "cos"):
            raise ValueError(f"unknown time dependence {self.kind!r}")

    @property
    def is_constant(self) -> bool:
        return self.kind == "const" or self.omega == 0.0

    def __call__(self, t: float) -> float:
        if self.kind == "const":
            return 1.0
        theta = self.theta0 + self.omega * t
        return math.sin(theta) if self.kind == "sin" else math.cos(theta)

    def frozen(self) -> "TimeDependence | float":
        """Constant value if time independent, else self."""
        return self(0.0) if self.is_constant else self


CONSTANT = TimeDependence()


@dataclass(frozen=True)
class HamiltonianTerm:
    op: Operator
    td: TimeDependence = CONSTANT


@dataclass(frozen=True)
class CollapseChannel:
    label: str
    op: Operator
    cavity: bool = False   # counts as a detected cavity-output click


@dataclass(frozen=True)
class MeanFieldTerm:
    """Hamiltonian piece ``atom (x) a^dag^creators a^annihilators`` of one cavity mode.

    Builders emit these alongside the full operators so the factorized
    equations are generated from the same source as the master equation.
    ``mode`` is the cavity-mode index (0 for the single-mode models).
    """

    atom: np.ndarray
    creators: int = 0
    annihilators: int = 0
    mode: int = 0


@dataclass(frozen=True)
class MeanFieldSpec:
    atom_labels: tuple
    terms: tuple                 # MeanFieldTerm, summing to a Hermitian H
    atom_collapse: tuple         # dense atomic collapse matrices
    cavity_decay: tuple          # field amplitude decay per mode


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    space: HilbertSpace
    hamiltonian_terms: tuple
    collapse: tuple
    observables: Mapping[str, Operator] = field(default_factory=dict)
    params: Any = None
    # U(1) label per basis state, conserved by the Liouvillian when given.
    charge: np.ndarray | None = None
    mean_field: MeanFieldSpec | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian_terms", tuple(self.hamiltonian_terms))
        object.__setattr__(self, "collapse", tuple(self.collapse))
        object.__setattr__(self, "observables", MappingProxyType(dict(self.observables)))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))
        labels = [c.label for c in self.collapse]
        if len(set(labels)) != len(labels):
            raise ValueError(f"collapse channel labels must be unique: {labels}")
        for term in self.hamiltonian_terms:
            if term.op.space != self.space:
                raise ValueError("Hamiltonian term on a foreign space")
        for c in self.collapse:
            if c.op.space != self.space:
                raise ValueError(f"collapse channel {c.label!r} on a foreign space")

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild them through __post_init__ in worker processes
        state = {f: getattr(self, f) for f in self.__dataclass_fields__}
        state["observables"] = dict(self.observables)
        state["metadata"] = dict(self.metadata)
        return _rebuild_model, (type(self), state)

    @property
    def dim(self) -> int:
        return self.space.total_dim

    @property
    def is_time_dependent(self) -> bool:
        return any(not t.td.is_constant for t in self.hamiltonian_terms)

    @property
    def channel_labels(self) -> tuple:
        return tuple(c.label for c in self.collapse)

    @property
    def cavity_channels(self) -> tuple:
        return tuple(c.label for c in self.collapse if c.cavity)

    def channel(self, label: str) -> CollapseChannel:
        for c in self.collapse:
            if c.label == label:
                return c
        raise KeyError(label)

    def hamiltonian(self, t: float = 0.0) -> Operator:
        h = zero(self.space)
        for term in self.hamiltonian_terms:
            h = h + term.td(t) * term.op
        return h

    def grouped_terms(self) -> list:
        """Hamiltonian as ``[(TimeDependence, csr), ...]`` with constant parts merged."""
        const = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        groups: dict = {}
        for term in self.hamiltonian_terms:
            if term.td.is_constant:
                const = const + term.td(0.0) * term.op.matrix
            else:
                key = term.td
                groups[key] = groups.get(key, 0) + term.op.matrix
        out = [(CONSTANT, sp.csr_matrix(const))]
        out.extend((td, sp.csr_matrix(m)) for td, m in groups.items())
        return out


def _rebuild_model(cls, state):
    return cls(**state)
