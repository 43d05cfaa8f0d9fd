"""Composite Hilbert spaces and sparse operator algebra.

Spaces are ordered products of factors, atom first and cavity modes after.
Operators carry a reference to the space they act on and store a CSR matrix.
Everything here is immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Hashable, Sequence

import numpy as np
import scipy.sparse as sp


class LabelNotFoundError(KeyError):
    pass


class InvalidTruncationError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    """One tensor factor: a set of labelled atomic levels or a Fock mode.

    ``labels`` are the basis labels in index order.  For a Fock mode they are
    the photon numbers ``0..N``.
    """

    name: str
    kind: str
    labels: tuple

    def __post_init__(self):
        if self.kind not in ("atom", "fock"):
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if len(self.labels) == 0:
            raise ValueError("a factor needs at least one basis state")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate basis labels in factor {self.name!r}")

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def truncation(self) -> int:
        if self.kind != "fock":
            raise TypeError("only Fock factors have a truncation")
        return self.dim - 1

    def index(self, label: Hashable) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise LabelNotFoundError(f"label {label!r} not in factor {self.name!r}") from None


def atomic_factor(labels: Sequence[Hashable], name: str = "atom") -> Factor:
    return Factor(name=name, kind="atom", labels=tuple(labels))


def fock_factor(truncation: int, name: str = "a") -> Factor:
    if truncation < 1:
        raise InvalidTruncationError(f"Fock truncation must be >= 1, got {truncation}")
    return Factor(name=name, kind="fock", labels=tuple(range(truncation + 1)))


@dataclass(frozen=True)
class HilbertSpace:
    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ValueError(f"factor names must be unique, got {names}")

    @property
    def dims(self) -> tuple:
        return tuple(f.dim for f in self.factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims)) if self.factors else 1

    def factor(self, name: str) -> Factor:
        for f in self.factors:
            if f.name == name:
                return f
        raise LabelNotFoundError(f"no factor named {name!r}")

    def factor_index(self, name: str) -> int:
        for i, f in enumerate(self.factors):
            if f.name == name:
                return i
        raise LabelNotFoundError(f"no factor named {name!r}")

    def index(self, labels: Sequence[Hashable]) -> int:
        """Composite index of a product basis state given one label per factor."""
        if len(labels) != len(self.factors):
            raise ValueError(f"need {len(self.factors)} labels, got {len(labels)}")
        return int(np.ravel_multi_index(
            [f.index(lab) for f, lab in zip(self.factors, labels)], self.dims))

    def labels(self, index: int) -> tuple:
        multi = np.unravel_index(index, self.dims)
        return tuple(f.labels[i] for f, i in zip(self.factors, multi))

    def basis_labels(self) -> list:
        return [self.labels(i) for i in range(self.total_dim)]

    def basis(self, labels: Sequence[Hashable]) -> np.ndarray:
        psi = np.zeros(self.total_dim, dtype=complex)
        psi[self.index(labels)] = 1.0
        return psi

    def factor_values(self, name: str) -> np.ndarray:
        """Label of factor ``name`` for every composite index (numeric factors only)."""
        i = self.factor_index(name)
        multi = np.unravel_index(np.arange(self.total_dim), self.dims)
        return np.asarray(self.factors[i].labels)[multi[i]]

    def __mul__(self, other: "HilbertSpace") -> "HilbertSpace":
        return HilbertSpace(self.factors + other.factors)


@dataclass(frozen=True, eq=False)
class Operator:
    space: HilbertSpace
    matrix: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=complex)
        n = self.space.total_dim
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match space dimension {n}")
        m.eliminate_zeros()
        m.sort_indices()
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def entries(self):
        """Stored nonzeros as ``(row, col, value)`` triples."""
        coo = self.matrix.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def dag(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T.tocsr())

    def is_hermitian(self, tol: float = 1e-10) -> bool:
        diff = self.matrix - self.matrix.conj().T
        scale = max(1.0, abs(self.matrix).max() if self.nnz else 0.0)
        return (abs(diff).max() if diff.nnz else 0.0) <= tol * scale

    def _check(self, other: "Operator"):
        if other.space != self.space:
            raise ValueError("operators act on different spaces")

    def __add__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.space, self.matrix + other.matrix)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.space, self.matrix - other.matrix)
        return NotImplemented

    def __neg__(self):
        return Operator(self.space, -self.matrix)

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return Operator(self.space, self.matrix * scalar)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Operator(self.space, self.matrix / scalar)

    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.space, self.matrix @ other.matrix)
        return self.matrix @ other

    def commutator(self, other: "Operator") -> "Operator":
        return self @ other - other @ self


def zero(space: HilbertSpace) -> Operator:
    n = space.total_dim
    return Operator(space, sp.csr_matrix((n, n), dtype=complex))


def identity(space: HilbertSpace) -> Operator:
    return Operator(space, sp.identity(space.total_dim, dtype=complex, format="csr"))


def fock_destroy(truncation: int, name: str = "a") -> Operator:
    """Annihilation operator on a Fock factor holding ``0..truncation`` photons."""
    factor = fock_factor(truncation, name)
    n = np.arange(1, truncation + 1)
    mat = sp.csr_matrix((np.sqrt(n), (n - 1, n)), shape=(factor.dim, factor.dim))
    return Operator(HilbertSpace((factor,)), mat)


def projector(factor: Factor, i: Hashable, j: Hashable) -> Operator:
    """Transition operator ``|i><j|`` on a single factor."""
    r, c = factor.index(i), factor.index(j)
    mat = sp.csr_matrix(([1.0], ([r], [c])), shape=(factor.dim, factor.dim))
    return Operator(HilbertSpace((factor,)), mat)


def embed(op: Operator, index: int, space: HilbertSpace) -> Operator:
    """Lift a single-factor operator to ``space``, acting on factor ``index``."""
    if len(op.space.factors) != 1:
        raise ValueError("embed expects an operator on a single factor")
    if not 0 <= index < len(space.factors):
        raise IndexError(f"factor index {index} out of range")
    if op.space.factors[0].dim != space.factors[index].dim:
        raise ValueError(
            f"shape mismatch: operator dim {op.space.factors[0].dim} vs "
            f"factor dim {space.factors[index].dim}")
    left = int(np.prod(space.dims[:index]))
    right = int(np.prod(space.dims[index + 1:]))
    mat = sp.kron(sp.identity(left, format="csr"), op.matrix, format="csr")
    mat = sp.kron(mat, sp.identity(right, format="csr"), format="csr")
    return Operator(space, mat)


def tensor(a: Operator, b: Operator) -> Operator:
    return Operator(a.space * b.space, sp.kron(a.matrix, b.matrix, format="csr"))


def tensor_all(ops: Sequence[Operator]) -> Operator:
    return reduce(tensor, ops)


def expectation(rho: np.ndarray, op: Operator) -> complex:
    """``Tr[rho op]`` for a density matrix, or ``<psi|op|psi>`` for a state vector."""
    rho = np.asarray(rho)
    n = op.space.total_dim
    if rho.ndim == 1:
        if rho.shape != (n,):
            raise ValueError(f"state of length {rho.shape[0]} on a space of dimension {n}")
        return complex(np.vdot(rho, op.matrix @ rho))
    if rho.shape != (n, n):
        raise ValueError(f"density matrix shape {rho.shape} on a space of dimension {n}")
    # Tr[rho O] = sum_ij rho_ji O_ij
    coo = op.matrix.tocoo()
    return complex(np.sum(rho[coo.col, coo.row] * coo.data))


def ket2dm(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def coherent_state(truncation: int, alpha: complex) -> np.ndarray:
    """Normalized coherent state truncated at ``truncation`` photons."""
    n = np.arange(truncation + 1)
    logfact = np.array([math.lgamma(k + 1) for k in n])
    amp = np.exp(-abs(alpha) ** 2 / 2 - 0.5 * logfact) * np.power(complex(alpha), n)
    return amp / np.linalg.norm(amp)


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    diff = np.asarray(rho) - np.asarray(sigma)
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


# --- angular momentum -------------------------------------------------------

def _as_half_integer(x, what: str) -> Fraction:
    q = Fraction(x).limit_denominator(2)
    if q.denominator not in (1, 2) or abs(float(q) - float(x)) > 1e-12:
        raise ValueError(f"{what}={x!r} is not an integer or half-integer")
    return q


def _fact(x: Fraction) -> int:
    if x.denominator != 1 or x < 0:
        raise ValueError(f"factorial of non-natural {x}")
    return math.factorial(int(x))


def clebsch_gordan(j1, m1, j2, m2, J, M) -> float:
    """Condon-Shortley coefficient ``<j1 m1; j2 m2 | J M>``.

    Closed-form Racah sum evaluated in exact rational arithmetic; only the
    final square root is taken in floating point.
    """
    j1, m1 = _as_half_integer(j1, "j1"), _as_half_integer(m1, "m1")
    j2, m2 = _as_half_integer(j2, "j2"), _as_half_integer(m2, "m2")
    J, M = _as_half_integer(J, "J"), _as_half_integer(M, "M")
    for j, m, name in ((j1, m1, "1"), (j2, m2, "2"), (J, M, "")):
        if j < 0:
            raise ValueError(f"j{name} must be nonnegative")
        if abs(m) > j or (j - m).denominator != 1:
            raise ValueError(f"m{name}={m} incompatible with j{name}={j}")
    if (j1 + j2 + J).denominator != 1:
        raise ValueError("j1 + j2 + J must be an integer")

    if M != m1 + m2 or J < abs(j1 - j2) or J > j1 + j2:
        return 0.0

    pre = Fraction((2 * J + 1) * _fact(J + j1 - j2) * _fact(J - j1 + j2) * _fact(j1 + j2 - J),
                   _fact(j1 + j2 + J + 1))
    pre *= (_fact(J + M) * _fact(J - M) * _fact(j1 - m1) * _fact(j1 + m1)
            * _fact(j2 - m2) * _fact(j2 + m2))

    kmin = int(max(0, j2 - J - m1, j1 - J + m2))
    kmax = int(min(j1 + j2 - J, j1 - m1, j2 + m2))
    total = Fraction(0)
    for k in range(kmin, kmax + 1):
        denom = (math.factorial(k) * _fact(j1 + j2 - J - k) * _fact(j1 - m1 - k)
                 * _fact(j2 + m2 - k) * _fact(J - j2 + m1 + k) * _fact(J - j1 - m2 + k))
        total += Fraction((-1) ** k, denom)

    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * math.sqrt(float(total * total * pre))


def angular_momentum_ops(F) -> tuple:
    """Dense ``(Fx, Fy, Fz)`` for spin ``F`` in the ``m = -F..F`` ascending basis."""
    F = float(_as_half_integer(F, "F"))
    m = np.arange(-F, F + 1)
    # <m+1|F+|m> = sqrt(F(F+1) - m(m+1))
    up = np.sqrt(F * (F + 1) - m[:-1] * (m[:-1] + 1))
    fplus = np.diag(up, k=-1).astype(complex)
    fminus = fplus.conj().T
    fx = 0.5 * (fplus + fminus)
    fy = -0.5j * (fplus - fminus)
    fz = np.diag(m).astype(complex)
    return fx, fy, fz
