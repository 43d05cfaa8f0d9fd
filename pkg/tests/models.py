"""Small analytically solvable models for tests."""

import math

from oneatomlaser.hilbert import HilbertSpace, Operator, atomic_factor, fock_destroy, fock_factor
from oneatomlaser.model import CollapseChannel, HamiltonianTerm, ModelSpec


def driven_cavity(kappa=1.0, eps=0.5, delta=0.0, N=20):
    """Coherently driven empty cavity: ``H = delta a^dag a + eps (a + a^dag)``, decay ``sqrt(2 kappa) a``.

    The steady state is the coherent state with ``alpha = -i eps / (kappa + i delta)``.
    """
    a = fock_destroy(N)
    n = a.dag() @ a
    H = delta * n + eps * (a + a.dag())
    obs = {"a": a, "n": n, "n2": n @ n, "adag2a2": a.dag() @ a.dag() @ a @ a}
    return ModelSpec(name="driven_cavity", space=a.space, hamiltonian_terms=[HamiltonianTerm(H)],
                     collapse=[CollapseChannel("cavity", math.sqrt(2 * kappa) * a, cavity=True)],
                     observables=obs)


def driven_cavity_alpha(kappa=1.0, eps=0.5, delta=0.0):
    return -1j * eps / (kappa + 1j * delta)


def random_model(rng, d=6, n_channels=3):
    """Random Hamiltonian and collapse operators on an unstructured space."""
    space = HilbertSpace((atomic_factor(range(d), name="s"),))
    h = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    H = Operator(space, h + h.conj().T)
    cs = [CollapseChannel(f"c{k}", Operator(space, rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))))
          for k in range(n_channels)]
    return ModelSpec(name="random", space=space, hamiltonian_terms=[HamiltonianTerm(H)], collapse=cs)


def decaying_cavity(kappa=1.0, N=1):
    a = fock_destroy(N)
    space = HilbertSpace((fock_factor(N),))
    return ModelSpec(name="empty", space=space, hamiltonian_terms=[],
                     collapse=[CollapseChannel("cavity", math.sqrt(2 * kappa) * a, cavity=True)],
                     observables={"a": a, "n": a.dag() @ a})



def thermal_cavity(kappa=1.0, n_th=0.3, delta=0.0, N=25):
    """Cavity coupled to a thermal bath: ``<a^dag(0) a(tau)> = n_th exp(-(kappa + i delta) tau)``."""
    a = fock_destroy(N)
    n = a.dag() @ a
    obs = {"a": a, "n": n, "n2": n @ n, "adag2a2": a.dag() @ a.dag() @ a @ a}
    return ModelSpec(name="thermal_cavity", space=a.space, hamiltonian_terms=[HamiltonianTerm(delta * n)],
                     collapse=[CollapseChannel("cavity", math.sqrt(2 * kappa * (n_th + 1)) * a, cavity=True),
                               CollapseChannel("bath", math.sqrt(2 * kappa * n_th) * a.dag())],
                     observables=obs)
