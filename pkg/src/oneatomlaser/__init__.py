"""Single-atom laser in cavity QED: four-state and Zeeman-resolved models.

Master-equation steady states, factorized semiclassical equations, two-time
correlations and quantum-trajectory simulations of one atom driven into
lasing inside an optical cavity.
"""

from .constants import mhz, to_mhz
from .fourstate import (FourStateParams, build_four_state, build_raman_variant,
                        critical_numbers, scale_cavity)
from .steady import liouvillian, observables, solve_steady, steady_state

__version__ = "0.1.0"
