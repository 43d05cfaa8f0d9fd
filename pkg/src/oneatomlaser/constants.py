"""Physical constants and unit conversions.

All rates and detunings inside the package are angular frequencies in
rad/us; times are in us.  Values quoted as ``2*pi x MHz`` are converted once,
here, by :func:`mhz`.
"""

import math

TWO_PI = 2.0 * math.pi


def mhz(value):
    """Convert a frequency in MHz (cycles/us) to an angular rate in rad/us."""
    return TWO_PI * value


def to_mhz(rate):
    """Convert an angular rate in rad/us back to MHz."""
    return rate / TWO_PI


# Cs D2 reference values (rates in rad/us)
CS_GAMMA = mhz(2.6)          # atomic amplitude decay; lifetime 1/(2 gamma) = 30.6 ns
CS_KAPPA = mhz(4.2)          # cavity field decay
CS_G43 = mhz(16.0)           # coupling on F'=3' -> F=4
CS_BRANCHING = (3 / 4, 1 / 4, 7 / 12, 5 / 12)  # (gamma33, gamma43, gamma44, gamma34) / gamma

CS_WAVELENGTH_UM = 0.8523    # D2 wavelength in um
CS_EXCITED_HFS = mhz(201.3)  # 6P3/2 F'=4' minus F'=3' splitting

# Bohr magneton in MHz per Gauss (h = 1).  Single conversion point for B fields.
BOHR_MAGNETON_MHZ_PER_G = 1.39962449361

# hyperfine Lande factors, nuclear term neglected
CS_G_FACTORS = {
    ("g", 3): -1.0 / 4.0,
    ("g", 4): 1.0 / 4.0,
    ("e", 3): 0.0,
    ("e", 4): 4.0 / 15.0,
}

# actual cavity length in the experiment (um)
L0_UM = 42.2


def intensity_to_rabi(intensity, gamma=CS_GAMMA):
    """Rabi frequency for a normalized intensity ``I = (Omega / 2 gamma)**2``."""
    if intensity < 0:
        raise ValueError(f"intensity must be nonnegative, got {intensity}")
    return 2.0 * gamma * math.sqrt(intensity)


def rabi_to_intensity(omega, gamma=CS_GAMMA):
    return (omega / (2.0 * gamma)) ** 2
