"""Physical constants and ion species.

All values are CODATA 2018, pinned to 10 significant digits so that every
derived number in this package is bit-reproducible regardless of the
installed scipy version.
"""

from __future__ import annotations

import math

ELEMENTARY_CHARGE = 1.602176634e-19  # C (exact)
HBAR = 1.054571817e-34  # J s
EPSILON_0 = 8.854187813e-12  # F/m
ATOMIC_MASS = 1.660539067e-27  # kg
ELECTRON_MASS_U = 5.485799091e-4  # u

TWO_PI = 2.0 * math.pi

UM = 1e-6
MHZ = 1e6

# neutral isotope masses in u
_ISOTOPE_MASS_U = {
    "111Cd": 110.9041838,
    "25Mg": 24.98583696,
    "88Sr": 87.90561226,
    "40Ca": 39.96259086,
    "9Be": 9.012183066,
    "171Yb": 170.9363302,
}


def ion_mass_u(isotope: str, charge: int = 1) -> float:
    """Mass of the ion in u, neutral isotope mass minus stripped electrons."""
    return _ISOTOPE_MASS_U[isotope] - charge * ELECTRON_MASS_U


def known_isotopes() -> list[str]:
    return sorted(_ISOTOPE_MASS_U)
