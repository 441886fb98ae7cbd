"""Physical constants (SI, exact 2019 values).

Energies are carried in frequency units throughout the package (E/h, in Hz),
so only the two conversion ratios below enter the physics.
"""

E_CHARGE = 1.602176634e-19  # C
H_PLANCK = 6.62607015e-34  # J s
K_BOLTZMANN = 1.380649e-23  # J/K

E_OVER_H = E_CHARGE / H_PLANCK  # Hz/V, 2.417989242e14
KB_OVER_H = K_BOLTZMANN / H_PLANCK  # Hz/K, 2.0836619123e10

# conductance quantum-like scale e^2/h, convenient for admittance checks
E2_OVER_H = E_CHARGE * E_OVER_H  # S


def thermal_energy(temperature):
    """k_B T / h in Hz for a temperature in kelvin."""
    return KB_OVER_H * temperature
