"""Special functions for the tunnel-rate and phonon-occupation formulas.

All energies are frequencies (E/h in Hz) and temperatures enter as k_B T/h,
so every argument below shares one unit.
"""

from __future__ import annotations

import cmath
import math

import numpy as np
from scipy.special import expit

Energy = float  # E/h in Hz

# B_2k / 2k for k = 1..8
_BERNOULLI_TERMS = (
    1.0 / 6.0 / 2.0,
    -1.0 / 30.0 / 4.0,
    1.0 / 42.0 / 6.0,
    -1.0 / 30.0 / 8.0,
    5.0 / 66.0 / 10.0,
    -691.0 / 2730.0 / 12.0,
    7.0 / 6.0 / 14.0,
    -3617.0 / 510.0 / 16.0,
)
_ASYMPTOTIC_RADIUS = 12.0


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


def _asymptotic(z):
    # ln z - 1/(2z) - sum_k B_2k / (2k z^2k), Horner in 1/z^2
    inv2 = 1.0 / (z * z)
    series = 0.0
    for coeff in reversed(_BERNOULLI_TERMS):
        series = (series + coeff) * inv2
    if isinstance(z, complex):
        return cmath.log(z) - 0.5 / z - series
    return np.log(z) - 0.5 / z - series


def _is_pole(z: complex) -> bool:
    return z.imag == 0.0 and z.real <= 0.0 and z.real == math.floor(z.real)


def _digamma_scalar(z: complex) -> complex:
    if _is_pole(z):
        raise DomainError(f"digamma has a pole at z = {z.real:g}")
    if z.real < 0.0:
        return _digamma_scalar(1.0 - z) - math.pi / cmath.tan(math.pi * z)
    shift = 0.0j
    while abs(z) < _ASYMPTOTIC_RADIUS:
        shift -= 1.0 / z
        z += 1.0
    return _asymptotic(z) + shift


def _digamma_array(z: np.ndarray) -> np.ndarray:
    poles = (z.imag == 0.0) & (z.real <= 0.0) & (z.real == np.floor(z.real))
    if np.any(poles):
        raise DomainError("digamma has a pole at a non-positive integer")
    reflect = z.real < 0.0
    w = np.where(reflect, 1.0 - z, z)
    shift = np.zeros_like(w)
    small = np.abs(w) < _ASYMPTOTIC_RADIUS
    while np.any(small):
        shift[small] -= 1.0 / w[small]
        w[small] += 1.0
        small = np.abs(w) < _ASYMPTOTIC_RADIUS
    out = _asymptotic(w) + shift
    if np.any(reflect):
        out[reflect] -= np.pi / np.tan(np.pi * z[reflect])
    return out


def digamma(z):
    """Digamma function psi_0(z) for complex (or real) argument.

    Shifts ``z`` upward with psi(z) = psi(z + 1) - 1/z until |z| >= 12,
    then sums the Stirling-type asymptotic series with eight Bernoulli
    terms. Arguments with negative real part go through the reflection
    formula first.

    Parameters
    ----------
    z : complex or array_like of complex

    Returns
    -------
    complex or ndarray of complex

    Raises
    ------
    DomainError
        If any argument is a non-positive integer.
    """
    if np.ndim(z) == 0:
        return _digamma_scalar(complex(z))
    return _digamma_array(np.array(z, dtype=complex))


def _check_temperature(kT):
    if np.any(np.asarray(kT) <= 0.0):
        raise DomainError("thermal energy kT must be positive")


def fermi(eps, kT):
    """Fermi-Dirac occupation 1/(1 + exp(eps/kT)); overflow-safe."""
    _check_temperature(kT)
    return expit(-np.asarray(eps, dtype=float) / kT)[()]


def broadened_fermi(eps, gamma, kT):
    """Fermi function convolved with a Lorentzian level of half-width gamma/2.

    F(eps) = 1/2 - Im psi_0(1/2 + (gamma/2 + i eps) / (2 pi kT)) / pi

    Parameters
    ----------
    eps : float or array_like
        Level detuning from the reservoir Fermi level (Hz).
    gamma : float
        Total tunnel rate (Hz); the level's Lorentzian HWHM is gamma/2.
    kT : float
        Thermal energy k_B T/h (Hz).
    """
    _check_temperature(kT)
    if np.any(np.asarray(gamma) < 0.0):
        raise DomainError("tunnel rate must be non-negative")
    scale = 1.0 / (2.0 * math.pi * kT)
    if np.ndim(eps) == 0 and np.ndim(gamma) == 0 and np.ndim(kT) == 0:
        z = complex(0.5 + 0.5 * gamma * scale, eps * scale)
        return 0.5 - _digamma_scalar(z).imag / math.pi
    z = 0.5 + (0.5 * np.asarray(gamma) + 1j * np.asarray(eps)) * scale
    return 0.5 - _digamma_array(np.array(z, dtype=complex)).imag / np.pi


def bose_einstein(deltaE, kT):
    """Bose-Einstein occupation 1/(exp(deltaE/kT) - 1) of a mode at deltaE."""
    _check_temperature(kT)
    if np.any(np.asarray(deltaE) <= 0.0):
        raise DomainError("mode energy must be positive")
    x = np.asarray(deltaE, dtype=float) / kT
    with np.errstate(over="ignore"):
        return (1.0 / np.expm1(x))[()]
