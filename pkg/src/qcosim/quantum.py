"""Two-level quantum-dot device models in real Bloch form.

A density matrix rho = (I + x sx + y sy + z sz)/2 is carried as the Bloch
vector s = (x, y, z). For a Liouvillian that depends on the detuning eps,
the master equation becomes the affine system

    ds/dt = A(eps) s + b(eps)

with A in 1/s. Hamiltonians are written in frequency units (H/h, Hz) and
tunnel or relaxation rates are quoted in Hz; the factor 2*pi that turns them
into angular rates is applied here and nowhere else.

Basis conventions
-----------------
Single-electron box: state 1 is the occupied dot, state 2 the empty dot, so
z = P_occ - P_empty and the tunnel-in jump operator is |1><2|.

Double quantum dot: state k holds the electron in dot k. The detuning is
eps = E_2 - E_1, so the charge-basis Hamiltonian is (-eps sz + 2 t_c sx)/2.

Terminal currents
-----------------
Every device reports charge rows K (one 3-vector per terminal) such that the
current flowing from the node into terminal l is ``e * K[l] @ ds/dt``. The
rows follow from the lever arms: the terminal charge moves with the
population of the configuration whose energy rises with the terminal
voltage, which is what keeps both models passive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import E_OVER_H, KB_OVER_H
from .specfun import bose_einstein, broadened_fermi

TWO_PI = 2.0 * math.pi

SIGMA = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)

# d rho_11 / d s for rho_11 = (1 + z)/2
_DP1_DS = np.array([0.0, 0.0, 0.5])


@dataclass(frozen=True)
class BlochState:
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, s) -> "BlochState":
        x, y, z = (float(v) for v in s)
        return cls(x, y, z)

    @classmethod
    def from_density_matrix(cls, rho) -> "BlochState":
        rho = np.asarray(rho, dtype=complex)
        return cls(*(float(np.real(np.trace(rho @ SIGMA[k]))) for k in (1, 2, 3)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def density_matrix(self) -> np.ndarray:
        return 0.5 * (SIGMA[0] + self.x * SIGMA[1] + self.y * SIGMA[2] + self.z * SIGMA[3])

    @property
    def length(self) -> float:
        return math.sqrt(self.x**2 + self.y**2 + self.z**2)

    def is_physical(self, tol: float = 1e-9) -> bool:
        return self.length <= 1.0 + tol


@dataclass(frozen=True)
class AffineGenerator:
    """Bloch-form Liouvillian: ds/dt = A s + b (rates in 1/s).

    ``A`` may carry leading batch dimensions, in which case ``b`` carries the
    same ones.
    """

    A: np.ndarray
    b: np.ndarray

    def rate(self, s) -> np.ndarray:
        return self.A @ np.asarray(s) + self.b

    def fixed_point(self) -> np.ndarray:
        return -np.linalg.solve(self.A, self.b[..., None])[..., 0]

    def __getitem__(self, idx) -> "AffineGenerator":
        return AffineGenerator(self.A[idx], self.b[idx])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SebParams:
    """Single-electron box: lever arms, total tunnel rate (Hz), temperature (K)."""

    alpha_G: float
    alpha_R: float
    Gamma: float
    T: float

    def __post_init__(self):
        for name in ("alpha_G", "alpha_R"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if not self.Gamma > 0.0:
            raise ValueError(f"Gamma must be positive, got {self.Gamma}")
        if not self.T > 0.0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def kT(self) -> float:
        return KB_OVER_H * self.T


@dataclass(frozen=True)
class DqdParams:
    """Double quantum dot charge qubit.

    ``alpha[k][l]`` is the lever arm of gate l on dot k. Rates are in Hz,
    ``T`` in kelvin.
    """

    alpha: tuple
    t_c: float
    Gamma_cr: float
    Gamma_phi: float
    T: float

    def __post_init__(self):
        alpha = tuple(tuple(float(a) for a in row) for row in self.alpha)
        if len(alpha) != 2 or any(len(row) != 2 for row in alpha):
            raise ValueError("alpha must be a 2x2 lever-arm matrix")
        object.__setattr__(self, "alpha", alpha)
        if not self.t_c > 0.0:
            raise ValueError(f"t_c must be positive, got {self.t_c}")
        if self.Gamma_cr < 0.0 or self.Gamma_phi < 0.0:
            raise ValueError("relaxation and dephasing rates must be non-negative")
        if not self.T > 0.0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def kT(self) -> float:
        return KB_OVER_H * self.T

    @property
    def detuning_lever_arms(self) -> tuple:
        """Signed (alpha_G1, alpha_G2) with eps = (e/h) sum_l alpha_Gl V_l."""
        (a11, a12), (a21, a22) = self.alpha
        return (a11 - a21, a12 - a22)


# ---------------------------------------------------------------------------
# Detuning
# ---------------------------------------------------------------------------


def detuning_seb(V_G, V_R, p: SebParams):
    """Dot level relative to the reservoir Fermi level, in Hz."""
    return E_OVER_H * (p.alpha_G * V_G - (1.0 - p.alpha_R) * V_R)


def detuning_dqd(V_G1, V_G2, p: DqdParams):
    """DQD detuning E_2 - E_1 in Hz from the two gate voltages."""
    a1, a2 = p.detuning_lever_arms
    return E_OVER_H * (a1 * V_G1 + a2 * V_G2)


# ---------------------------------------------------------------------------
# Generic Lindblad -> Bloch conversion
# ---------------------------------------------------------------------------


def lindblad_superoperator(H, jumps):
    """Return rho -> L(rho) in 1/s for H/h (Hz) and [(rate_Hz, L), ...]."""
    H = np.asarray(H, dtype=complex)
    ops = [(float(rate), np.asarray(L, dtype=complex)) for rate, L in jumps]

    def apply(rho):
        out = -1j * (H @ rho - rho @ H)
        for rate, L in ops:
            LdL = L.conj().T @ L
            out = out + rate * (L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL))
        return TWO_PI * out

    return apply


def lindblad_to_bloch(H, jumps) -> AffineGenerator:
    """Project a two-level Lindblad generator onto the Pauli basis."""
    L = lindblad_superoperator(H, jumps)
    A = np.empty((3, 3))
    for j in range(3):
        image = L(SIGMA[j + 1])
        for i in range(3):
            A[i, j] = 0.5 * np.real(np.trace(SIGMA[i + 1] @ image))
    image = L(SIGMA[0])
    b = np.array([0.5 * np.real(np.trace(SIGMA[i + 1] @ image)) for i in range(3)])
    return AffineGenerator(A, b)


# ---------------------------------------------------------------------------
# Single-electron box
# ---------------------------------------------------------------------------


def seb_generator(eps, p: SebParams) -> AffineGenerator:
    """Bloch generator of the single-electron box at detuning ``eps`` (Hz).

    Tunnelling in at Gamma*F and out at Gamma*(1 - F) drives
    dP_occ/dt = 2 pi Gamma (F - P_occ). The diagonal Hamiltonian only makes
    the (never driven) coherences precess while they decay.
    """
    F = np.asarray(broadened_fermi(eps, p.Gamma, p.kT))
    eps = np.asarray(eps, dtype=float)
    rate = TWO_PI * p.Gamma
    A = np.zeros(F.shape + (3, 3))
    A[..., 0, 0] = A[..., 1, 1] = -0.5 * rate
    A[..., 2, 2] = -rate
    A[..., 0, 1] = TWO_PI * eps
    A[..., 1, 0] = -TWO_PI * eps
    b = np.zeros(F.shape + (3,))
    b[..., 2] = rate * (2.0 * F - 1.0)
    return AffineGenerator(A, b)


def seb_jump_operators(eps, p: SebParams):
    """Charge-basis Hamiltonian (Hz) and tunnel jump operators of the SEB."""
    F = broadened_fermi(eps, p.Gamma, p.kT)
    H = 0.5 * np.array([[-eps, 0.0], [0.0, eps]], dtype=complex)
    L_in = np.array([[0, 1], [0, 0]], dtype=complex)
    L_out = np.array([[0, 0], [1, 0]], dtype=complex)
    return H, [(p.Gamma * F, L_in), (p.Gamma * (1.0 - F), L_out)]


# ---------------------------------------------------------------------------
# Double quantum dot
# ---------------------------------------------------------------------------


def dqd_eigen(eps, t_c):
    """Energy splitting (Hz) and mixing angle of the DQD Hamiltonian.

    The instantaneous eigenbasis is U = [[cos(theta/2), -sin(theta/2)],
    [sin(theta/2), cos(theta/2)]]; its first column is the excited state.
    """
    deltaE = np.hypot(eps, 2.0 * t_c)
    theta = np.arctan2(2.0 * t_c, -np.asarray(eps, dtype=float))
    return deltaE[()], theta[()]


def eigenbasis(theta) -> np.ndarray:
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -s], [s, c]])


def dqd_rates(deltaE, p: DqdParams):
    """(Gamma_up, Gamma_down) in Hz at energy splitting ``deltaE``."""
    n = bose_einstein(deltaE, p.kT)
    return p.Gamma_cr * n, p.Gamma_cr * (n + 1.0)


def dqd_generator(eps, p: DqdParams) -> AffineGenerator:
    """Lab-frame Bloch generator of the charge qubit.

    Precession about the instantaneous field axis at 2 pi DeltaE, with
    relaxation (Gamma_up, Gamma_down) and pure dephasing defined in the
    instantaneous eigenbasis. Written in closed form: longitudinal decay
    2 pi Gamma_cr (2n + 1) along the axis, transverse decay
    2 pi (Gamma_cr (n + 1/2) + Gamma_phi) across it, and a pump
    b = -2 pi Gamma_cr * axis toward the ground state.
    """
    eps = np.asarray(eps, dtype=float)
    deltaE = np.hypot(eps, 2.0 * p.t_c)
    n = bose_einstein(deltaE, p.kT)
    axis = np.stack(
        [2.0 * p.t_c / deltaE, np.zeros_like(deltaE), -eps / deltaE], axis=-1
    )
    gamma_long = TWO_PI * p.Gamma_cr * (2.0 * n + 1.0)
    gamma_tran = TWO_PI * (p.Gamma_cr * (n + 0.5) + p.Gamma_phi)
    omega = (TWO_PI * deltaE)[..., None] * axis
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = np.zeros_like(wx)
    cross = np.stack(
        [
            np.stack([zero, -wz, wy], axis=-1),
            np.stack([wz, zero, -wx], axis=-1),
            np.stack([-wy, wx, zero], axis=-1),
        ],
        axis=-2,
    )
    proj = axis[..., :, None] * axis[..., None, :]
    eye = np.eye(3)
    A = (
        cross
        - gamma_tran[..., None, None] * (eye - proj)
        - gamma_long[..., None, None] * proj
    )
    b = -TWO_PI * p.Gamma_cr * axis
    return AffineGenerator(A, b)


def dqd_jump_operators(eps, p: DqdParams):
    """Lab-frame Hamiltonian (Hz) and jump operators rotated from the eigenbasis."""
    deltaE, theta = dqd_eigen(eps, p.t_c)
    U = eigenbasis(theta)
    up, down = dqd_rates(deltaE, p)
    primed = [
        (up, np.array([[0, 1], [0, 0]], dtype=complex)),
        (down, np.array([[0, 0], [1, 0]], dtype=complex)),
        (p.Gamma_phi, np.array([[1, 0], [0, -1]], dtype=complex) / math.sqrt(2.0)),
    ]
    H = 0.5 * np.array([[-eps, 2.0 * p.t_c], [2.0 * p.t_c, eps]], dtype=complex)
    return H, [(rate, U @ L @ U.T) for rate, L in primed]


def dqd_generator_from_jumps(eps, p: DqdParams) -> AffineGenerator:
    """Same generator as :func:`dqd_generator`, assembled from jump operators."""
    H, jumps = dqd_jump_operators(eps, p)
    return lindblad_to_bloch(H, jumps)


# ---------------------------------------------------------------------------
# Device models seen by the circuit engine
# ---------------------------------------------------------------------------


def _fd_step(eps: float) -> float:
    return max(1e-6 * abs(eps), 1e3)


@dataclass(frozen=True)
class QuantumContribution:
    epsilon: float
    generator: AffineGenerator
    charge_rows: np.ndarray


class QuantumDevice:
    """Base class for two-level devices with voltage-controlled detuning.

    Subclasses provide ``terminals``, ``eps_gradient`` (Hz/V per terminal),
    ``charge_rows`` and ``generator``.
    """

    name: str
    terminals: tuple
    eps_gradient: np.ndarray
    charge_rows: np.ndarray

    n_states = 3

    def detuning(self, voltages) -> float:
        return float(self.eps_gradient @ np.asarray(voltages, dtype=float))

    def generator(self, eps) -> AffineGenerator:
        raise NotImplementedError

    def linearize(self, eps: float):
        """A, b and their central finite-difference eps-derivatives."""
        h = _fd_step(eps)
        gen = self.generator(np.array([eps, eps + h, eps - h]))
        A, b = gen.A, gen.b
        return A[0], b[0], (A[1] - A[2]) / (2.0 * h), (b[1] - b[2]) / (2.0 * h)

    @property
    def ground_row(self) -> np.ndarray:
        """Charge row of the implicit stray coupling to ground."""
        return -self.charge_rows.sum(axis=0)

    def occupation(self, s) -> np.ndarray:
        """rho_11: occupied-dot probability (SEB) or dot-1 probability (DQD)."""
        return 0.5 * (1.0 + np.asarray(s)[..., 2])

    def fixed_point(self, eps) -> np.ndarray:
        return self.generator(eps).fixed_point()


@dataclass
class SebDevice(QuantumDevice):
    name: str
    gate: str
    reservoir: str
    params: SebParams
    terminals: tuple = field(init=False)
    eps_gradient: np.ndarray = field(init=False, repr=False)
    charge_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.params
        self.terminals = (self.gate, self.reservoir)
        self.eps_gradient = E_OVER_H * np.array([p.alpha_G, -(1.0 - p.alpha_R)])
        # occupancy falls as eps rises, so the gate row carries -alpha_G
        self.charge_rows = np.outer([-p.alpha_G, 1.0 - p.alpha_R], _DP1_DS)

    def generator(self, eps) -> AffineGenerator:
        return seb_generator(eps, self.params)

    def linearize(self, eps: float):
        # A is linear in eps (precession only); the pump needs a finite difference
        h = _fd_step(eps)
        gen = seb_generator(eps, self.params)
        rate = TWO_PI * self.params.Gamma
        kT = self.params.kT
        dF = (
            broadened_fermi(eps + h, self.params.Gamma, kT)
            - broadened_fermi(eps - h, self.params.Gamma, kT)
        ) / (2.0 * h)
        dA = np.zeros((3, 3))
        dA[0, 1], dA[1, 0] = TWO_PI, -TWO_PI
        return gen.A, gen.b, dA, np.array([0.0, 0.0, 2.0 * rate * dF])


@dataclass
class DqdDevice(QuantumDevice):
    name: str
    gate1: str
    gate2: str
    params: DqdParams
    terminals: tuple = field(init=False)
    eps_gradient: np.ndarray = field(init=False, repr=False)
    charge_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a1, a2 = self.params.detuning_lever_arms
        self.terminals = (self.gate1, self.gate2)
        self.eps_gradient = E_OVER_H * np.array([a1, a2])
        # I_l = e sum_k alpha_kl d rho_kk/dt with rho_22 = 1 - rho_11
        self.charge_rows = np.outer([a1, a2], _DP1_DS)

    def generator(self, eps) -> AffineGenerator:
        return dqd_generator(eps, self.params)


def quantum_contribution(device: QuantumDevice, terminal_voltages) -> QuantumContribution:
    """Detuning, generator and terminal charge rows at the given voltages."""
    eps = device.detuning(terminal_voltages)
    return QuantumContribution(eps, device.generator(eps), device.charge_rows)
