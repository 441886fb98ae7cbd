"""Open-loop Crank-Nicolson integrator for the Bloch equations.

This is the reference solver the circuit engine is checked against. It knows
nothing about circuits: the detuning is prescribed on a uniform time grid and
the state is marched with

    (I - dt/2 A_{n+1}) s_{n+1} = (I + dt/2 A_n) s_n + dt/2 (b_n + b_{n+1}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantum import AffineGenerator, DqdParams, SebParams, dqd_generator, seb_generator


@dataclass(frozen=True)
class DriveWaveform:
    """Detuning samples eps(t_k), t_k = t0 + k*dt, in Hz."""

    eps: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float)
        if eps.ndim != 1 or eps.size < 2:
            raise ValueError("drive needs at least two samples")
        if not self.dt > 0.0:
            raise ValueError("sample interval must be positive")
        object.__setattr__(self, "eps", eps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.eps.size)

    @classmethod
    def from_function(cls, func, t_stop: float, dt: float, t0: float = 0.0):
        n = int(round((t_stop - t0) / dt)) + 1
        return cls(func(t0 + dt * np.arange(n)), dt, t0)


def generator_for(model):
    if isinstance(model, SebParams):
        return lambda eps: seb_generator(eps, model)
    if isinstance(model, DqdParams):
        return lambda eps: dqd_generator(eps, model)
    raise TypeError(f"no generator for model {type(model).__name__}")


def cn_step(s, gen_n: AffineGenerator, gen_np1: AffineGenerator, dt: float) -> np.ndarray:
    """One Crank-Nicolson step with generators taken at both interval ends."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    eye = np.eye(3)
    lhs = eye - 0.5 * dt * gen_np1.A
    rhs = (eye + 0.5 * dt * gen_n.A) @ np.asarray(s, dtype=float)
    rhs += 0.5 * dt * (gen_n.b + gen_np1.b)
    return np.linalg.solve(lhs, rhs)


def cn_evolve(s0, drive: DriveWaveform, model) -> np.ndarray:
    """March ``s0`` along ``drive``; returns an (n_samples, 3) Bloch series.

    The per-step affine maps are built in one batch, then applied in order.
    """
    gen = generator_for(model)(drive.eps)
    dt = drive.dt
    eye = np.eye(3)
    lhs = eye - 0.5 * dt * gen.A[1:]
    prop = np.linalg.solve(lhs, eye + 0.5 * dt * gen.A[:-1])
    shift = np.linalg.solve(lhs, (0.5 * dt * (gen.b[:-1] + gen.b[1:]))[..., None])[..., 0]

    out = np.empty((drive.eps.size, 3))
    s = np.asarray(s0, dtype=float).copy()
    out[0] = s
    for k in range(prop.shape[0]):
        s = prop[k] @ s + shift[k]
        out[k + 1] = s
    return out
