"""Coupled network + Bloch-equation solver.

Unknowns are ordered as node voltages (ground excluded), branch currents of
voltage sources and inductors, then three Bloch components per quantum
device. The system is written as

    F(u, t) = G u + f(u) + Q du/dt - rhs(t) = 0

where G and Q hold the linear stamps, f(u) = -(A(eps) s + b(eps)) on the
Bloch rows is the only nonlinearity, and the terminal currents of a quantum
device enter the node rows through Q as e * K_l @ ds/dt. Classical and
quantum unknowns therefore share one Jacobian and one Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .circuit import GROUND, Circuit
from .constants import E_CHARGE

log = logging.getLogger(__name__)

GMIN = 1e-12  # S, conductance to ground added only when the DC matrix is singular


class SimulationError(RuntimeError):
    """Numerical failure: singular system or Newton breakdown."""


class TopologyError(SimulationError):
    pass


class ConvergenceError(SimulationError):
    pass


@dataclass(frozen=True)
class JacobianLayout:
    """Index ranges of the four Jacobian blocks and the structural pattern.

    ``network`` covers node voltages and branch currents, ``quantum`` the
    Bloch components. ``pattern`` is constant across time steps.
    """

    network: slice
    quantum: slice
    pattern: np.ndarray = field(repr=False)

    def block(self, name: str) -> np.ndarray:
        rows, cols = {
            "network/network": (self.network, self.network),
            "network/quantum": (self.network, self.quantum),
            "quantum/network": (self.quantum, self.network),
            "quantum/quantum": (self.quantum, self.quantum),
        }[name]
        return self.pattern[rows, cols]


@dataclass
class _DeviceSlot:
    device: object
    states: slice
    terminals: tuple  # unknown index per terminal, -1 for ground
    grad: np.ndarray


class MnaSystem:
    """Dense MNA assembly for a :class:`Circuit`.

    Parameters
    ----------
    circuit : Circuit
    gmin : float
        Conductance from every node to ground (DC fallback only).
    """

    def __init__(self, circuit: Circuit, gmin: float = 0.0):
        self.circuit = circuit
        nodes = [n for n in circuit.nodes if n != GROUND]
        self._node_idx = {n: i for i, n in enumerate(nodes)}
        labels = [f"{n}.v" for n in nodes]
        kinds = ["v"] * len(nodes)
        self._branch_idx = {}
        for el in circuit.elements:
            if el.kind in ("v", "l"):
                self._branch_idx[el.name] = len(labels)
                labels.append(f"{el.name}.i")
                kinds.append("i")
        self.n_network = len(labels)
        self.slots = []
        for dev in circuit.devices:
            start = len(labels)
            labels.extend(f"{dev.name}.{c}" for c in "xyz")
            kinds.extend("sss")
            self.slots.append(
                _DeviceSlot(
                    dev,
                    slice(start, start + 3),
                    tuple(self.node_index(t) for t in dev.terminals),
                    np.asarray(dev.eps_gradient, dtype=float),
                )
            )
        self.labels = labels
        self.kinds = np.array(kinds)
        n = self.n = len(labels)
        self.G = np.zeros((n, n))
        self.Q = np.zeros((n, n))
        self._sources = []
        self._stamp_linear(gmin)
        self.dynamic = np.any(self.Q != 0.0, axis=0)
        self.is_linear = not self.slots

    # -- indexing ---------------------------------------------------------

    def node_index(self, name: str) -> int:
        if name == GROUND:
            return -1
        return self._node_idx[name]

    def branch_index(self, name: str) -> int:
        return self._branch_idx[name]

    def slot(self, name: str) -> _DeviceSlot:
        for slot in self.slots:
            if slot.device.name == name:
                return slot
        raise KeyError(name)

    def abstol(self, options) -> np.ndarray:
        table = {"v": options.abstol_v, "i": options.abstol_i, "s": options.abstol_s}
        return np.array([table[k] for k in self.kinds])

    # -- stamps -----------------------------------------------------------

    def _add(self, M, i, j, value):
        if i >= 0 and j >= 0:
            M[i, j] += value

    def _stamp_two(self, M, a, b, value):
        self._add(M, a, a, value)
        self._add(M, b, b, value)
        self._add(M, a, b, -value)
        self._add(M, b, a, -value)

    def _stamp_linear(self, gmin):
        G, Q = self.G, self.Q
        for i in range(len(self._node_idx)):
            G[i, i] += gmin
        for el in self.circuit.elements:
            a, b = (self.node_index(n) for n in el.nodes)
            if el.kind == "r":
                self._stamp_two(G, a, b, 1.0 / el.value)
            elif el.kind == "c":
                self._stamp_two(Q, a, b, el.value)
            elif el.kind in ("l", "v"):
                k = self._branch_idx[el.name]
                self._add(G, a, k, 1.0)
                self._add(G, b, k, -1.0)
                self._add(G, k, a, 1.0)
                self._add(G, k, b, -1.0)
                if el.kind == "l":
                    Q[k, k] -= el.value
                else:
                    self._sources.append((k, 1.0, el.waveform))
            elif el.kind == "i":
                if a >= 0:
                    self._sources.append((a, -1.0, el.waveform))
                if b >= 0:
                    self._sources.append((b, 1.0, el.waveform))
        for slot in self.slots:
            Q[slot.states, slot.states] += np.eye(3)
            for term, row in zip(slot.terminals, slot.device.charge_rows):
                if term >= 0:
                    Q[term, slot.states] += E_CHARGE * row

    def rhs(self, t: float, scale: float = 1.0) -> np.ndarray:
        out = np.zeros(self.n)
        for row, sign, wave in self._sources:
            out[row] += sign * scale * float(wave(t))
        return out

    def rhs_dc(self, scale: float = 1.0) -> np.ndarray:
        out = np.zeros(self.n)
        for row, sign, wave in self._sources:
            out[row] += sign * scale * wave.at_zero()
        return out

    # -- quantum part -----------------------------------------------------

    def terminal_voltages(self, u, slot: _DeviceSlot) -> np.ndarray:
        return np.array([u[t] if t >= 0 else 0.0 for t in slot.terminals])

    def detuning(self, u, slot: _DeviceSlot) -> float:
        return float(slot.grad @ self.terminal_voltages(u, slot))

    def stamp_quantum(self, u, f: np.ndarray, J: np.ndarray):
        """Add -(A s + b) to ``f`` and its derivatives to ``J`` for every device."""
        for slot in self.slots:
            eps = self.detuning(u, slot)
            A, b, dA, db = slot.device.linearize(eps)
            s = u[slot.states]
            f[slot.states] -= A @ s + b
            J[slot.states, slot.states] -= A
            dq = dA @ s + db
            for term, g in zip(slot.terminals, slot.grad):
                if term >= 0:
                    J[slot.states, term] -= dq * g

    def nonlinear(self, u):
        f = np.zeros(self.n)
        J = np.zeros((self.n, self.n))
        self.stamp_quantum(u, f, J)
        return f, J

    def residual(self, u, udot, t: float) -> np.ndarray:
        f, _ = self.nonlinear(u)
        return self.G @ u + f + self.Q @ udot - self.rhs(t)

    def jacobian(self, u, a0: float) -> np.ndarray:
        """dF/du when du/dt is replaced by a0 * u + (terms independent of u)."""
        _, Jf = self.nonlinear(u)
        return self.G + Jf + a0 * self.Q

    def layout(self) -> JacobianLayout:
        pattern = (self.G != 0) | (self.Q != 0)
        for slot in self.slots:
            pattern[slot.states, slot.states] = True
            for term in slot.terminals:
                if term >= 0:
                    pattern[slot.states, term] = True
        net = slice(0, self.n_network)
        return JacobianLayout(net, slice(self.n_network, self.n), pattern)


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------


def _solve(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Row/column-equilibrated dense solve; raises on singular matrices."""
    row = np.max(np.abs(J), axis=1)
    if np.any(row == 0.0):
        raise np.linalg.LinAlgError("zero row")
    Js = J / row[:, None]
    col = np.max(np.abs(Js), axis=0)
    if np.any(col == 0.0):
        raise np.linalg.LinAlgError("zero column")
    Js = Js / col[None, :]
    x = np.linalg.solve(Js, rhs / row)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution")
    return x / col


def _singular_unknowns(system: MnaSystem, J: np.ndarray) -> list:
    """Labels of unknowns in the near-null space of J, for diagnostics."""
    scale = np.max(np.abs(J), axis=1, keepdims=True)
    scale[scale == 0] = 1.0
    _, sv, vt = np.linalg.svd(J / scale)
    null = np.abs(vt[-1])
    return [system.labels[i] for i in np.argsort(null)[::-1][:3] if null[i] > 1e-3]


# ---------------------------------------------------------------------------
# DC operating point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatingPoint:
    u: np.ndarray
    system: MnaSystem = field(repr=False)
    residual_norm: float = 0.0
    gmin_used: bool = False

    def voltage(self, node: str) -> float:
        i = self.system.node_index(node)
        return 0.0 if i < 0 else float(self.u[i])

    def bloch(self, device: str) -> np.ndarray:
        return self.u[self.system.slot(device).states].copy()

    def detuning(self, device: str) -> float:
        return self.system.detuning(self.u, self.system.slot(device))


def _newton_dc(system: MnaSystem, u0, rhs, opts, max_iter: int = 50):
    u = u0.copy()
    tol_abs = 1e-3 * system.abstol(opts)
    for it in range(max_iter):
        f, Jf = system.nonlinear(u)
        F = system.G @ u + f - rhs
        J = system.G + Jf
        du = _solve(J, -F)
        u = u + du
        if np.all(np.abs(du) <= opts.newton_reltol * np.abs(u) + tol_abs):
            return u, True
        if system.is_linear:
            return u, True
    return u, False


def _dc_attempt(system: MnaSystem, opts):
    u0 = np.zeros(system.n)
    for slot in system.slots:
        u0[slot.states] = slot.device.fixed_point(0.0)
    u, ok = _newton_dc(system, u0, system.rhs_dc(), opts)
    if ok:
        return u
    # source stepping
    log.info("DC Newton failed; trying source stepping")
    u = u0
    scale = 0.0
    step = 0.1
    while scale < 1.0:
        trial = min(1.0, scale + step)
        u_new, ok = _newton_dc(system, u, system.rhs_dc(trial), opts)
        if ok:
            u, scale = u_new, trial
            step = min(step * 2.0, 0.5)
        else:
            step *= 0.5
            if step < 1e-4:
                f, _ = system.nonlinear(u)
                res = system.G @ u + f - system.rhs_dc(scale)
                worst = int(np.argmax(np.abs(res)))
                raise ConvergenceError(
                    f"DC operating point did not converge at source scale {scale:.3g}; "
                    f"largest residual {res[worst]:.3e} in row {system.labels[worst]}"
                )
    return u


def dc_operating_point(circuit: Circuit) -> OperatingPoint:
    """Static solution: capacitors open, inductors shorted, devices at their fixed point.

    Retries with a small conductance to ground on every node when the DC
    matrix is singular (nodes reached only through capacitors).

    Raises
    ------
    TopologyError
        If the system stays singular.
    ConvergenceError
        If Newton fails even with source stepping.
    """
    opts = circuit.options
    for gmin in (0.0, GMIN):
        system = MnaSystem(circuit, gmin=gmin)
        try:
            u = _dc_attempt(system, opts)
        except np.linalg.LinAlgError:
            if gmin == 0.0:
                continue
            J = system.G + system.nonlinear(np.zeros(system.n))[1]
            culprits = _singular_unknowns(system, J)
            raise TopologyError(
                "singular DC system (floating node or source/inductor loop)"
                + (f" involving {', '.join(culprits)}" if culprits else "")
            ) from None
        f, _ = system.nonlinear(u)
        res = system.G @ u + f - system.rhs_dc()
        return OperatingPoint(u, MnaSystem(circuit), float(np.max(np.abs(res))), gmin > 0)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Transient
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeries:
    """Accepted transient steps: state ``u`` and its derivative per time point."""

    t: np.ndarray
    u: np.ndarray
    udot: np.ndarray
    system: MnaSystem = field(repr=False)
    warnings: tuple = ()
    n_rejected: int = 0

    def window(self, t_from: float) -> "TimeSeries":
        keep = self.t >= t_from - 1e-18
        return TimeSeries(self.t[keep], self.u[keep], self.udot[keep], self.system, self.warnings, self.n_rejected)

    def voltage(self, node: str) -> np.ndarray:
        i = self.system.node_index(node)
        return np.zeros_like(self.t) if i < 0 else self.u[:, i].copy()

    def bloch(self, device: str) -> np.ndarray:
        return self.u[:, self.system.slot(device).states].copy()

    def detuning(self, device: str) -> np.ndarray:
        slot = self.system.slot(device)
        volts = np.stack(
            [self.u[:, t] if t >= 0 else np.zeros_like(self.t) for t in slot.terminals], axis=-1
        )
        return volts @ slot.grad

    def terminal_current(self, device: str, terminal: int) -> np.ndarray:
        """Current flowing from the node into device terminal ``terminal`` (0-based)."""
        slot = self.system.slot(device)
        return E_CHARGE * self.udot[:, slot.states] @ slot.device.charge_rows[terminal]

    def element_current(self, name: str) -> np.ndarray:
        """Current through an element from its first node to its second."""
        el = self.system.circuit.element(name)
        a, b = el.nodes
        if el.kind == "r":
            return (self.voltage(a) - self.voltage(b)) / el.value
        if el.kind == "c":
            ia, ib = (self.system.node_index(n) for n in (a, b))
            da = self.udot[:, ia] if ia >= 0 else 0.0
            db = self.udot[:, ib] if ib >= 0 else 0.0
            return el.value * (da - db)
        if el.kind == "i":
            return np.asarray(el.waveform(self.t), dtype=float) * np.ones_like(self.t)
        return self.u[:, self.system.branch_index(name)].copy()

    def quantity(self, target: str) -> np.ndarray:
        """Evaluate a print target such as ``out.v``, ``r1.i`` or ``qseb1.p1``."""
        owner, attr = target.split(".")
        circuit = self.system.circuit
        if owner in circuit.nodes and attr == "v":
            return self.voltage(owner)
        if any(d.name == owner for d in circuit.devices):
            if attr in ("x", "y", "z"):
                return self.bloch(owner)[:, "xyz".index(attr)]
            if attr == "p1":
                return 0.5 * (1.0 + self.bloch(owner)[:, 2])
            if attr == "eps":
                return self.detuning(owner)
            if attr in ("i1", "i2"):
                return self.terminal_current(owner, int(attr[1]) - 1)
        else:
            el = circuit.element(owner)
            if attr == "i":
                return self.element_current(owner)
            if attr == "v":
                return self.voltage(el.nodes[0]) - self.voltage(el.nodes[1])
        raise KeyError(f"unknown transient quantity {target!r}")


def _extrapolate(ts, us, t_new):
    """Polynomial extrapolation through the given (t, u) history to t_new."""
    if len(ts) == 1:
        return us[0].copy()
    if len(ts) == 2:
        w = (t_new - ts[1]) / (ts[1] - ts[0])
        return us[1] + w * (us[1] - us[0])
    t0, t1, t2 = ts
    l0 = (t_new - t1) * (t_new - t2) / ((t0 - t1) * (t0 - t2))
    l1 = (t_new - t0) * (t_new - t2) / ((t1 - t0) * (t1 - t2))
    l2 = (t_new - t0) * (t_new - t1) / ((t2 - t0) * (t2 - t1))
    return l0 * us[0] + l1 * us[1] + l2 * us[2]


def transient(
    circuit: Circuit,
    tstep: float,
    tstop: float,
    tstart: float = 0.0,
    op: OperatingPoint | None = None,
) -> TimeSeries:
    """Integrate the coupled system from the DC operating point to ``tstop``.

    Trapezoidal rule with Backward-Euler steps at the start and after each
    source breakpoint; step size adapted on the local truncation error of
    the dynamic unknowns and bounded to ``[tstep/1000, tstep]``.

    Raises
    ------
    ConvergenceError
        If Newton fails at the minimum step.
    """
    if not (tstep > 0 and tstop > tstart >= 0):
        raise ValueError("need tstep > 0 and tstop > tstart >= 0")
    opts = circuit.options
    if op is None:
        op = dc_operating_point(circuit)
    system = MnaSystem(circuit)
    G, Q, n = system.G, system.Q, system.n
    dyn = system.dynamic
    abstol = system.abstol(opts)
    newton_abs = 1e-3 * abstol
    hmax, hmin = tstep, tstep / 1000.0
    breakpoints = [b for b in circuit.breakpoints(tstop) if 0.0 < b < tstop] + [tstop]
    bp_i = 0

    u = op.u.copy()
    udot = np.zeros(n)
    times = [0.0]
    states = [u.copy()]
    derivs = [udot.copy()]
    hist_t = [0.0]  # history since the last breakpoint, for prediction/LTE
    hist_u = [u.copy()]
    scale_hist = np.abs(u)
    t = 0.0
    h = hmax / 100.0
    warnings = []
    rejected = 0
    lte_floor_warned = False

    while t < tstop * (1.0 - 1e-14):
        next_bp = breakpoints[bp_i]
        h = min(max(h, hmin), hmax)
        hit_bp = False
        if t + h >= next_bp - 0.5 * hmin:
            h = next_bp - t
            hit_bp = True
        elif t + 2.0 * h > next_bp:
            h = 0.5 * (next_bp - t)  # avoid a sliver step before the breakpoint
        use_be = len(hist_t) < 3
        a0 = (1.0 if use_be else 2.0) / h
        beta = 0.0 if use_be else 1.0
        t_new = t + h
        guess = _extrapolate(hist_t[-3:], hist_u[-3:], t_new)
        rhs = system.rhs(t_new)
        hist_term = -a0 * u - beta * udot  # udot_new = a0*u_new + hist_term
        u_new = guess
        converged = False
        try:
            for it in range(opts.max_newton):
                ud = a0 * u_new + hist_term
                if system.is_linear:
                    f = np.zeros(n)
                    Jf = 0.0
                else:
                    f, Jf = system.nonlinear(u_new)
                F = G @ u_new + f + Q @ ud - rhs
                du = _solve(G + Jf + a0 * Q, -F)
                u_new = u_new + du
                if system.is_linear or np.all(
                    np.abs(du) <= opts.newton_reltol * np.abs(u_new) + newton_abs
                ):
                    converged = True
                    break
        except np.linalg.LinAlgError:
            converged = False
        at_floor = h <= hmin * (1 + 1e-9) or (hit_bp and h < 2.0 * hmin)
        if not converged:
            if at_floor:
                f, _ = system.nonlinear(u_new)
                F = G @ u_new + f + Q @ (a0 * u_new + hist_term) - rhs
                worst = int(np.argmax(np.abs(F)))
                raise ConvergenceError(
                    f"Newton failed at t = {t_new:.6e} s with the minimum step; "
                    f"worst residual {F[worst]:.3e} in row {system.labels[worst]}"
                )
            h = max(0.5 * h, hmin)
            rejected += 1
            continue

        # local truncation error on the dynamic unknowns
        ratio = 0.0
        if len(hist_t) >= 2:
            pred_t = hist_t[-3:] if not use_be else hist_t[-2:]
            pred = _extrapolate(pred_t, (hist_u[-3:] if not use_be else hist_u[-2:]), t_new)
            span = np.prod([t_new - tp for tp in pred_t])
            if use_be:
                weight = h * h / (h * h + span)
            else:
                weight = (h**3 / 12.0) / (h**3 / 12.0 + span / 6.0)
            lte = weight * np.abs(u_new - pred)
            tol = opts.reltol * np.maximum(scale_hist, np.abs(u_new)) + abstol
            scaled = np.where(dyn, lte / tol, 0.0)
            worst_lte = int(np.argmax(scaled))
            ratio = float(scaled[worst_lte])
        if ratio > 1.0 and not at_floor:
            h = max(h * max(0.25, 0.9 * ratio ** (-1.0 / 3.0)), hmin)
            rejected += 1
            continue
        if ratio > 1.0 and not lte_floor_warned:
            warnings.append(
                f"LTE above tolerance at the minimum step near t = {t_new:.3e} s "
                f"(worst unknown {system.labels[worst_lte]})"
            )
            lte_floor_warned = True

        # accept
        udot = a0 * u_new + hist_term
        udot[~dyn] = 0.0
        u = u_new
        t = t_new
        times.append(t)
        states.append(u.copy())
        derivs.append(udot.copy())
        scale_hist = np.maximum(scale_hist, np.abs(u))
        if hit_bp:
            bp_i = min(bp_i + 1, len(breakpoints) - 1)
            hist_t, hist_u = [t], [u.copy()]
            h = hmax / 100.0
            continue
        hist_t.append(t)
        hist_u.append(u.copy())
        if len(hist_t) > 3:
            hist_t.pop(0)
            hist_u.pop(0)
        growth = 2.0 if ratio == 0.0 else min(2.0, max(0.25, 0.9 * ratio ** (-1.0 / 3.0)))
        h = h * growth

    if warnings:
        for w in warnings:
            log.warning(w)
    series = TimeSeries(np.array(times), np.array(states), np.array(derivs), system, tuple(warnings), rejected)
    return series.window(tstart) if tstart > 0 else series
