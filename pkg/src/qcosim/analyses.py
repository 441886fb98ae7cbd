"""Analyses on top of the engine: linear response, S11, harmonics, sweeps."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.interpolate import CubicSpline

from .circuit import GROUND, Circuit, Sin, elaborate
from .constants import E_CHARGE
from .engine import MnaSystem, OperatingPoint, SimulationError, dc_operating_point, transient
from .netlist import NetlistAst, NetlistError

log = logging.getLogger(__name__)


class ResonanceSingularityError(SimulationError):
    """(i omega - A) is singular: undamped resonance at the probe frequency."""


class ConfigurationError(NetlistError):
    pass


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmittancePoint:
    frequency: float
    Y: complex
    epsilon: float
    settled: bool = True

    @property
    def magnitude(self) -> float:
        return abs(self.Y)

    @property
    def phase(self) -> float:
        return math.atan2(self.Y.imag, self.Y.real)


@dataclass(frozen=True)
class FrequencySweep:
    """Small-signal results per frequency; ``data`` maps target -> complex array."""

    f: np.ndarray
    data: dict


@dataclass(frozen=True)
class HarmonicSpectrum:
    """Complex Fourier amplitudes c_k at k*f0, k = 0..nharm.

    c_0 is the mean; for k >= 1 a component a*cos(k w t + phi) has
    c_k = a*exp(i phi), so |c_k| is the peak amplitude.
    """

    f0: float
    amplitudes: np.ndarray
    window: tuple
    adjusted: bool = False
    note: str = ""

    @property
    def frequencies(self) -> np.ndarray:
        return self.f0 * np.arange(self.amplitudes.size)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.amplitudes)


@dataclass(frozen=True)
class SweepGrid:
    """Results on a 1-D or 2-D grid; failed points hold NaN."""

    axes: tuple  # ((name, values), ...)
    values: np.ndarray
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(len(v) for _, v in self.axes)
        if self.values.shape[: len(shape)] != shape:
            raise ValueError(f"grid shape {self.values.shape} does not match axes {shape}")

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.axes)


@dataclass(frozen=True)
class ResultTable:
    """Long-format table written by the CLI: one row per sample."""

    analysis: str
    columns: tuple
    rows: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]


# ---------------------------------------------------------------------------
# Small-signal quantum response
# ---------------------------------------------------------------------------


def quantum_ac(device, eps0: float, f) -> np.ndarray:
    """Terminal admittance block of a device linearised at detuning ``eps0``.

    ``Y[l, m]`` is the current into terminal l per volt applied at terminal m
    (siemens). The Bloch response is
    ds = (i w I - A)^-1 (A' s0 + b') * deps with deps = (d eps / d V_m) dV_m.

    Parameters
    ----------
    device : QuantumDevice
    eps0 : float
        Operating detuning (Hz).
    f : float or array_like
        Probe frequency (Hz).

    Returns
    -------
    ndarray of complex, shape (2, 2) or (len(f), 2, 2)
    """
    A, b, dA, db = device.linearize(eps0)
    omega = 2.0 * math.pi * np.atleast_1d(np.asarray(f, dtype=float))
    # (i w I - A) is singular only on an undamped eigenvalue; w = 0 also
    # covers the missing fixed point of a purely coherent device
    lam = np.linalg.eigvals(A)
    scale = max(np.max(np.abs(A)), 1.0)
    for w in np.concatenate([[0.0], omega]):
        if np.min(np.abs(1j * w - lam)) < 1e-12 * scale:
            raise ResonanceSingularityError(
                f"{device.name}: undamped resonance at {w / (2.0 * math.pi):.6g} Hz (no dissipation)"
            )
    s0 = -np.linalg.solve(A, b)
    drive = dA @ s0 + db
    M = 1j * omega[:, None, None] * np.eye(3) - A
    ds = np.linalg.solve(M, np.broadcast_to(drive, (omega.size, 3))[..., None])[..., 0]
    response = (device.charge_rows @ ds[..., None])[..., 0]  # (nf, terminals)
    Y = E_CHARGE * 1j * omega[:, None, None] * response[:, :, None] * device.eps_gradient[None, None, :]
    return Y[0] if np.ndim(f) == 0 else Y


# ---------------------------------------------------------------------------
# Network AC and S11
# ---------------------------------------------------------------------------


class _AcNetwork:
    """Complex network matrix with quantum blocks at a fixed operating point."""

    def __init__(self, circuit: Circuit, op: OperatingPoint | None = None):
        self.circuit = circuit
        self.op = op if op is not None else dc_operating_point(circuit)
        self.system = MnaSystem(circuit)
        n = self.system.n_network
        self.n = n
        self.G = self.system.G[:n, :n].copy()
        self.C = self.system.Q[:n, :n].copy()
        self.eps = {d.name: self.op.detuning(d.name) for d in circuit.devices}

    def matrix(self, f: float, exclude: tuple = ()) -> np.ndarray:
        omega = 2.0 * math.pi * f
        Y = self.G + 1j * omega * self.C
        for name in exclude:
            el = self.circuit.element(name)
            a, b = (self.system.node_index(x) for x in el.nodes)
            g = 1.0 / el.value if el.kind == "r" else 1j * omega * el.value
            for i, j, sign in ((a, a, 1), (b, b, 1), (a, b, -1), (b, a, -1)):
                if i >= 0 and j >= 0:
                    Y[i, j] -= sign * g
        for dev in self.circuit.devices:
            block = quantum_ac(dev, self.eps[dev.name], f)
            idx = [self.system.node_index(t) for t in dev.terminals]
            for l, il in enumerate(idx):
                for m, im in enumerate(idx):
                    if il >= 0 and im >= 0:
                        Y[il, im] += block[l, m]
        return Y

    def impedance(self, f: float, a: str, b: str = GROUND, exclude: tuple = ()) -> complex:
        """V(a) - V(b) for a unit current injected into a and drawn from b."""
        ia, ib = self.system.node_index(a), self.system.node_index(b)
        rhs = np.zeros(self.n, dtype=complex)
        if ia >= 0:
            rhs[ia] = 1.0
        if ib >= 0:
            rhs[ib] = -1.0
        try:
            v = np.linalg.solve(self.matrix(f, exclude), rhs)
        except np.linalg.LinAlgError:
            return complex(np.inf)
        return complex((v[ia] if ia >= 0 else 0.0) - (v[ib] if ib >= 0 else 0.0))


def s11(Z: complex, Z0: float) -> complex:
    if np.isinf(Z):
        return 1.0 + 0j
    return (Z - Z0) / (Z + Z0)


def network_ac(circuit: Circuit, f_grid, targets=(), op: OperatingPoint | None = None) -> FrequencySweep:
    """Small-signal solve of the full network with linearised quantum devices.

    Targets
    -------
    ``<r>.s11``
        Reflection at the port formed by resistor ``<r>`` (Z0 = its value):
        the network is seen from the resistor's terminals with the resistor
        removed and independent sources zeroed.
    ``<node>.z``
        Impedance from node to ground.
    ``<dev>.y``, ``<dev>.y11`` ... ``<dev>.y22``
        Device admittance block from :func:`quantum_ac`; ``y`` is ``y11``.

    Raises
    ------
    ConfigurationError
        If an S11 target does not name a resistor.
    """
    f_grid = np.atleast_1d(np.asarray(f_grid, dtype=float))
    net = _AcNetwork(circuit, op)
    data = {t: np.empty(f_grid.size, dtype=complex) for t in targets}
    ports = {}
    for target in targets:
        owner, attr = target.split(".")
        if attr == "s11":
            try:
                el = circuit.element(owner)
            except KeyError:
                el = None
            if el is None or el.kind != "r":
                raise ConfigurationError(f"S11 port {owner!r} must be a resistor")
            ports[target] = el
    for k, f in enumerate(f_grid):
        for target in targets:
            owner, attr = target.split(".")
            if attr == "s11":
                el = ports[target]
                Z = net.impedance(f, el.nodes[0], el.nodes[1], exclude=(el.name,))
                data[target][k] = s11(Z, el.value)
            elif attr == "z":
                data[target][k] = net.impedance(f, owner)
            else:
                dev = circuit.device(owner)
                block = quantum_ac(dev, net.eps[owner], f)
                l, m = (0, 0) if attr == "y" else (int(attr[1]) - 1, int(attr[2]) - 1)
                data[target][k] = block[l, m]
    return FrequencySweep(f_grid, data)


def port_impedance(circuit: Circuit, port: str, f, op: OperatingPoint | None = None) -> np.ndarray:
    """Impedance seen by resistor ``port`` looking into the rest of the circuit."""
    net = _AcNetwork(circuit, op)
    el = circuit.element(port)
    return np.array([net.impedance(fk, el.nodes[0], el.nodes[1], exclude=(port,)) for fk in np.atleast_1d(f)])


# ---------------------------------------------------------------------------
# Harmonics
# ---------------------------------------------------------------------------


def harmonic_spectrum(
    t,
    x,
    f0: float,
    nharm: int,
    ncycles: int | None = None,
    samples_per_period: int = 1024,
) -> HarmonicSpectrum:
    """Fourier projection of ``x(t)`` onto k*f0 over the last whole periods.

    The (possibly non-uniform) series is resampled with a cubic spline onto
    a uniform periodic grid, where the rectangle rule is the exact
    trapezoid rule for periodic integrands.

    Parameters
    ----------
    t, x : array_like
        Sample times (increasing) and values.
    f0 : float
        Fundamental (Hz).
    nharm : int
        Highest harmonic returned.
    ncycles : int, optional
        Periods in the window, counted back from ``t[-1]``. Defaults to as
        many whole periods as fit; if fewer than requested fit, the window
        shrinks and the adjustment is recorded.
    samples_per_period : int
        Resampling density, at least 64.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x)
    if samples_per_period < 64:
        raise ValueError("need at least 64 samples per period")
    period = 1.0 / f0
    available = int(math.floor((t[-1] - t[0]) / period * (1 + 1e-12)))
    if available < 1:
        raise ValueError("series shorter than one period")
    adjusted = False
    note = ""
    if ncycles is None:
        ncycles = available
    elif ncycles > available:
        note = f"window reduced from {ncycles} to {available} periods"
        adjusted = True
        ncycles = available
    t_end = t[-1]
    t_start = t_end - ncycles * period
    n = ncycles * samples_per_period
    grid = t_start + period * np.arange(n) / samples_per_period
    if np.iscomplexobj(x):
        xs = CubicSpline(t, x.real)(grid) + 1j * CubicSpline(t, x.imag)(grid)
    else:
        xs = CubicSpline(t, x)(grid)
    k = np.arange(nharm + 1)
    phase = np.exp(-2j * math.pi * f0 * np.outer(k, grid))
    c = 2.0 * (phase @ xs) / n
    c[0] *= 0.5
    return HarmonicSpectrum(f0, c, (t_start, t_end), adjusted, note)


# ---------------------------------------------------------------------------
# Large-signal admittance
# ---------------------------------------------------------------------------


def _drive_source(circuit: Circuit, target) -> str:
    """The SIN voltage source on the first terminal node of a device or element."""
    node = target.terminals[0] if hasattr(target, "terminals") else target.nodes[0]
    for el in circuit.elements:
        if el.kind == "v" and isinstance(el.waveform, Sin) and node in el.nodes:
            return el.name
    sins = [el.name for el in circuit.elements if el.kind == "v" and isinstance(el.waveform, Sin)]
    if len(sins) == 1:
        return sins[0]
    raise ConfigurationError(f"cannot identify the SIN source driving {target.name}; pass source=")


def large_signal_admittance(
    circuit: Circuit,
    device: str,
    f: float,
    amplitude: float,
    settle_cycles: int = 20,
    measure_cycles: int = 5,
    source: str | None = None,
    points_per_period: int = 200,
    terminal: int = 0,
) -> AdmittancePoint:
    """First-harmonic terminal current over first-harmonic terminal voltage.

    The chosen SIN source is reprogrammed to ``amplitude`` at ``f`` (its
    offset is kept), the transient runs ``settle_cycles + measure_cycles``
    periods, and both the device current and the terminal voltage are
    projected onto exp(-i 2 pi f t) over the last ``measure_cycles``.
    ``settled`` is False when the first harmonic of the last two cycles
    differs by more than 0.1%.

    ``device`` may also name a two-terminal element, in which case its
    branch current and voltage are used (useful for calibration).
    """
    is_device = any(d.name == device for d in circuit.devices)
    target = circuit.device(device) if is_device else circuit.element(device)
    if not is_device and terminal != 0:
        raise ConfigurationError(f"{device}: plain elements have a single port")
    source = source or _drive_source(circuit, target)
    wave = circuit.element(source).waveform
    offset = wave.offset if isinstance(wave, Sin) else wave.at_zero()
    driven = circuit.with_source(source, Sin(offset, amplitude, f, 0.0))
    period = 1.0 / f
    ts = transient(driven, period / points_per_period, (settle_cycles + measure_cycles) * period)
    if is_device:
        current = ts.terminal_current(device, terminal)
        volts = ts.voltage(target.terminals[terminal])
    else:
        current = ts.element_current(device)
        volts = ts.voltage(target.nodes[0]) - ts.voltage(target.nodes[1])
    I1 = harmonic_spectrum(ts.t, current, f, 1, measure_cycles).amplitudes[1]
    V1 = harmonic_spectrum(ts.t, volts, f, 1, measure_cycles).amplitudes[1]
    settled = True
    if measure_cycles >= 2:
        last = harmonic_spectrum(ts.t, current, f, 1, 1).amplitudes[1]
        cut = ts.t <= ts.t[-1] - period * (1 + 1e-12)
        prev = harmonic_spectrum(ts.t[cut], current[cut], f, 1, 1).amplitudes[1]
        settled = bool(abs(last - prev) <= 1e-3 * max(abs(last), 1e-300))
        if not settled:
            log.warning("%s: first harmonic still drifting (%.3g relative)", device, abs(last - prev) / abs(last))
    eps0 = math.nan
    if is_device:
        eps0 = float(harmonic_spectrum(ts.t, ts.detuning(device), f, 0, measure_cycles).amplitudes[0].real)
    return AdmittancePoint(f, complex(I1 / V1), eps0, settled)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _grid_points(axes):
    return list(product(*(range(len(v)) for _, v in axes)))


def _run_point(args):
    ast, base_overrides, axes, index, inner = args
    overrides = dict(base_overrides)
    for (name, values), i in zip(axes, index):
        overrides[name] = float(values[i])
    try:
        return index, inner(elaborate(ast, overrides)), None
    except (SimulationError, NetlistError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def sweep(source, axes, inner, overrides: dict | None = None, threads: int | None = None) -> SweepGrid:
    """Evaluate ``inner(circuit)`` over a grid of parameter/source values.

    Parameters
    ----------
    source : NetlistAst or Circuit
        The netlist to re-elaborate at every point.
    axes : sequence of (name, values)
        At most two axes; names are ``.param`` names or V/I source names.
    inner : callable
        Maps an elaborated circuit to a scalar, complex number or array.
        Must be picklable when ``threads > 1``.
    threads : int, optional
        Worker processes; defaults to ``QCOSIM_THREADS`` or 1.

    Failed points become NaN and their messages are kept in ``errors``.
    """
    ast = source.ast if isinstance(source, Circuit) else source
    if not isinstance(ast, NetlistAst):
        raise TypeError("sweep needs a NetlistAst or an elaborated Circuit")
    axes = tuple((name, np.asarray(values, dtype=float)) for name, values in axes)
    if not 1 <= len(axes) <= 2:
        raise ValueError("sweep supports one or two axes")
    if threads is None:
        threads = int(os.environ.get("QCOSIM_THREADS", "1") or 1)
    jobs = [(ast, overrides or {}, axes, idx, inner) for idx in _grid_points(axes)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(job) for job in jobs]
    good = [r for _, r, err in results if err is None]
    shape = tuple(len(v) for _, v in axes)
    if good and any(np.shape(r) != np.shape(good[0]) for r in good):
        values = np.full(shape, None, dtype=object)  # ragged, e.g. adaptive time grids
    else:
        tail = np.shape(good[0]) if good else ()
        dtype = complex if any(np.iscomplexobj(r) for r in good) else float
        values = np.full(shape + tail, np.nan, dtype=dtype)
    errors = {}
    for idx, result, err in results:
        if err is None:
            values[idx] = result
        else:
            errors[idx] = err
            log.warning("sweep point %s failed: %s", idx, err)
    return SweepGrid(axes, values, errors)


# ---------------------------------------------------------------------------
# Netlist-driven evaluation of .print groups
# ---------------------------------------------------------------------------


def _label(target: str, targets) -> str:
    owner, attr = target.split(".")
    attrs = [t.split(".")[1] for t in targets]
    return attr if attrs.count(attr) == 1 else f"{owner}_{attr}"


def _value_columns(targets):
    return [_label(t, targets) for t in targets]


def run_harmonics(circuit: Circuit, targets) -> dict:
    h = circuit.harm
    period = 1.0 / h.f0
    ts = transient(circuit, period / h.points, (h.settle + h.ncycles) * period)
    out = {}
    for target in targets:
        out[target] = harmonic_spectrum(ts.t, ts.quantity(target), h.f0, h.nharm, h.ncycles)
    return out


def evaluate_group(circuit: Circuit, group) -> tuple:
    """(axis_name, axis_values, {target: values}) for one print group."""
    if group.analysis == "tran":
        tr = circuit.tran
        ts = transient(circuit, tr.tstep, tr.tstop, tr.tstart)
        return "t", ts.t, {t: ts.quantity(t) for t in group.targets}
    if group.analysis == "acq":
        fs = network_ac(circuit, circuit.acq.frequencies(), group.targets)
        return "f", fs.f, fs.data
    spectra = run_harmonics(circuit, group.targets)
    k = np.arange(circuit.harm.nharm + 1)
    return "k", k, {t: s.amplitudes for t, s in spectra.items()}


def _table(analysis, sweep_names, sweep_values, axis_name, axis, data, targets) -> tuple:
    labels = _value_columns(targets)
    columns = list(sweep_names) + [axis_name]
    cols = [np.full(axis.size, v) for v in sweep_values] + [np.asarray(axis, dtype=float)]
    for target, label in zip(targets, labels):
        values = np.asarray(data[target])
        if analysis == "tran":
            values = values.real  # sweep kernels carry everything as complex
        if analysis in ("acq", "harm"):
            columns += [f"re_{label}", f"im_{label}"]
            cols += [values.real.astype(float), values.imag.astype(float)]
        else:
            columns.append(label)
            cols.append(values.astype(float))
    return columns, np.column_stack(cols)


def run_prints(circuit: Circuit, threads: int | None = None) -> list:
    """Execute every .print group (under the .sweep grid, if any).

    Returns
    -------
    list of ResultTable
    """
    tables = []
    for group in circuit.prints:
        if not circuit.sweep:
            axis_name, axis, data = evaluate_group(circuit, group)
            columns, rows = _table(group.analysis, (), (), axis_name, axis, data, group.targets)
            tables.append(ResultTable(group.analysis, tuple(columns), rows))
            continue
        axes = tuple((a.name, a.values) for a in circuit.sweep)
        grid = sweep(circuit, axes, _GroupRunner(group), threads=threads)
        blocks = []
        columns = None
        for idx in _grid_points(axes):
            point = tuple(float(values[i]) for (_, values), i in zip(axes, idx))
            if idx in grid.errors:
                continue
            result = grid.values[idx]
            axis = np.real(result[0])
            data = {t: result[1 + j] for j, t in enumerate(group.targets)}
            columns, rows = _table(group.analysis, [n for n, _ in axes], point, _AXIS[group.analysis], axis, data, group.targets)
            blocks.append(rows)
        if columns is None:
            raise SimulationError(f"every sweep point failed for .print {group.analysis}: {next(iter(grid.errors.values()))}")
        tables.append(ResultTable(group.analysis, tuple(columns), np.vstack(blocks)))
    return tables


_AXIS = {"tran": "t", "acq": "f", "harm": "k"}


@dataclass(frozen=True)
class _GroupRunner:
    """Picklable sweep kernel returning [axis, target values...] as one array."""

    group: object

    def __call__(self, circuit: Circuit):
        _, axis, data = evaluate_group(circuit, self.group)
        rows = [np.asarray(axis, dtype=complex)] + [np.asarray(data[t], dtype=complex) for t in self.group.targets]
        return np.vstack(rows)
