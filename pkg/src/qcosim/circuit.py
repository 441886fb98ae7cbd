"""Elaborated circuits: resolved parameters, typed elements and analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .netlist import (
    ElementCard,
    NetlistAst,
    NetlistError,
    parse,
    value_expression,
)
from .quantum import DqdDevice, DqdParams, SebDevice, SebParams

GROUND = "0"


# ---------------------------------------------------------------------------
# Source waveforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dc:
    value: float

    def __call__(self, t):
        return np.full(np.shape(t), self.value)[()]

    def at_zero(self) -> float:
        return self.value

    def breakpoints(self, t_stop: float) -> list:
        return []

    def shifted(self, value: float) -> "Dc":
        return Dc(value)


@dataclass(frozen=True)
class Sin:
    """offset + amplitude * sin(2 pi freq t + phase), phase in degrees."""

    offset: float
    amplitude: float
    freq: float
    phase_deg: float = 0.0

    def __call__(self, t):
        phase = math.radians(self.phase_deg)
        return self.offset + self.amplitude * np.sin(2.0 * math.pi * self.freq * np.asarray(t) + phase)

    def at_zero(self) -> float:
        return self.offset + self.amplitude * math.sin(math.radians(self.phase_deg))

    def breakpoints(self, t_stop: float) -> list:
        return []

    def shifted(self, value: float) -> "Sin":
        return replace(self, offset=value)


@dataclass(frozen=True)
class Pulse:
    v1: float
    v2: float
    delay: float
    rise: float
    fall: float
    width: float
    period: float

    def __post_init__(self):
        if self.rise < 0 or self.fall < 0 or self.width < 0 or self.delay < 0:
            raise ValueError("PULSE times must be non-negative")
        if self.period <= 0:
            raise ValueError("PULSE period must be positive")

    def __call__(self, t):
        # zero-length edges are left-continuous so a step ending on the edge
        # still sees the old level
        t = np.asarray(t, dtype=float)
        local = np.where(t <= self.delay, -1.0, np.mod(t - self.delay, self.period))
        local = np.where((t > self.delay) & (local == 0.0), self.period, local)
        span = self.v2 - self.v1
        t_top = self.rise
        t_down = self.rise + self.width
        t_end = t_down + self.fall
        out = np.full(t.shape, self.v1)
        if self.rise > 0:
            ramp = (local > 0) & (local < t_top)
            out = np.where(ramp, self.v1 + span * local / self.rise, out)
        out = np.where((local >= t_top) & (local > 0) & (local <= t_down), self.v2, out)
        if self.fall > 0:
            down = (local > t_down) & (local < t_end)
            out = np.where(down, self.v2 - span * (local - t_down) / self.fall, out)
        return out[()]

    def at_zero(self) -> float:
        return float(self(0.0))

    def breakpoints(self, t_stop: float) -> list:
        edges = (0.0, self.rise, self.rise + self.width, self.rise + self.width + self.fall)
        out = []
        start = self.delay
        while start <= t_stop:
            out.extend(start + e for e in edges if start + e <= t_stop)
            start += self.period
        return sorted(set(out))

    def shifted(self, value: float) -> "Pulse":
        return replace(self, v1=value)


# ---------------------------------------------------------------------------
# Elements and analyses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Element:
    """Linear element or independent source; values in SI units."""

    name: str
    kind: str  # r, c, l, v, i
    nodes: tuple
    value: float | None = None
    waveform: Dc | Sin | Pulse | None = None


@dataclass(frozen=True)
class Tran:
    tstep: float
    tstop: float
    tstart: float = 0.0


@dataclass(frozen=True)
class Acq:
    fstart: float
    fstop: float
    npoints: int
    scale: str  # "lin" or "dec" (npoints per decade)

    def frequencies(self) -> np.ndarray:
        if self.scale == "lin":
            return np.linspace(self.fstart, self.fstop, self.npoints)
        decades = math.log10(self.fstop / self.fstart)
        n = max(int(round(decades * self.npoints)) + 1, 2)
        return np.logspace(math.log10(self.fstart), math.log10(self.fstop), n)


@dataclass(frozen=True)
class Harm:
    f0: float
    nharm: int
    ncycles: int
    settle: int = 20
    points: int = 200  # step ceiling = 1 / (points f0)


@dataclass(frozen=True)
class SweepAxis:
    name: str
    values: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class PrintGroup:
    analysis: str  # tran | acq | harm
    targets: tuple


@dataclass(frozen=True)
class SolverOptions:
    reltol: float = 1e-6
    abstol_v: float = 1e-9
    abstol_i: float = 1e-12
    abstol_s: float = 1e-9
    newton_reltol: float = 1e-10
    max_newton: int = 30


_OPTION_FIELDS = {f for f in SolverOptions.__dataclass_fields__}

ACQ_QUANTITIES = {"s11", "y", "y11", "y12", "y21", "y22", "z"}
QDEV_TRAN_QUANTITIES = {"p1", "x", "y", "z", "eps", "i1", "i2"}


@dataclass
class Circuit:
    title: str
    nodes: dict  # name -> index, ground is 0
    elements: list
    devices: list
    params: dict
    tran: Tran | None = None
    acq: Acq | None = None
    harm: Harm | None = None
    sweep: tuple = ()
    prints: tuple = ()
    probes: tuple = ()
    options: SolverOptions = field(default_factory=SolverOptions)
    ast: NetlistAst | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        """Number of non-ground nodes."""
        return len(self.nodes) - 1

    def element(self, name: str) -> Element:
        for el in self.elements:
            if el.name == name:
                return el
        raise KeyError(name)

    def device(self, name: str):
        for dev in self.devices:
            if dev.name == name:
                return dev
        raise KeyError(name)

    def component(self, name: str):
        try:
            return self.element(name)
        except KeyError:
            return self.device(name)

    def with_source(self, name: str, waveform) -> "Circuit":
        """Copy with one source's waveform replaced."""
        el = self.element(name)
        if el.kind not in ("v", "i"):
            raise NetlistError(f"{name} is not a source")
        elements = [replace(e, waveform=waveform) if e.name == name else e for e in self.elements]
        return replace(self, elements=elements)

    def with_source_value(self, name: str, value: float) -> "Circuit":
        """Copy with a source's DC level (or SIN offset, PULSE base) set to ``value``."""
        return self.with_source(name, self.element(name).waveform.shifted(value))

    def breakpoints(self, t_stop: float) -> list:
        out = set()
        for el in self.elements:
            if el.waveform is not None:
                out.update(el.waveform.breakpoints(t_stop))
        return sorted(out)


# ---------------------------------------------------------------------------
# Elaboration
# ---------------------------------------------------------------------------


def _at(card, message: str) -> NetlistError:
    pos = getattr(card, "pos", None)
    if pos is None:
        return NetlistError(message)
    return NetlistError(message, pos.line, pos.column)


class _ParamScope:
    """Lazy .param resolution with cycle detection."""

    def __init__(self, raw: dict, overrides: dict):
        self.raw = raw
        self.values = {}
        for name, value in overrides.items():
            self.values[name] = float(value)
        self._active = []

    def __call__(self, name: str) -> float:
        if name in self.values:
            return self.values[name]
        if name not in self.raw:
            raise NetlistError(f"undefined parameter {name!r}")
        if name in self._active:
            cycle = " -> ".join(self._active[self._active.index(name):] + [name])
            raise NetlistError(f"circular parameter definition: {cycle}")
        self._active.append(name)
        try:
            value = self.evaluate(self.raw[name], f"parameter {name!r}")
        finally:
            self._active.pop()
        self.values[name] = value
        return value

    def evaluate(self, token: str, where: str) -> float:
        try:
            expr = value_expression(token)
            value = expr.evaluate(self)
        except NetlistError as exc:
            raise NetlistError(f"{where}: {exc.message}") from None
        except (ValueError, ZeroDivisionError, OverflowError) as exc:
            raise NetlistError(f"{where}: {exc.args[0] if exc.args else exc}") from None
        if not math.isfinite(value):
            raise NetlistError(f"{where}: value is not finite")
        return value


def _card_value(scope: _ParamScope, card, token: str, what: str = "value") -> float:
    try:
        return scope.evaluate(token, f"{card.name}: {what}")
    except NetlistError as exc:
        raise _at(card, exc.message) from None


def _make_waveform(scope, card: ElementCard):
    args = [_card_value(scope, card, a, f"{card.source.kind} argument") for a in card.source.args]
    kind = card.source.kind
    try:
        if kind == "dc":
            return Dc(args[0])
        if kind == "sin":
            return Sin(*args)
        return Pulse(*args)
    except ValueError as exc:
        raise _at(card, f"{card.name}: {exc}") from None


_SEB_NAMES = {"alphag": "alpha_G", "alphar": "alpha_R", "gamma": "Gamma", "temp": "T"}


def _make_device(scope, card: ElementCard):
    values = {k: _card_value(scope, card, v, k) for k, v in card.params}
    try:
        if card.kind == "qseb":
            missing = [k for k in _SEB_NAMES if k not in values]
            if missing:
                raise ValueError(f"missing parameter(s) {', '.join(missing)}")
            params = SebParams(**{_SEB_NAMES[k]: values[k] for k in _SEB_NAMES})
            return SebDevice(card.name, card.nodes[0], card.nodes[1], params)
        missing = [k for k in ("a11", "a22", "tc", "gcr", "temp") if k not in values]
        if missing:
            raise ValueError(f"missing parameter(s) {', '.join(missing)}")
        alpha = (
            (values["a11"], values.get("a12", 0.0)),
            (values.get("a21", 0.0), values["a22"]),
        )
        params = DqdParams(alpha, values["tc"], values["gcr"], values.get("gphi", 0.0), values["temp"])
        return DqdDevice(card.name, card.nodes[0], card.nodes[1], params)
    except ValueError as exc:
        raise _at(card, f"{card.name}: {exc}") from None


def _infer_group(attr: str, has: dict) -> str:
    if attr in ACQ_QUANTITIES - {"y"}:
        return "acq"
    if attr == "y" and has["acq"]:
        return "acq"
    if has["tran"]:
        return "tran"
    if has["harm"]:
        return "harm"
    return "acq" if has["acq"] else "tran"


def elaborate(ast: NetlistAst, overrides: dict | None = None) -> Circuit:
    """Resolve parameters and build a :class:`Circuit`.

    Parameters
    ----------
    ast : NetlistAst
    overrides : dict, optional
        ``name -> value``. Names of ``.param`` entries replace the parameter;
        names of V/I sources set the source's DC level (SIN offset, PULSE v1).

    Raises
    ------
    NetlistError
        Naming the offending element, node or parameter.
    """
    overrides = dict(overrides or {})
    raw_params = {}
    for card in ast.directives:
        if card.name == "param":
            for k, v in card.params:
                raw_params[k] = v
    source_names = {c.name for c in ast.elements if c.kind in ("v", "i")}
    param_over = {}
    source_over = {}
    for name, value in overrides.items():
        key = name.lower()
        if key in raw_params:
            param_over[key] = value
        elif key in source_names:
            source_over[key] = float(value)
        else:
            raise NetlistError(f"override {name!r} does not match a declared parameter or source")
    scope = _ParamScope(raw_params, param_over)
    for name in raw_params:
        try:
            scope(name)
        except NetlistError as exc:
            card = next(c for c in ast.directives if c.name == "param" and any(k == name for k, _ in c.params))
            raise _at(card, exc.message) from None

    nodes = {GROUND: 0}
    connections = {}
    first_card = {}
    elements = []
    devices = []
    for card in ast.elements:
        for node in card.nodes:
            if node == "gnd":
                node = GROUND
            nodes.setdefault(node, len(nodes))
            connections[node] = connections.get(node, 0) + 1
            first_card.setdefault(node, card)
        card_nodes = tuple(GROUND if n == "gnd" else n for n in card.nodes)
        card = replace(card, nodes=card_nodes)
        if card.nodes[0] == card.nodes[1]:
            raise _at(card, f"{card.name}: both terminals on node {card.nodes[0]!r}")
        if card.kind in ("r", "c", "l"):
            value = _card_value(scope, card, card.value)
            if not value > 0.0:
                raise _at(card, f"{card.name}: value must be positive, got {value:g}")
            elements.append(Element(card.name, card.kind, card.nodes, value=value))
        elif card.kind in ("v", "i"):
            waveform = _make_waveform(scope, card)
            if card.name in source_over:
                waveform = waveform.shifted(source_over[card.name])
            elements.append(Element(card.name, card.kind, card.nodes, waveform=waveform))
        else:
            devices.append(_make_device(scope, card))

    if GROUND not in connections:
        raise NetlistError("circuit has no connection to ground node '0'")

    tran = acq = harm = None
    sweep = ()
    print_cards = []
    probes = []
    options = {}
    for card in ast.directives:
        ev = lambda tok, what: _card_value(scope, card, tok, what)  # noqa: E731
        card_params = dict(card.params)
        if card.name == "tran":
            vals = [ev(a, ".tran") for a in card.args]
            tran = Tran(*vals)
            if not (tran.tstep > 0 and tran.tstop > tran.tstart >= 0):
                raise _at(card, ".tran needs tstep > 0 and tstop > tstart >= 0")
        elif card.name == "acq":
            f0, f1, n = (ev(a, ".acq") for a in card.args[:3])
            if not (0 < f0 <= f1) or n < 1:
                raise _at(card, ".acq needs 0 < fstart <= fstop and npoints >= 1")
            acq = Acq(f0, f1, int(round(n)), card.args[3])
        elif card.name == "harm":
            f0, nh, nc = (ev(a, ".harm") for a in card.args)
            extra = {k: int(round(ev(v, k))) for k, v in card_params.items()}
            unknown = set(extra) - {"settle", "points"}
            if unknown:
                raise _at(card, f".harm: unknown option {sorted(unknown)[0]!r}")
            harm = Harm(f0, int(round(nh)), int(round(nc)), **extra)
            if not (f0 > 0 and harm.nharm >= 1 and harm.ncycles >= 1 and harm.settle >= 0 and harm.points >= 64):
                raise _at(card, ".harm needs f0 > 0, nharm >= 1, ncycles >= 1, points >= 64")
        elif card.name == "sweep":
            axes = []
            for g in range(0, len(card.args), 4):
                name = card.args[g]
                start, stop, n = (ev(a, ".sweep") for a in card.args[g + 1 : g + 4])
                if name not in raw_params and name not in source_names:
                    raise _at(card, f".sweep variable {name!r} is neither a parameter nor a source")
                if n < 1:
                    raise _at(card, ".sweep needs at least one point")
                axes.append(SweepAxis(name, np.linspace(start, stop, int(round(n)))))
            sweep = tuple(axes)
        elif card.name == "print":
            print_cards.append(card)
        elif card.name == "probe":
            probes.extend(card.args)
        elif card.name == "options":
            for k, v in card.params:
                if k not in _OPTION_FIELDS:
                    raise _at(card, f".options: unknown option {k!r}")
                options[k] = ev(v, k)
                if k == "max_newton":
                    options[k] = int(options[k])

    for node, count in connections.items():
        if node != GROUND and count < 2 and node not in probes:
            card = first_card[node]
            raise _at(card, f"{card.name}: node {node!r} has only one connection (dangling); mark it with .probe if intended")

    components = {e.name: e for e in elements}
    components.update({d.name: d for d in devices})
    has = {"tran": tran is not None, "acq": acq is not None, "harm": harm is not None}
    groups: dict = {}
    for card in print_cards:
        explicit = card.args[0] if card.args and card.args[0] in ("tran", "acq", "harm") else None
        targets = card.args[1:] if explicit else card.args
        for target in targets:
            owner, attr = target.split(".")
            _check_target(card, owner, attr, nodes, components, explicit)
            group = explicit or _infer_group(attr, has)
            if not has[group]:
                raise _at(card, f".print {target}: no .{group} analysis in the netlist")
            groups.setdefault(group, []).append(target)
    prints = tuple(PrintGroup(g, tuple(dict.fromkeys(t))) for g, t in groups.items())

    return Circuit(
        title=ast.title,
        nodes=nodes,
        elements=elements,
        devices=devices,
        params=dict(scope.values),
        tran=tran,
        acq=acq,
        harm=harm,
        sweep=sweep,
        prints=prints,
        probes=tuple(probes),
        options=SolverOptions(**options),
        ast=ast,
    )


def _check_target(card, owner, attr, nodes, components, explicit):
    if attr in ("v", "z") and owner in nodes:
        return
    comp = components.get(owner)
    if comp is None:
        raise _at(card, f".print: unknown node or element {owner!r}")
    if isinstance(comp, Element):
        allowed = {"i", "v"} | ({"s11"} if comp.kind == "r" else set())
    else:
        allowed = QDEV_TRAN_QUANTITIES | ACQ_QUANTITIES - {"s11", "z"}
    if attr not in allowed:
        raise _at(card, f".print: {owner!r} has no quantity {attr!r}")
    if explicit == "acq" and attr not in ACQ_QUANTITIES:
        raise _at(card, f".print acq: {attr!r} is not a small-signal quantity")


def load(text: str, overrides: dict | None = None) -> Circuit:
    """Parse and elaborate netlist text in one call."""
    return elaborate(parse(text), overrides)


def load_file(path, overrides: dict | None = None) -> Circuit:
    with open(path, encoding="utf-8") as fh:
        return load(fh.read(), overrides)
