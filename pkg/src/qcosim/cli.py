"""Command-line front end.

    qcosim run NETLIST [--out DIR] [--format csv|json] [--set name=value ...]
                       [--plot] [--oracle-compare] [--threads N] [--seedless]
    qcosim oracle DRIVE.csv --netlist NETLIST --device NAME [--out FILE]
    qcosim examples [--copy DIR]

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import __version__
from .analyses import ConfigurationError, ResultTable, _AcNetwork, run_prints
from .circuit import Circuit, Sin, elaborate
from .engine import SimulationError, transient
from .netlist import NetlistError, parse, parse_number
from .oracle import DriveWaveform, cn_evolve

log = logging.getLogger("qcosim")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
ORACLE_THRESHOLD = 1e-4
FEEDBACK_LIMIT_OHM = 1e3  # Thevenin |Z| above which the open-loop oracle is not comparable


class UserError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    input: Path
    out: Path
    format: str = "csv"
    plot: bool = False
    overrides: dict = field(default_factory=dict)
    verbosity: int = 0
    oracle_compare: bool = False
    threads: int = 1
    seedless: bool = False

    def __post_init__(self):
        if self.format not in ("csv", "json"):
            raise UserError(f"unknown format {self.format!r}")
        if not self.input.is_file():
            raise UserError(f"input netlist not found: {self.input}")


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UserError(f"--set expects name=value, got {item!r}")
        name, value = item.split("=", 1)
        try:
            out[name.strip().lower()] = parse_number(value)
        except ValueError:
            raise UserError(f"--set {name}: malformed number {value!r}") from None
    return out


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def table_to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def table_to_json(table: ResultTable) -> str:
    payload = {
        "analysis": table.analysis,
        "columns": list(table.columns),
        "rows": [[float(_fmt(v)) for v in row] for row in table.rows],
    }
    return json.dumps(payload, indent=1) + "\n"


def _plot_table(table: ResultTable, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    axis = {"tran": "t", "acq": "f", "harm": "k"}[table.analysis]
    ai = table.columns.index(axis)
    sweep_cols = table.columns[:ai]
    values = [c for c in table.columns[ai + 1 :] if not c.startswith("im_")]
    fig, ax = plt.subplots(figsize=(6, 4))
    key = table.rows[:, :ai] if sweep_cols else np.zeros((len(table.rows), 0))
    groups = np.unique(key, axis=0) if sweep_cols else [None]
    for g in list(groups)[:8]:
        mask = np.all(key == g, axis=1) if g is not None else slice(None)
        x = table.rows[mask, ai]
        for col in values:
            y = table.rows[mask, table.columns.index(col)]
            if col.startswith("re_"):
                im = table.rows[mask, table.columns.index("im_" + col[3:])]
                y = np.abs(y + 1j * im)
                col = f"|{col[3:]}|"
            label = col if g is None else f"{col} @ " + ", ".join(f"{n}={_fmt(v)[:8]}" for n, v in zip(sweep_cols, g))
            if table.analysis == "harm":
                ax.plot(x, y, "o-", label=label)
            else:
                ax.plot(x, y, label=label)
    ax.set_xlabel({"t": "time (s)", "f": "frequency (Hz)", "k": "harmonic"}[axis])
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Oracle comparison
# ---------------------------------------------------------------------------


def _drive_frequency(circuit: Circuit) -> float:
    freqs = [el.waveform.freq for el in circuit.elements if isinstance(el.waveform, Sin)]
    if freqs:
        return max(freqs)
    return 1.0 / circuit.tran.tstop


def thevenin_impedance(circuit: Circuit, device: str, f: float) -> float:
    """Largest |Z| seen by the device's terminals with the devices removed."""
    bare = Circuit(**{**circuit.__dict__, "devices": []})
    net = _AcNetwork(bare)
    worst = 0.0
    for node in circuit.device(device).terminals:
        if node != "0":
            worst = max(worst, abs(net.impedance(f, node)))
    return worst


def oracle_compare(circuit: Circuit, dt: float | None = None) -> dict:
    """Run engine and oracle on the same detuning trace and compare Bloch vectors."""
    if len(circuit.devices) != 1:
        raise UserError("oracle comparison needs exactly one quantum device")
    if circuit.tran is None:
        raise UserError("oracle comparison needs a .tran directive")
    dev = circuit.devices[0]
    f = _drive_frequency(circuit)
    z = thevenin_impedance(circuit, dev.name, f)
    if z > FEEDBACK_LIMIT_OHM:
        raise UserError(
            f"source impedance at {dev.name} is {z:.3g} ohm at {f:.3g} Hz (limit {FEEDBACK_LIMIT_OHM:g} ohm); "
            "circuit feedback would make the open-loop oracle comparison meaningless"
        )
    tr = circuit.tran
    ts = transient(circuit, tr.tstep, tr.tstop)
    dt = dt or tr.tstep / 10.0
    eps_engine = ts.detuning(dev.name)
    drive = DriveWaveform.from_function(CubicSpline(ts.t, eps_engine), ts.t[-1], dt)
    s_oracle = cn_evolve(ts.bloch(dev.name)[0], drive, dev.params)
    ref = np.stack([np.interp(ts.t, drive.times, s_oracle[:, k]) for k in range(3)], axis=-1)
    dev_norm = np.linalg.norm(ts.bloch(dev.name) - ref, axis=1)
    mask = ts.t >= tr.tstart
    report = {
        "device": dev.name,
        "max_deviation": float(dev_norm[mask].max()),
        "mean_deviation": float(dev_norm[mask].mean()),
        "threshold": ORACLE_THRESHOLD,
        "source_impedance_ohm": z,
        "oracle_dt": dt,
        "engine_steps": int(ts.t.size),
    }
    report["pass"] = report["max_deviation"] < ORACLE_THRESHOLD
    return report


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _run_once(config: RunConfig, text: str):
    circuit = elaborate(parse(text), config.overrides)
    if not circuit.prints and not config.oracle_compare:
        raise UserError("netlist has no .print directive; nothing to write")
    return circuit, run_prints(circuit, threads=config.threads)


def run(config: RunConfig) -> int:
    t0 = time.perf_counter()
    text = config.input.read_text(encoding="utf-8")
    circuit, tables = _run_once(config, text)
    config.out.mkdir(parents=True, exist_ok=True)
    stem = config.input.stem
    files = {}
    rendered = []
    for i, table in enumerate(tables):
        suffix = table.analysis if sum(t.analysis == table.analysis for t in tables) == 1 else f"{table.analysis}{i}"
        body = table_to_csv(table) if config.format == "csv" else table_to_json(table)
        rendered.append(body)
        path = config.out / f"{stem}_{suffix}.{config.format}"
        path.write_text(body, encoding="utf-8")
        files[path.name] = _sha256(body.encode())
        if config.plot:
            _plot_table(table, path.with_suffix(".svg"))
    if config.seedless:
        _, again = _run_once(config, text)
        again_rendered = [table_to_csv(t) if config.format == "csv" else table_to_json(t) for t in again]
        if again_rendered != rendered:
            raise SimulationError("repeated run produced different output (determinism check failed)")
    report = None
    if config.oracle_compare:
        report = oracle_compare(circuit)
        (config.out / f"{stem}_oracle.json").write_text(json.dumps(report, indent=1) + "\n")
        print(
            f"oracle comparison: max deviation {report['max_deviation']:.3e}, "
            f"mean {report['mean_deviation']:.3e} -> {'PASS' if report['pass'] else 'FAIL'}"
        )
    manifest = {
        "tool": "qcosim",
        "version": __version__,
        "input": str(config.input),
        "input_sha256": _sha256(text.encode()),
        "overrides": {k: config.overrides[k] for k in sorted(config.overrides)},
        "outputs": files,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (config.out / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for name in files:
        print(config.out / name)
    if report is not None and not report["pass"]:
        return EXIT_NUMERIC
    return EXIT_OK


def run_oracle(drive_csv: Path, netlist: Path, device: str, out: Path | None) -> int:
    if not drive_csv.is_file():
        raise UserError(f"drive file not found: {drive_csv}")
    if not netlist.is_file():
        raise UserError(f"input netlist not found: {netlist}")
    data = np.genfromtxt(drive_csv, delimiter=",", names=True)
    if data.dtype.names is None or not {"t", "eps"} <= set(data.dtype.names):
        raise UserError(f"{drive_csv}: expected a CSV header with columns t and eps")
    t, eps = np.atleast_1d(data["t"]), np.atleast_1d(data["eps"])
    steps = np.diff(t)
    if t.size < 2 or not np.allclose(steps, steps[0], rtol=1e-6):
        raise UserError(f"{drive_csv}: t must be uniformly spaced with at least two samples")
    circuit = elaborate(parse(netlist.read_text(encoding="utf-8")))
    try:
        dev = circuit.device(device.lower())
    except KeyError:
        raise UserError(f"no quantum device named {device!r} in {netlist}") from None
    drive = DriveWaveform(eps, float(steps[0]), float(t[0]))
    s = cn_evolve(dev.fixed_point(float(eps[0])), drive, dev.params)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "x", "y", "z"])
    for tk, row in zip(drive.times, s):
        writer.writerow([_fmt(tk)] + [_fmt(v) for v in row])
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        out.write_text(buf.getvalue())
    return EXIT_OK


def example_paths() -> list:
    root = resources.files("qcosim") / "netlists"
    return sorted((Path(str(p)) for p in root.iterdir() if p.name.endswith(".cir")), key=lambda p: p.name)


def run_examples(copy_to: Path | None) -> int:
    for path in example_paths():
        title = parse(path.read_text()).title
        print(f"{path.name:28s} {title}")
        if copy_to is not None:
            copy_to.mkdir(parents=True, exist_ok=True)
            shutil.copy(path, copy_to / path.name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcosim", description="Circuit + quantum-dot co-simulator")
    parser.add_argument("--version", action="version", version=f"qcosim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every analysis in a netlist")
    p.add_argument("netlist", type=Path)
    p.add_argument("--out", type=Path, default=Path("qcosim_out"), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="NAME=VALUE", help="override a .param (repeatable)")
    p.add_argument("--plot", action="store_true", help="also write SVG plots")
    p.add_argument(
        "--oracle-compare", action="store_true", help="check each device against the reference solver"
    )
    p.add_argument("--threads", type=int, default=None, help="worker processes for sweeps")
    p.add_argument("--seedless", action="store_true", help="run twice and require identical output")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("oracle", help="integrate a drive CSV (t, eps) with the reference solver")
    p.add_argument("drive", type=Path, help="CSV with columns t, eps (Hz)")
    p.add_argument("--netlist", type=Path, required=True)
    p.add_argument("--device", required=True, help="device whose parameters are used")
    p.add_argument("--out", type=Path, default=None, help="Bloch CSV (default: stdout)")

    p = sub.add_parser("examples", help="list the bundled example netlists")
    p.add_argument("--copy", type=Path, default=None, metavar="DIR")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2),
        format="%(levelname)s: %(message)s",
    )
    try:
        if args.command == "run":
            threads = args.threads
            if threads is None:
                threads = int(os.environ.get("QCOSIM_THREADS", "1") or 1)
            config = RunConfig(
                input=args.netlist,
                out=args.out,
                format=args.format,
                plot=args.plot,
                overrides=_parse_overrides(args.overrides),
                verbosity=args.verbose,
                oracle_compare=args.oracle_compare,
                threads=max(1, threads),
                seedless=args.seedless,
            )
            return run(config)
        if args.command == "oracle":
            return run_oracle(args.drive, args.netlist, args.device, args.out)
        return run_examples(args.copy)
    except (UserError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except NetlistError as exc:
        where = getattr(args, "netlist", None) or ""
        print(f"error: {where}: {exc}" if where else f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (SimulationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
