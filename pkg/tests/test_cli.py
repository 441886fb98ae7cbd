import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qcosim.cli import example_paths, main

EXAMPLES = {p.name: p for p in example_paths()}

SEB_STIFF = """* seb small-signal drive through a stiff source
V1 src 0 SIN(0 1u 1g)
R1 src g 50
QSEB1 g 0 alphaG=0.9 alphaR=0.1 gamma=0.5g temp=0.1
.tran 5p 20n
.print tran qseb1.z
"""


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def write(tmp_path, text, name="c.cir"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_missing_file_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.cir"
    assert main(["run", str(missing), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_syntax_error_is_positioned(tmp_path, capsys):
    path = write(tmp_path, "* t\nR1 a 0 50\nZ9 a 0 1\n")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "column 1" in err
    assert "Traceback" not in err


def test_bad_override(tmp_path, capsys):
    path = write(tmp_path, "* t\nV1 a 0 1\nR1 a 0 1\n.tran 1n 2n\n.print a.v\n")
    assert main(["run", str(path), "--set", "nothere=1", "--out", str(tmp_path / "o")]) == 1
    assert "nothere" in capsys.readouterr().err
    assert main(["run", str(path), "--set", "v1", "--out", str(tmp_path / "o")]) == 1


def test_numeric_failure_exit_2(tmp_path, capsys):
    path = write(tmp_path, "* t\nV1 a 0 1\nV2 a 0 2\nR1 a 0 1\n.tran 1n 2n\n.print a.v\n")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_no_print_is_user_error(tmp_path):
    path = write(tmp_path, "* t\nV1 a 0 1\nR1 a 0 1\n.tran 1n 2n\n")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1


def test_seb_admittance_columns(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(EXAMPLES["fig3_seb_admittance.cir"]), "--out", str(out)]) == 0
    header, rows = read_csv(out / "fig3_seb_admittance_acq.csv")
    assert header == ["vgr", "f", "re_y", "im_y"]
    assert rows.shape == (201, 4)
    # peak at zero detuning, symmetric lineshape
    mag = np.hypot(rows[:, 2], rows[:, 3])
    assert abs(rows[np.argmax(mag), 0]) < 1e-12
    assert np.allclose(mag, mag[::-1], rtol=1e-3)
    manifest = json.loads((out / "fig3_seb_admittance_manifest.json").read_text())
    assert set(manifest) >= {"version", "input_sha256", "outputs", "wall_time_s"}
    assert "fig3_seb_admittance_acq.csv" in manifest["outputs"]


def test_byte_identical_reruns(tmp_path):
    src = EXAMPLES["fig3_seb_admittance.cir"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(src), "--out", str(a)]) == 0
    assert main(["run", str(src), "--out", str(b), "--seedless"]) == 0
    assert (a / "fig3_seb_admittance_acq.csv").read_bytes() == (b / "fig3_seb_admittance_acq.csv").read_bytes()


def test_json_format(tmp_path):
    path = write(tmp_path, "* t\nV1 a 0 SIN(0 1 1g)\nR1 a b 1k\nC1 b 0 1p\n.tran 10p 1n\n.print b.v r1.i\n")
    assert main(["run", str(path), "--format", "json", "--out", str(tmp_path / "o")]) == 0
    payload = json.loads((tmp_path / "o" / "c_tran.json").read_text())
    assert payload["columns"] == ["t", "v", "i"]
    assert len(payload["rows"]) > 10


def test_plot_written(tmp_path):
    path = write(tmp_path, "* t\nV1 a 0 SIN(0 1 1g)\nR1 a b 1k\nC1 b 0 1p\n.tran 10p 1n\n.print b.v\n")
    assert main(["run", str(path), "--plot", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "c_tran.svg").read_text().lstrip().startswith("<?xml")


def test_multiplier_n3_override(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(EXAMPLES["fig7_multiplier_n2.cir"]), "--set", "n=3", "--out", str(out)]) == 0
    header, rows = read_csv(out / "fig7_multiplier_n2_harm.csv")
    assert header[:3] == ["k", "re_out_v", "im_out_v"]
    mag = np.hypot(rows[:, 1], rows[:, 2])
    assert np.argmax(mag[1:]) + 1 == 3


def test_oracle_compare_pass(tmp_path, capsys):
    path = write(tmp_path, SEB_STIFF)
    assert main(["run", str(path), "--oracle-compare", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "c_oracle.json").read_text())
    assert report["pass"] and report["max_deviation"] < 1e-4
    assert "PASS" in capsys.readouterr().out


def test_oracle_compare_lzsm(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(EXAMPLES["fig5_lzsm.cir"]), "--oracle-compare", "--out", str(out)]) == 0
    assert json.loads((out / "fig5_lzsm_oracle.json").read_text())["max_deviation"] < 1e-4


def test_oracle_refuses_soft_source(tmp_path, capsys):
    path = write(tmp_path, SEB_STIFF.replace("R1 src g 50", "R1 src g 1meg"))
    assert main(["run", str(path), "--oracle-compare", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "source impedance" in err and "ohm" in err


def test_oracle_subcommand(tmp_path):
    t = np.arange(0, 2001) * 1e-12
    eps = 2e9 * np.sin(2 * np.pi * 1e9 * t)
    drive = tmp_path / "drive.csv"
    np.savetxt(drive, np.column_stack([t, eps]), delimiter=",", header="t,eps", comments="")
    net = write(tmp_path, "* d\nV1 g 0 0\nQDQD1 g 0 a11=1 a22=1 tc=1g gcr=0.5g temp=0.05\n")
    out = tmp_path / "bloch.csv"
    assert main(["oracle", str(drive), "--netlist", str(net), "--device", "QDQD1", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["t", "x", "y", "z"] and rows.shape == (2001, 4)
    assert np.max(np.linalg.norm(rows[:, 1:], axis=1)) <= 1 + 1e-9
    assert main(["oracle", str(drive), "--netlist", str(net), "--device", "qx"]) == 1


def test_examples_listing(tmp_path, capsys):
    assert main(["examples", "--copy", str(tmp_path)]) == 0
    listed = capsys.readouterr().out
    for name in EXAMPLES:
        assert name in listed
        assert (tmp_path / name).is_file()


def test_console_script_version():
    done = subprocess.run([sys.executable, "-m", "qcosim.cli", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.startswith("qcosim ")


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_every_example_runs(name, tmp_path):
    assert main(["run", str(EXAMPLES[name]), "--out", str(tmp_path)]) == 0
    assert any(tmp_path.glob(f"{EXAMPLES[name].stem}_*.csv"))
