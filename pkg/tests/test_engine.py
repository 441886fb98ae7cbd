import math

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from qcosim.circuit import load
from qcosim.constants import E_OVER_H
from qcosim.engine import (
    MnaSystem,
    TopologyError,
    dc_operating_point,
    transient,
)
from qcosim.oracle import DriveWaveform, cn_evolve

TWO_PI = 2 * math.pi

SEB_RC = """* seb behind a series resistor
V1 src 0 SIN(0 20u 1g)
R1 src g 50
CG g 0 10f
QSEB1 g 0 alphaG=0.9 alphaR=0.1 gamma=0.5g temp=0.1
"""

DQD_PAIR = """* dqd between two driven gates
V1 s1 0 SIN(10u 30u 1g)
V2 s2 0 SIN(0 15u 1g 90)
R1 s1 a 20
R2 s2 b 20
QDQD1 a b a11=0.8 a12=0.1 a21=0.15 a22=0.7 tc=2g gcr=0.5g gphi=0.2g temp=0.05
"""


def fd_jacobian(system, u, a0, t=0.0, rel=1e-6):
    J = np.zeros((system.n, system.n))
    for j in range(system.n):
        h = rel * max(1.0, abs(u[j]))
        if system.kinds[j] == "v":
            h = 1e-9
        up, um = u.copy(), u.copy()
        up[j] += h
        um[j] -= h
        J[:, j] = (system.residual(up, a0 * up, t) - system.residual(um, a0 * um, t)) / (2 * h)
    return J


class TestDc:
    def test_divider(self):
        op = dc_operating_point(load("* d\nV1 a 0 1\nR1 a b 1k\nR2 b 0 1k\n"))
        assert op.voltage("b") == pytest.approx(0.5, rel=1e-12)
        assert not op.gmin_used

    def test_inductor_is_short(self):
        op = dc_operating_point(load("* d\nV1 a 0 2\nR1 a b 1k\nL1 b 0 1m\n"))
        assert op.voltage("b") == pytest.approx(0.0, abs=1e-15)

    def test_capacitor_only_node_uses_gmin(self):
        op = dc_operating_point(load("* d\nV1 a 0 1\nC1 a b 1p\nC2 b 0 1p\n"))
        assert op.gmin_used
        assert np.isfinite(op.voltage("b"))

    def test_seb_degeneracy_half_filled(self):
        op = dc_operating_point(load("* d\nV1 g 0 0\nQSEB1 g 0 alphaG=0.9 alphaR=0.1 gamma=0.5g temp=0.1\n"))
        assert 0.5 * (1 + op.bloch("qseb1")[2]) == pytest.approx(0.5, abs=1e-12)

    def test_seb_fixed_point_matches_device(self):
        c = load("* d\nV1 g 0 30u\nQSEB1 g 0 alphaG=0.9 alphaR=0.1 gamma=0.5g temp=0.1\n")
        op = dc_operating_point(c)
        eps = 0.9 * E_OVER_H * 30e-6
        assert op.detuning("qseb1") == pytest.approx(eps, rel=1e-12)
        assert np.allclose(op.bloch("qseb1"), c.device("qseb1").fixed_point(eps), atol=1e-12)

    def test_dqd_far_detuned_polarized(self):
        # eps = 20 tc at 100 mK: ground state almost fully polarized
        tc = 1e9
        v = 20 * tc / E_OVER_H
        c = load(f"* d\nV1 g 0 {v!r}\nQDQD1 g 0 a11=1 a22=1 tc=1g gcr=0.5g temp=0.1\n")
        s = dc_operating_point(c).bloch("qdqd1")
        assert np.linalg.norm(s) > 0.999
        # the polarization sits on the eigen axis (2tc, 0, -eps)/dE
        axis = np.array([2 * tc, 0.0, -20 * tc]) / math.hypot(2 * tc, 20 * tc)
        assert np.allclose(s / np.linalg.norm(s), -axis, atol=1e-9)

    def test_source_loop_is_topology_error(self):
        with pytest.raises(TopologyError):
            dc_operating_point(load("* d\nV1 a 0 1\nV2 a 0 2\nR1 a 0 1\n"))

    def test_inductor_across_source(self):
        with pytest.raises(TopologyError):
            dc_operating_point(load("* d\nV1 a 0 1\nL1 a 0 1n\n"))


class TestAssembly:
    @pytest.mark.parametrize("text", [SEB_RC, DQD_PAIR], ids=["seb", "dqd"])
    def test_jacobian_matches_finite_difference(self, text, rng):
        system = MnaSystem(load(text))
        for _ in range(3):
            u = np.zeros(system.n)
            net = system.kinds == "v"
            u[net] = rng.normal(0, 40e-6, net.sum())
            u[system.kinds == "i"] = rng.normal(0, 1e-6, (system.kinds == "i").sum())
            s = rng.normal(size=3)
            for slot in system.slots:
                u[slot.states] = 0.9 * s / np.linalg.norm(s)
            a0 = 2.0 / 1e-12
            J = system.jacobian(u, a0)
            J_fd = fd_jacobian(system, u, a0)
            scale = np.max(np.abs(J), axis=1, keepdims=True)
            assert np.max(np.abs(J - J_fd) / scale) < 1e-5

    def test_layout_blocks(self):
        system = MnaSystem(load(DQD_PAIR))
        lay = system.layout()
        assert lay.block("quantum/quantum").shape == (3, 3)
        assert lay.block("network/quantum").shape == (system.n_network, 3)
        qn = lay.block("quantum/network")
        cols = np.flatnonzero(qn.any(axis=0))
        assert sorted(system.labels[c] for c in cols) == ["a.v", "b.v"]
        nq = lay.block("network/quantum")
        rows = np.flatnonzero(nq.any(axis=1))
        assert sorted(system.labels[r] for r in rows) == ["a.v", "b.v"]

    def test_pattern_covers_jacobian(self, rng):
        system = MnaSystem(load(DQD_PAIR))
        pattern = system.layout().pattern
        for _ in range(5):
            u = rng.normal(0, 1e-4, system.n)
            J = system.jacobian(u, rng.uniform(1e9, 1e13))
            assert not np.any((J != 0) & ~pattern)

    def test_charge_rows_in_q(self):
        c = load(SEB_RC)
        system = MnaSystem(c)
        g = system.node_index("g")
        row = system.Q[g, system.slot("qseb1").states]
        assert np.allclose(row, [0, 0, -0.9 * 0.5 * 1.602176634e-19])


class TestTransient:
    @pytest.mark.parametrize("steps_per_tau, bound", [(500, 2e-6), (1000, 1e-6)])
    def test_rc_discharge(self, steps_per_tau, bound):
        # trapezoidal global error over 5 tau is about 5 (h/tau)^2 / 12
        R, C = 1e3, 1e-9
        tau = R * C
        c = load(f"* rc\nV1 in 0 PULSE(1 0 0 0 0 1 2)\nR1 in out {R!r}\nC1 out 0 {C!r}\n")
        ts = transient(c, tau / steps_per_tau, 5 * tau)
        v = ts.voltage("out")
        exact = np.exp(-ts.t / tau)
        assert v[0] == pytest.approx(1.0, rel=1e-12)
        assert np.max(np.abs(v - exact) / exact) < bound

    def test_breakpoints_are_hit(self):
        c = load("* p\nV1 a 0 PULSE(0 1 1n 0.2n 0.3n 2n 10n)\nR1 a b 1k\nC1 b 0 1p\n")
        ts = transient(c, 50e-12, 15e-9)
        for bp in (1e-9, 1.2e-9, 3.2e-9, 3.5e-9, 11e-9, 11.2e-9, 13.2e-9, 13.5e-9):
            assert np.min(np.abs(ts.t - bp)) < 1e-20
        assert ts.t[-1] == pytest.approx(15e-9, rel=1e-14)

    def test_step_bounds(self):
        c = load(SEB_RC)
        ts = transient(c, 2e-12, 2e-9)
        dt = np.diff(ts.t)
        assert dt.max() <= 2e-12 * (1 + 1e-9)
        assert dt.min() >= 2e-15 * (1 - 1e-9)

    def test_residual_vanishes_at_accepted_points(self):
        c = load(SEB_RC)
        ts = transient(c, 2e-12, 2e-9)
        scale = np.max(np.abs(ts.system.G), axis=1) * np.max(np.abs(ts.u[:, : ts.system.n_network]), initial=1e-6)
        for k in range(1, ts.t.size, 97):
            r = ts.system.residual(ts.u[k], ts.udot[k], ts.t[k])
            assert np.all(np.abs(r[: ts.system.n_network]) <= 1e-9 * scale[: ts.system.n_network] + 1e-18)
            assert np.max(np.abs(r[ts.system.n_network :])) < 1e-6 * 2 * math.pi * 0.5e9

    def test_kcl_at_gate_node(self):
        # resistor current feeds the gate capacitor and the device gate terminal
        ts = transient(load(SEB_RC), 2e-12, 3e-9)
        i_r = ts.quantity("r1.i")
        i_c = ts.quantity("cg.i")
        i_dev = ts.quantity("qseb1.i1")
        mask = ts.t > 0.5e-9
        err = np.abs(i_r - i_c - i_dev)[mask]
        assert err.max() < 1e-6 * np.abs(i_r[mask]).max()

    def test_lossy_tank_energy_decays(self):
        C, L = 1e-12, 1e-9
        c = load(f"* tank\nV1 in 0 PULSE(1 0 0 0 0 1 2)\nR1 in a 50\nC1 a 0 {C!r}\nL1 a 0 {L!r}\n")
        ts = transient(c, 1e-12, 2e-9)
        energy = 0.5 * C * ts.voltage("a") ** 2 + 0.5 * L * ts.quantity("l1.i") ** 2
        assert energy[0] == pytest.approx(0.5 * L * (1 / 50) ** 2, rel=1e-9)
        assert np.all(np.diff(energy) <= 1e-9 * energy[0])
        assert energy[-1] < 0.01 * energy[0]

    def test_step_halving_agrees(self):
        c = load(SEB_RC)
        # at 1 GHz the step ceiling, not LTE control, sets the global error;
        # 2 ps resolves the drive finely enough for the 10 x reltol bound
        coarse = transient(c, 2e-12, 3e-9)
        fine = transient(c, 1e-12, 3e-9)
        # cubic interpolation keeps the resampling error well below reltol
        z_coarse = CubicSpline(coarse.t, coarse.quantity("qseb1.z"))(fine.t)
        assert np.max(np.abs(z_coarse - fine.quantity("qseb1.z"))) < 1e-5

    @pytest.mark.parametrize("text, device", [(SEB_RC, "qseb1"), (DQD_PAIR, "qdqd1")])
    def test_charge_conserved_over_period(self, text, device):
        # periodic steady state: integrated terminal currents return to zero
        ts = transient(load(text), 1e-12, 12e-9).window(10e-9)
        for k in range(2):
            i = ts.terminal_current(device, k)
            charge = CubicSpline(ts.t, i).integrate(10e-9, 11e-9)
            assert abs(charge) < 1e-6 * 1.602176634e-19

    def test_terminal_currents_follow_generator(self):
        # e * charge_row . (A s + b) at the stored state equals the reported current
        ts = transient(load(DQD_PAIR), 2e-12, 2e-9)
        dev = ts.system.circuit.device("qdqd1")
        s = ts.bloch("qdqd1")
        gen = dev.generator(ts.detuning("qdqd1"))
        rate = np.einsum("nij,nj->ni", gen.A, s) + gen.b
        for k in range(2):
            expected = 1.602176634e-19 * rate @ dev.charge_rows[k]
            got = ts.terminal_current("qdqd1", k)
            assert np.max(np.abs(got - expected)[1:]) < 1e-6 * np.abs(expected).max()

    def test_tstart_window(self):
        c = load(SEB_RC)
        ts = transient(c, 2e-12, 2e-9, tstart=1e-9)
        assert ts.t[0] >= 1e-9 - 1e-18

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            transient(load(SEB_RC), 1e-12, 0.0)

    @pytest.mark.parametrize("gphi", [0.0, 0.3e9])
    def test_matches_open_loop_oracle(self, gphi):
        # an ideal source leaves no feedback, so the oracle sees the same detuning
        text = (
            "* dqd on an ideal source\n"
            "V1 g 0 SIN(5u 60u 1g)\n"
            f"QDQD1 g 0 a11=0.5 a22=0.5 tc=1g gcr=0.3g gphi={gphi!r} temp=0.05\n"
        )
        c = load(text)
        ts = transient(c, 2e-12, 4e-9)
        lever = 0.5 * E_OVER_H
        dt = 0.2e-12
        drive = DriveWaveform.from_function(lambda t: lever * (5e-6 + 60e-6 * np.sin(TWO_PI * 1e9 * t)), 4e-9, dt)
        ref = cn_evolve(ts.bloch("qdqd1")[0], drive, c.device("qdqd1").params)
        ref_on_engine = np.stack([np.interp(ts.t, drive.times, ref[:, k]) for k in range(3)], axis=-1)
        assert np.max(np.linalg.norm(ts.bloch("qdqd1") - ref_on_engine, axis=1)) < 1e-3

    def test_bloch_vector_stays_physical(self):
        ts = transient(load(DQD_PAIR), 2e-12, 3e-9)
        assert np.max(np.linalg.norm(ts.bloch("qdqd1"), axis=1)) <= 1 + 1e-6
