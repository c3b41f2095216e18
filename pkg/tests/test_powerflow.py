import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from feederlab.network import LoadSpec
from feederlab.powerflow import (
    PowerFlowDivergence,
    SolveOptions,
    branch_currents,
    max_load_current,
    sequence_components,
    solution_to_csv,
    solve_powerflow,
)
from feederlab.scenario import ProfileSet
from feederlab.cases import load_case

from datetime import datetime, timedelta

from netfactory import chain_net, mixed_net, scaled_scenario, unity_scenario
from oracles import dense_newton_powerflow, node_order

ROT = np.array([1.0, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)])


def oracle_error_pu(net, scen, sol):
    v_oracle, _ = dense_newton_powerflow(net, scen)
    v_base = np.array([net.buses[b].v_base_ln for b, _ in node_order(net)])
    return float(np.max(np.abs(sol.v - v_oracle) / v_base))


class TestBasics:
    def test_source_only_no_load(self):
        net = chain_net(3, load_kw=0.0, load_kvar=0.0)
        net = dataclasses.replace(net, loads={})
        sol = solve_powerflow(net)
        e = 4.16e3 / math.sqrt(3)
        for bus in net.buses:
            assert np.abs(sol.v_bus(bus) - e * ROT).max() / e < 1e-6
        for lid in net.lines:
            i_f, i_t = branch_currents(sol, lid)
            assert np.abs(i_f).max() < 1e-3
            assert np.abs(i_t).max() < 1e-3

    def test_two_bus_divider_closed_form(self):
        # decoupled phases, constant-Z load: exact per-phase voltage divider
        from netfactory import code3
        net = chain_net(2, load_model="constant_z", load_kw=150.0, load_kvar=50.0)
        code = code3(rm=0.0, xm=0.0)
        net = dataclasses.replace(net, line_codes={"c3": code})
        opts = SolveOptions(ground_leak_s=0.0)
        sol = solve_powerflow(net, None, opts)

        v_nom = 4.16e3 / math.sqrt(3)
        s_ph = (150.0 + 50.0j) / 3 * 1e3
        z_load = 1.0 / (np.conj(s_ph) / v_nom ** 2)
        z_line = 0.3 + 0.6j
        z_src = 0.05 + 0.35j
        expected = v_nom * ROT * z_load / (z_src + z_line + z_load)
        got = sol.v_bus("b2")
        assert np.abs(got - expected).max() / v_nom < 1e-9

        i_f, _ = branch_currents(sol, "l1")
        i_expected = v_nom * ROT / (z_src + z_line + z_load)
        assert np.abs(i_f - i_expected).max() < 1e-6

    def test_branch_current_ohms_law(self):
        net = chain_net(3)
        sol = solve_powerflow(net, unity_scenario(net))
        ln = net.lines["l2"]
        code = net.line_codes[ln.code]
        z = (np.array(code.r_matrix) + 1j * np.array(code.x_matrix)) * ln.length_km
        i_f, i_t = branch_currents(sol, "l2")
        dv = sol.v_bus("b2") - sol.v_bus("b3")
        assert np.abs(z @ i_f - dv).max() < 1e-6
        assert np.abs(i_f + i_t).max() < 1e-9  # series-only: ends sum to zero

    def test_kcl_at_junction(self):
        net = mixed_net(0)
        scen = unity_scenario(net)
        sol = solve_powerflow(net, scen)
        # m1 joins lm1 (in), lm2 and llat (out) plus a constant-Z load
        into = -sol.branch_current("lm1")[1]  # current out of m1 into lm1's to-end, negated
        out_ = sol.branch_current("lm2")[0]
        lat = sol.branch_current("llat")[0]
        v = sol.v_bus("m1")
        s_ph = (20.0 + 5.0j) * 1e3  # per phase
        v_nom = net.buses["m1"].v_base_ln
        y_load = np.conj(s_ph) / v_nom ** 2
        i_load = y_load * v
        residual = into - out_ - lat - i_load
        # the only unmodeled term is the tiny ground leak at the bus
        assert np.abs(residual - v * 1e-8).max() < 1e-6

    def test_kcl_residual_invariant(self):
        for make in (lambda: chain_net(4), lambda: mixed_net(1)):
            net = make()
            sol = solve_powerflow(net, unity_scenario(net))
            i_base = 1e6 / (3.0 * sol.index.v_base)
            assert np.all(sol.kcl_residual_amps() <= 10 * 1e-6 * i_base)


class TestOracleAgreement:
    @pytest.mark.parametrize("variant", [0, 1, 2])
    def test_mixed_nets_match_oracle(self, variant):
        net = mixed_net(variant)
        for scale in (0.4, 1.0):
            scen = scaled_scenario(net, scale, der_scale=0.7 * scale)
            sol = solve_powerflow(net, scen)
            assert oracle_error_pu(net, scen, sol) < 1e-6

    def test_delta_loads_match_oracle(self):
        net = chain_net(5, load_conn="delta", load_kw=120.0)
        scen = unity_scenario(net)
        sol = solve_powerflow(net, scen)
        assert oracle_error_pu(net, scen, sol) < 1e-6

    def test_constant_z_scaling_against_oracle(self):
        net = chain_net(4, load_model="constant_z")
        for alpha in (0.5, 2.0):
            scen = scaled_scenario(net, alpha)
            sol = solve_powerflow(net, scen)
            assert oracle_error_pu(net, scen, sol) < 1e-6
        # heavier constant-Z load draws more current
        i_lo = np.abs(branch_currents(
            solve_powerflow(net, scaled_scenario(net, 0.5)), "l1")[0]).max()
        i_hi = np.abs(branch_currents(
            solve_powerflow(net, scaled_scenario(net, 2.0)), "l1")[0]).max()
        assert i_hi > 1.5 * i_lo


class TestDeterminism:
    def test_bitwise_identical(self):
        net = mixed_net(0)
        scen = unity_scenario(net)
        a = solve_powerflow(net, scen)
        b = solve_powerflow(net, scen)
        assert np.array_equal(a.v, b.v)

    def test_warm_start_same_fixed_point(self):
        net = chain_net(4)
        scen = unity_scenario(net)
        cold = solve_powerflow(net, scen)
        warm = solve_powerflow(net, scen, warm_start=cold.v)
        assert np.abs(warm.v - cold.v).max() / cold.index.v_base.max() < 1e-6


class TestDivergence:
    def test_overload_reports_worst_bus(self):
        net = chain_net(3, load_kw=60000.0, load_kvar=30000.0)
        with pytest.raises(PowerFlowDivergence) as err:
            solve_powerflow(net, unity_scenario(net))
        assert err.value.worst_bus in net.buses
        assert err.value.mismatch_pu > 0


class TestSequenceComponents:
    def test_balanced_set(self):
        v0, v1, v2 = sequence_components(1.0, ROT[1], ROT[2])
        assert abs(v0) < 1e-12
        assert v1 == pytest.approx(1.0)
        assert abs(v2) < 1e-12

    def test_identical_phasors(self):
        v0, v1, v2 = sequence_components(1.0, 1.0, 1.0)
        assert v0 == pytest.approx(1.0)
        assert abs(v1) < 1e-12 and abs(v2) < 1e-12

    def test_single_phase_splits_in_thirds(self):
        v0, v1, v2 = sequence_components(1.0, 0.0, 0.0)
        assert abs(v0) == pytest.approx(1 / 3)
        assert abs(v1) == pytest.approx(1 / 3)
        assert abs(v2) == pytest.approx(1 / 3)

    @given(st.tuples(*[st.floats(-1e3, 1e3) for _ in range(12)]))
    def test_linearity(self, vals):
        x = [complex(vals[0], vals[1]), complex(vals[2], vals[3]),
             complex(vals[4], vals[5])]
        y = [complex(vals[6], vals[7]), complex(vals[8], vals[9]),
             complex(vals[10], vals[11])]
        s_xy = sequence_components(*(a + b for a, b in zip(x, y)))
        s_x = sequence_components(*x)
        s_y = sequence_components(*y)
        for k in range(3):
            assert s_xy[k] == pytest.approx(s_x[k] + s_y[k], abs=1e-9)


class TestCsvExport:
    def test_rows_and_header(self):
        net = chain_net(3)
        sol = solve_powerflow(net, unity_scenario(net))
        csv = solution_to_csv(sol)
        lines = csv.strip().splitlines()
        assert lines[0] == "kind,id,phase,magnitude,angle_deg"
        n_bus_rows = sum(len(b.phases) for b in net.buses.values())
        n_line_rows = 2 * sum(len(ln.phases) for ln in net.lines.values())
        assert len(lines) == 1 + n_bus_rows + n_line_rows


def hourly_profiles(load, pv=None, wind=None):
    hours = len(load)
    t0 = datetime(2030, 1, 1)
    return ProfileSet(
        tuple(t0 + timedelta(hours=h) for h in range(hours)),
        {"load": np.array(load, dtype=float),
         "pv": np.array(pv if pv is not None else [0.0] * hours),
         "wind": np.array(wind if wind is not None else [0.0] * hours)})


class TestMaxLoadCurrent:
    def test_flat_profile_matches_single_solve(self):
        net = chain_net(2, devices=(1,), load_kw=100.0, load_kvar=0.0)
        profiles = hourly_profiles([1.0, 1.0, 1.0])
        worst = max_load_current(net, profiles, "d1")
        scen = scaled_scenario(net, 1.0)
        v_oracle, pos = dense_newton_powerflow(net, scen)
        code = net.line_codes["c3"]
        z = np.array(code.r_matrix) + 1j * np.array(code.x_matrix)
        nf = [pos[("b1", p)] for p in "abc"]
        nt = [pos[("b2", p)] for p in "abc"]
        i_oracle = np.linalg.inv(z) @ (v_oracle[nf] - v_oracle[nt])
        assert np.abs(worst - np.abs(i_oracle)).max() < 1e-6 * np.abs(i_oracle).max() + 1e-9

    def test_peak_hour_scales_constant_z(self):
        net = chain_net(2, devices=(1,), load_model="constant_z")
        base = max_load_current(net, hourly_profiles([1.0]), "d1")
        peaked = max_load_current(net, hourly_profiles([0.8, 1.2, 1.0]), "d1")
        # constant-Z at 1.2x admittance: current within solver tolerance of
        # the directly solved 1.2x case
        direct = max_load_current(net, hourly_profiles([1.2]), "d1")
        assert np.abs(peaked - direct).max() < 1e-6 * direct.max()
        assert peaked.max() > base.max()

    def test_zero_load_is_zero_current(self):
        net = chain_net(3, devices=(1,))
        worst = max_load_current(net, hourly_profiles([0.0, 0.0]), "d1")
        assert worst.max() < 1e-3

    def test_empty_profiles_error(self):
        net = chain_net(2, devices=(1,))
        with pytest.raises(ValueError):
            max_load_current(net, hourly_profiles([]), "d1")


class TestBundledCases:
    def test_ieee34_solves_with_sane_voltages(self):
        net = load_case("ieee34")
        sol = solve_powerflow(net, unity_scenario(net))
        v_pu = np.abs(sol.v) / sol.index.v_base
        assert 0.80 < v_pu.min() < v_pu.max() < 1.10

    def test_ieee37_solves_ungrounded(self):
        net = load_case("ieee37")
        sol = solve_powerflow(net, unity_scenario(net))
        v_pu = np.abs(sol.v) / sol.index.v_base
        assert 0.90 < v_pu.min() < v_pu.max() < 1.05
