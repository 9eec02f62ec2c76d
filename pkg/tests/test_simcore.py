import math
from types import SimpleNamespace

import numpy as np
import pytest

from oosdetect.netmodel import FaultSpec, NetworkCase, StageNetwork, build_admittance, initialize, load_case, lossless_variant
from oosdetect.simcore import (
    RUNAWAY_ANGLE,
    Scenario,
    derivatives,
    load_scenario,
    network_solve,
    prepare,
    rebuild,
    simulate,
    to_coi_frame,
)


def separating_group(tr):
    """Generators on the far side of the largest angle gap when the spread first exceeds π."""
    spread = tr.delta.max(axis=1) - tr.delta.min(axis=1)
    d = tr.delta[int(np.argmax(spread > math.pi))]
    order = np.argsort(d)
    k = int(np.argmax(np.diff(d[order])))
    ids = np.array(tr.case.gen_ids)
    lo, hi = set(ids[order[: k + 1]]), set(ids[order[k + 1:]])
    return min((lo, hi), key=len), float(np.diff(d[order])[k])


# --- swing-equation right-hand side ---------------------------------------

def test_equilibrium_has_zero_acceleration(ieee39):
    adm = build_admittance(ieee39)
    op = initialize(ieee39, adm)
    net = StageNetwork(ieee39, adm, op)
    _, dw, pe, _ = derivatives(op.delta, np.zeros(10), net, op.pm, ieee39.inertia)
    np.testing.assert_allclose(pe, op.pm, atol=1e-9)
    assert np.abs(dw).max() < 1e-9


def test_antisymmetric_mismatch_two_identical_machines():
    # Y_int = 0 gives Pe = 0, so the mismatch is just Pm
    net = SimpleNamespace(op=SimpleNamespace(emag=np.ones(2)), has_cp=False, Y_int=np.zeros((2, 2)))
    M = np.array([0.2, 0.2])
    _, dw, _, _ = derivatives(np.zeros(2), np.zeros(2), net, np.array([0.3, -0.3]), M)
    np.testing.assert_allclose(dw, [0.3 / 0.2, -0.3 / 0.2])


def test_coi_acceleration_sums_to_zero(runs):
    tr = runs["mode1"]
    case, adm, op, _ = prepare(tr.scenario)
    net = StageNetwork(case, adm["post"], op)
    k = tr.i_clear + 50
    _, dw, _, _ = derivatives(tr.delta[k], tr.omega[k], net, op.pm, case.inertia)
    assert abs(case.inertia @ dw) < 1e-12


def test_damping_reduces_acceleration():
    net = SimpleNamespace(op=SimpleNamespace(emag=np.ones(2)), has_cp=False, Y_int=np.zeros((2, 2)))
    M = np.array([1.0, 1.0])
    _, dw, _, _ = derivatives(np.zeros(2), np.array([1.0, -1.0]), net, np.zeros(2), M, damping=np.array([0.5, 0.5]))
    np.testing.assert_allclose(dw, [-0.5, 0.5])


# --- network solve ---------------------------------------------------------

def test_impedance_network_solve_residual(ieee39):
    adm = build_admittance(ieee39)
    op = initialize(ieee39, adm)
    net = StageNetwork(ieee39, adm, op)
    d = op.delta + np.random.default_rng(1).normal(0, 0.3, 10)
    out = network_solve(d, net)
    E = op.emag * np.exp(1j * d)
    resid = net.Yaug @ out["V"] - net.B @ E
    assert np.abs(resid).max() <= 1e-10


def _cp_case(four_bus, vthr=0.7):
    d = four_bus.to_dict()
    d["loads"][0]["model"] = "constant_power"
    d["loads"][0]["v_threshold"] = vthr
    return NetworkCase.from_dict(d)


def test_constant_power_load_reproduces_schedule(four_bus):
    case = _cp_case(four_bus)
    adm = build_admittance(case)
    op = initialize(case, adm)
    net = StageNetwork(case, adm, op)
    d = op.delta + np.array([0.1, -0.02])
    out = network_solve(d, net)
    assert out["p_load"][0] == pytest.approx(case.loads[0].p, abs=1e-8)
    assert not out["converted"][0]


def test_constant_power_load_converts_below_threshold(four_bus):
    case = _cp_case(four_bus, vthr=0.7)
    adm = build_admittance(case)
    op = initialize(case, adm)
    fault = build_admittance(case, "fault", FaultSpec(bus=2, admittance=50.0))
    net = StageNetwork(case, fault, op)
    E = op.emag * np.exp(1j * op.delta)
    # deep sag: the live constant-power iteration has no solution, the converted one does
    V, _ = net.solve(E, np.array([True, False]))
    conv = net.update_modes(V, net.initial_modes())
    assert conv[0]
    out = network_solve(op.delta, net, conv)
    vl = abs(out["V"][case.bus_index[2]])
    assert vl < 0.7
    # converted load follows the impedance that drew scheduled P at the threshold voltage
    assert out["p_load"][0] == pytest.approx(case.loads[0].p * (vl / 0.7) ** 2, rel=1e-9)
    # hysteresis: stays converted until voltage exceeds threshold + 0.05
    Vh = V.copy()
    Vh[case.bus_index[2]] = 0.72
    assert net.update_modes(Vh, conv)[0]
    Vh[case.bus_index[2]] = 0.76
    assert not net.update_modes(Vh, conv)[0]


# --- COI projection -------------------------------------------------------

def test_coi_gauge_invariance():
    g = np.random.default_rng(3)
    M = g.uniform(0.05, 1.0, 10)
    d, w = g.normal(size=10), g.normal(size=10)
    a = to_coi_frame(d, w, M)
    b = to_coi_frame(d + 1.7, w + 0.3, M)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    c = to_coi_frame(*a, M)
    np.testing.assert_allclose(c[0], a[0], atol=1e-15)
    assert abs(M @ a[0]) < 1e-12


def test_coi_single_machine():
    d, w = to_coi_frame(np.array([0.7]), np.array([2.0]), np.array([0.3]))
    assert d[0] == 0.0 and w[0] == 0.0


# --- scenarios and integration -------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(fault_duration=-0.1), dict(dt=0.0), dict(t_end=0.2, fault_duration=0.15),
])
def test_scenario_validation(kw):
    base = dict(fault_bus=3, fault_duration=0.1)
    base.update(kw)
    with pytest.raises(ValueError):
        Scenario(**base)


def test_scenario_json_round_trip():
    s = load_scenario("src/oosdetect/scenarios/mode2.json")
    assert Scenario.from_dict(s.to_dict()) == s


def test_zero_duration_fault_is_flat():
    tr = simulate(Scenario(fault_bus=24, fault_duration=0.0, t_end=2.0))
    assert np.abs(tr.omega).max() <= 1e-6


def test_mode2_group_33_36_separates(runs):
    tr = runs["mode2"]
    group, gap = separating_group(tr)
    assert group == {33, 34, 35, 36}


def test_mode1_generator_39_separates(runs):
    tr = runs["mode1"]
    group, gap = separating_group(tr)
    assert group == {39}
    assert tr.status == "rotor_runaway"
    assert np.abs(tr.delta[-1]).max() > RUNAWAY_ANGLE


def test_stable_scenario_stays_bounded(runs):
    tr = runs["stable"]
    assert tr.status == "complete" and tr.n == 10001
    spread = tr.delta.max(axis=1) - tr.delta.min(axis=1)
    assert spread.max() < math.pi


@pytest.mark.parametrize("key", ["mode1", "mode2", "stable"])
def test_coi_conservation(runs, key):
    tr = runs[key]
    M = tr.case.inertia
    assert np.abs(tr.omega @ M).max() < 1e-9
    assert np.abs(tr.delta @ M).max() < 1e-9


@pytest.mark.parametrize("key", ["mode1", "mode2", "stable"])
def test_time_grid_uniform(runs, key):
    tr = runs[key]
    assert np.allclose(np.diff(tr.t), tr.dt, rtol=0, atol=1e-12)
    assert tr.p_fwd.shape == (tr.n, len(tr.case.branches))
    assert tr.p_load.shape == (tr.n, len(tr.case.loads))
    assert tr.pe.shape == (tr.n, len(tr.case.generators))


def test_stage_switching_continuity(runs):
    tr = runs["mode1"]
    for k in (tr.i_fault, tr.i_clear):
        step = np.abs(tr.delta[k] - tr.delta[k - 1]).max()
        typical = np.abs(tr.delta[k + 1] - tr.delta[k]).max() + np.abs(tr.delta[k - 1] - tr.delta[k - 2]).max()
        assert step <= 2 * typical + 1e-12
        # electrical power jumps at the switch
        assert np.abs(tr.pe[k] - tr.pe[k - 1]).max() > 10 * np.abs(tr.pe[k - 1] - tr.pe[k - 2]).max()
    assert tr.stage[tr.i_fault - 1] == 0 and tr.stage[tr.i_fault] == 1 and tr.stage[tr.i_clear] == 2


@pytest.mark.parametrize("fault_bus, dur", [(3, 0.29), (24, 0.14)])
def test_step_halving_convergence(fault_bus, dur):
    s = Scenario(fault_bus=fault_bus, fault_duration=dur, t_end=2.0)
    a = simulate(s)
    b = simulate(s.with_(dt=5e-4))
    assert np.abs(a.delta[2000] - b.delta[4000]).max() <= 1e-4


def test_rebuild_reproduces_network_quantities(runs):
    tr = runs["stable"].truncated(800)
    rb = rebuild(tr.scenario, tr.delta, tr.omega)
    np.testing.assert_allclose(rb.V, tr.V, atol=1e-12)
    np.testing.assert_allclose(rb.p_fwd, tr.p_fwd, atol=1e-10)


def test_csv_columns(tmp_path, runs):
    tr = runs["stable"].truncated(5)
    p = tmp_path / "t.csv"
    tr.to_csv(p)
    header = p.read_text().splitlines()[0].split(",")
    case = tr.case
    assert header[0] == "t"
    assert header[1:11] == [f"delta_{g}" for g in case.gen_ids]
    assert header[11:21] == [f"omega_{g}" for g in case.gen_ids]
    assert header[21] == "vmag_1" and header[60] == "vang_1"
    assert header[99:101] == [f"p_{case.branches[0].name}_fwd", f"p_{case.branches[0].name}_rev"]
    assert header[-1] == f"pload_{case.loads[-1].bus}"
    assert len(p.read_text().splitlines()) == 6


def test_lossless_run_is_reproducible():
    case = lossless_variant(load_case("ieee39"))
    s = Scenario(fault_bus=3, fault_duration=0.1, t_end=0.5)
    a, b = simulate(s, case), simulate(s, case)
    np.testing.assert_array_equal(a.delta, b.delta)
