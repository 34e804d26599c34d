import math
import warnings

import pytest

from mescosim import grid
from mescosim.grid import (
    Branch, CyclicTopology, DisconnectedTopology, GridModel, Injection, TimeOutOfRange,
    UnknownBus, UnknownBusReference, apply_profiles, load_profiles, load_topology,
    solve_power_flow, voltage_rise,
)

from oracles import newton_raphson


def two_bus(r=0.1, x=0.05):
    return GridModel("S", ["S", "B"], [Branch("S", "B", r, x)])


def closed_form_two_bus(v0, r, x, p_w, q_var):
    """Receiving-end magnitude from the biquadratic of a single line."""
    b = 2 * (r * p_w + x * q_var) - v0 ** 2
    c = (r * r + x * x) * (p_w * p_w + q_var * q_var)
    return math.sqrt((-b + math.sqrt(b * b - 4 * c)) / 2)


def test_two_bus_against_closed_form():
    st = solve_power_flow(two_bus(), [Injection("B", 10.0, 0.0)])
    assert st.converged
    expected = closed_form_two_bus(240.0, 0.1, 0.05, 10000 / 3, 0.0)
    assert expected == pytest.approx(238.6019566734637, abs=1e-9)
    assert st.magnitude("B") == pytest.approx(expected, abs=240e-6)


def test_two_bus_against_nr():
    v = newton_raphson(["S", "B"], "S", [("S", "B", 0.1, 0.05)], {"B": (10.0, 3.0)})
    st = solve_power_flow(two_bus(), [Injection("B", 10.0, 3.0)])
    assert abs(st.voltages[st.buses.index("B")] - v["B"]) / (400 / math.sqrt(3)) < 1e-6


def test_flat_start_exact():
    model = load_topology()
    st = solve_power_flow(model, [])
    assert all(st.magnitude(b) == 240.0 for b in model.buses)
    assert all(st.angle(b) == 0.0 for b in model.buses)


def test_generation_raises_voltage():
    st = solve_power_flow(two_bus(), [Injection("B", -20.0)])
    assert voltage_rise(st, "B") > 0
    assert voltage_rise(st, "S") == 0.0


def test_cycle_detected():
    with pytest.raises(CyclicTopology):
        GridModel("A", ["A", "B", "C"], [Branch("A", "B", 1, 1), Branch("B", "C", 1, 1), Branch("C", "A", 1, 1)])


def test_disconnected_detected():
    with pytest.raises(DisconnectedTopology):
        GridModel("A", ["A", "B", "C", "D"], [Branch("A", "B", 1, 1), Branch("C", "D", 1, 1)])


def test_unknown_reference():
    with pytest.raises(UnknownBusReference):
        GridModel("A", ["A", "B"], [Branch("A", "Z", 1, 1)])
    with pytest.raises(UnknownBus):
        solve_power_flow(two_bus(), [Injection("Z", 1.0)])


def test_not_converged_flag():
    # Heavy load on a weak line has no power-flow solution.
    st = solve_power_flow(two_bus(r=5.0, x=5.0), [Injection("B", 500.0, 100.0)])
    assert not st.converged and st.iterations == 50


def test_shipped_topology():
    model = load_topology()
    assert model.slack == "R0"
    assert model.resolve("PCC2") == model.resolve("BESS")
    assert model.resolve("CHP") == model.resolve("EHP") == model.resolve("PCC4")
    text = model.describe()
    assert "PCC2" in text and "PCC4" in text


def test_bad_cable():
    cfg = {"slack": "A", "buses": ["A", "B"], "branches": [{"from": "A", "to": "B", "cable": "X", "length_m": 1}]}
    with pytest.raises(grid.TopologyError):
        load_topology(cfg)


def test_profiles_shape():
    model = load_topology()
    prof = load_profiles("overvoltage")
    inj = apply_profiles(model, prof, 0.0)
    loads = [i for i in inj if i.p_kw > 0]
    assert all(i.q_kvar == pytest.approx(i.p_kw * math.tan(math.acos(0.95))) for i in loads)
    assert prof.end_time() == 960.0
    assert load_profiles("undervoltage").end_time() == 1680.0


def test_profile_past_end_warns():
    model = load_topology()
    prof = load_profiles("overvoltage")
    with pytest.warns(TimeOutOfRange):
        late = apply_profiles(model, prof, 2000.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert late == apply_profiles(model, prof, 960.0)


def test_profiles_reject_unsorted():
    with pytest.raises(ValueError):
        grid.ProfileSet.from_dict({"loads": {"L": [[0, 1], [0, 2]]}})


def test_shipped_overvoltage_peak_exceeds_band():
    model = load_topology()
    st = solve_power_flow(model, apply_profiles(model, load_profiles("overvoltage"), 300.0))
    assert voltage_rise(st, model.resolve("PCC2")) > 5.0
    assert voltage_rise(st, model.resolve("PCC4")) > 5.0
    assert st.mismatch_pu < 1e-6
