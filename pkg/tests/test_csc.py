import pytest
from hypothesis import given, strategies as st

from mescosim import csc
from mescosim.csc import (
    ControllerConfig, ControllerState, HysteresisBand, Mode, OVER_BAND, ScenarioKind, Sense,
    UNDER_BAND, hysteresis_step, reactive_support,
)

from oracles import hysteresis_oracle


def test_band_validation():
    with pytest.raises(ValueError):
        HysteresisBand(0.0, 5.0, Sense.OVER)
    with pytest.raises(ValueError):
        HysteresisBand(0.0, -5.0, Sense.UNDER)


@pytest.mark.parametrize("band, mode, dev, out", [
    (OVER_BAND, Mode.INACTIVE, 5.0, Mode.INACTIVE),
    (OVER_BAND, Mode.INACTIVE, 5.01, Mode.ACTIVE),
    (OVER_BAND, Mode.ACTIVE, 0.0, Mode.ACTIVE),
    (OVER_BAND, Mode.ACTIVE, -0.01, Mode.INACTIVE),
    (UNDER_BAND, Mode.INACTIVE, -5.01, Mode.ACTIVE),
    (UNDER_BAND, Mode.ACTIVE, 0.01, Mode.INACTIVE),
    (UNDER_BAND, Mode.ACTIVE, -3.0, Mode.ACTIVE),
])
def test_band_edges(band, mode, dev, out):
    assert hysteresis_step(band, mode, dev) is out


@given(st.lists(st.floats(-10, 10), max_size=200), st.sampled_from(["over", "under"]))
def test_matches_closed_form(devs, sense):
    band = OVER_BAND if sense == "over" else UNDER_BAND
    mode = Mode.INACTIVE
    got = []
    for d in devs:
        mode = hysteresis_step(band, mode, d)
        got.append(mode is Mode.ACTIVE)
    assert got == hysteresis_oracle(devs, band.activate, band.deactivate, sense)


def test_case1_commands():
    st_ = ControllerState(ScenarioKind.OVERVOLTAGE)
    cmd = csc.step_case1(6.0, 2.0, st_)
    assert cmd.p_sin_ref == 40.0 and not cmd.ehp_on
    cmd = csc.step_case1(3.0, 6.0, st_)
    assert cmd.p_sin_ref == 40.0 and cmd.ehp_on
    cmd = csc.step_case1(-1.0, -1.0, st_)
    assert cmd.p_sin_ref == 0.0 and not cmd.ehp_on
    assert st_.transitions == 4
    assert not cmd.chp_on


def test_case2_commands():
    st_ = ControllerState(ScenarioKind.UNDERVOLTAGE)
    assert csc.initial_commands(ScenarioKind.UNDERVOLTAGE).ehp_on
    cmd = csc.step_case2(-6.0, -6.0, st_)
    assert (cmd.p_sin_ref, cmd.ehp_on, cmd.chp_on, cmd.p_th_ref) == (0.0, False, True, 81.0)
    assert cmd.dtu_heat_ref == 22.5
    cmd = csc.step_case2(1.0, 1.0, st_)
    assert (cmd.p_sin_ref, cmd.ehp_on, cmd.chp_on) == (20.0, True, False)
    assert cmd.dtu_heat_ref == 0.0


def test_reactive_support():
    assert reactive_support(0.4, (-5, 5)) == 0.0
    assert reactive_support(-0.5, (-5, 5)) == 0.0
    assert reactive_support(1.0, (-5, 5)) == -2.0
    assert reactive_support(10.0, (-5, 5)) == -5.0
    assert reactive_support(-10.0, (-50, 50)) == 20.0


def test_reactive_setpoint_sign():
    # Overvoltage: absorb reactive power, which is positive under the load convention.
    st_ = ControllerState(ScenarioKind.OVERVOLTAGE)
    cmd = csc.step_case1(2.0, 2.0, st_)
    assert cmd.q_sin_ref == 4.0 and cmd.q_rse_ref == 4.0
    cmd = csc.step_case1(2.0, 2.0, st_, ControllerConfig(reactive=False))
    assert cmd.q_sin_ref == 0.0
