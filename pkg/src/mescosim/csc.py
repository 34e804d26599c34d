"""Centralized supervisory controller: hysteresis voltage support.

Two scenario programs share one band machine. Case 1 (overvoltage) soaks up
surplus power at the PCCs by charging the battery and switching the heat
pump on. Case 2 (undervoltage) sheds the heat pump, starts the CHP and stops
battery charging.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .devices import map_chp_to_dtu


class Mode(str, enum.Enum):
    INACTIVE = "inactive"
    ACTIVE = "active"


class Sense(str, enum.Enum):
    OVER = "over"
    UNDER = "under"


class ScenarioKind(str, enum.Enum):
    OVERVOLTAGE = "overvoltage"
    UNDERVOLTAGE = "undervoltage"


@dataclass(frozen=True)
class HysteresisBand:
    activate: float
    deactivate: float
    sense: Sense

    def __post_init__(self):
        object.__setattr__(self, "sense", Sense(self.sense))
        if self.sense is Sense.OVER and not self.activate > self.deactivate:
            raise ValueError("over band needs activate > deactivate")
        if self.sense is Sense.UNDER and not self.activate < self.deactivate:
            raise ValueError("under band needs activate < deactivate")


OVER_BAND = HysteresisBand(5.0, 0.0, Sense.OVER)
UNDER_BAND = HysteresisBand(-5.0, 0.0, Sense.UNDER)


def hysteresis_step(band: HysteresisBand, mode: Mode, deviation: float) -> Mode:
    if band.sense is Sense.OVER:
        if mode is Mode.INACTIVE and deviation > band.activate:
            return Mode.ACTIVE
        if mode is Mode.ACTIVE and deviation < band.deactivate:
            return Mode.INACTIVE
    else:
        if mode is Mode.INACTIVE and deviation < band.activate:
            return Mode.ACTIVE
        if mode is Mode.ACTIVE and deviation > band.deactivate:
            return Mode.INACTIVE
    return mode


@dataclass(frozen=True)
class CommandSet:
    p_sin_ref: float = 0.0
    q_sin_ref: float = 0.0
    q_rse_ref: float = 0.0
    chp_on: bool = False
    p_th_ref: float = 0.0
    ehp_on: bool = False

    @property
    def dtu_heat_ref(self) -> float:
        """Heater bank request forwarded from the CHP thermal setpoint."""
        return map_chp_to_dtu(self.p_th_ref) if self.chp_on else 0.0


@dataclass
class ControllerState:
    kind: ScenarioKind
    pcc2: Mode = Mode.INACTIVE
    pcc4: Mode = Mode.INACTIVE
    commands: CommandSet = field(default_factory=CommandSet)
    transitions: int = 0


@dataclass(frozen=True)
class ControllerConfig:
    over_band: HysteresisBand = OVER_BAND
    under_band: HysteresisBand = UNDER_BAND
    bess_charge_kw: float = 40.0
    chp_full_kw: float = 81.0
    # Case 2 pre-event battery setpoint (the battery is charging before the event).
    baseline_charge_kw: float = 20.0
    reactive: bool = True
    k_q: float = 2.0
    q_deadband: float = 0.5
    q_sin_limit: float = 5.0
    q_rse_limit: float = 50.0


def _advance(state: ControllerState, band: HysteresisBand, dev2: float, dev4: float) -> tuple[Mode, Mode]:
    m2 = hysteresis_step(band, state.pcc2, dev2)
    m4 = hysteresis_step(band, state.pcc4, dev4)
    state.transitions += (m2 is not state.pcc2) + (m4 is not state.pcc4)
    state.pcc2, state.pcc4 = m2, m4
    return m2, m4


def _with_reactive(cmd: CommandSet, dev2: float, dev4: float, cfg: ControllerConfig) -> CommandSet:
    if not cfg.reactive:
        return cmd
    # reactive_support is injection-positive; setpoints use consumption-positive.
    q2 = -reactive_support(dev2, (-cfg.q_sin_limit, cfg.q_sin_limit), cfg.k_q, cfg.q_deadband)
    q4 = -reactive_support(dev4, (-cfg.q_rse_limit, cfg.q_rse_limit), cfg.k_q, cfg.q_deadband)
    return replace(cmd, q_sin_ref=q2 + 0.0, q_rse_ref=q4 + 0.0)


def step_case1(rise_pcc2: float, rise_pcc4: float, state: ControllerState,
               cfg: ControllerConfig = ControllerConfig()) -> CommandSet:
    m2, m4 = _advance(state, cfg.over_band, rise_pcc2, rise_pcc4)
    cmd = CommandSet(
        p_sin_ref=cfg.bess_charge_kw if m2 is Mode.ACTIVE else 0.0,
        ehp_on=m4 is Mode.ACTIVE,
        chp_on=False,
        p_th_ref=0.0,
    )
    state.commands = _with_reactive(cmd, rise_pcc2, rise_pcc4, cfg)
    return state.commands


def step_case2(dev_pcc2: float, dev_pcc4: float, state: ControllerState,
               cfg: ControllerConfig = ControllerConfig()) -> CommandSet:
    m2, m4 = _advance(state, cfg.under_band, dev_pcc2, dev_pcc4)
    active4 = m4 is Mode.ACTIVE
    cmd = CommandSet(
        p_sin_ref=0.0 if m2 is Mode.ACTIVE else cfg.baseline_charge_kw,
        ehp_on=not active4,
        chp_on=active4,
        p_th_ref=cfg.chp_full_kw if active4 else 0.0,
    )
    state.commands = _with_reactive(cmd, dev_pcc2, dev_pcc4, cfg)
    return state.commands


def initial_commands(kind: ScenarioKind, cfg: ControllerConfig = ControllerConfig()) -> CommandSet:
    """Commands in force before the controller has seen any voltage."""
    if ScenarioKind(kind) is ScenarioKind.UNDERVOLTAGE:
        return CommandSet(p_sin_ref=cfg.baseline_charge_kw, ehp_on=True)
    return CommandSet()


def step(kind: ScenarioKind, dev2: float, dev4: float, state: ControllerState,
         cfg: ControllerConfig = ControllerConfig()) -> CommandSet:
    if ScenarioKind(kind) is ScenarioKind.OVERVOLTAGE:
        return step_case1(dev2, dev4, state, cfg)
    return step_case2(dev2, dev4, state, cfg)


def reactive_support(deviation: float, limits: tuple[float, float], k_q: float = 2.0,
                     deadband: float = 0.5) -> float:
    """Droop reactive injection in kVAr (positive = injected, raising voltage)."""
    if abs(deviation) <= deadband:
        return 0.0
    lo, hi = limits
    return min(max(-k_q * deviation, lo), hi)
