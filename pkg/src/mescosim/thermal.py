"""District-heating network and heat-pump thermal node.

DTU loop: heater bank -> 200 L accumulator tank -> 880 m supply path (two
440 m pipes joined by a pass-through substation) -> consumer -> back to the
tank. The pipe is plug flow with exponential heat loss per parcel. The CRES
side is a single first-order node fed by the heat pump.

Powers are in kW at the interface and converted to W internally.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

from .devices import NonPositiveDt, quantize_half_up

CP_WATER = 4186.0  # J/(kg K)
RHO_WATER = 1000.0  # kg/m3


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt!r}")


# -- heater bank -----------------------------------------------------------------


@dataclass
class HeaterBank:
    n_heaters: int = 9
    unit_kw: float = 2.5
    active_count: int = 0

    @property
    def output_kw(self) -> float:
        return self.active_count * self.unit_kw

    def set(self, requested_kw: float) -> float:
        if not math.isfinite(requested_kw):
            raise ValueError(f"requested heat must be finite, got {requested_kw!r}")
        count = int(round(quantize_half_up(requested_kw, self.unit_kw) / self.unit_kw))
        self.active_count = min(max(count, 0), self.n_heaters)
        return self.output_kw


def set_heat_source(requested_kw: float, bank: HeaterBank | None = None) -> float:
    """Quantize a heat request onto the bank and return the applied kW."""
    return (bank if bank is not None else HeaterBank()).set(requested_kw)


# -- accumulator tank ------------------------------------------------------------


@dataclass(frozen=True)
class AccumulatorTank:
    temperature: float = 50.0
    volume_l: float = 200.0
    ua_w_per_k: float = 2.0
    t_amb: float = 15.0
    clamped: bool = False

    @property
    def mass_kg(self) -> float:
        return self.volume_l * RHO_WATER / 1000.0

    @property
    def heat_capacity(self) -> float:
        """J/K."""
        return self.mass_kg * CP_WATER


def step_tank(tank: AccumulatorTank, p_in_kw: float, p_draw_kw: float, dt: float) -> AccumulatorTank:
    _check_dt(dt)
    loss_w = tank.ua_w_per_k * (tank.temperature - tank.t_amb)
    t = tank.temperature + ((p_in_kw - p_draw_kw) * 1000.0 - loss_w) * dt / tank.heat_capacity
    clipped = min(max(t, 0.0), 100.0)
    return replace(tank, temperature=clipped, clamped=clipped != t)


# -- pipe ------------------------------------------------------------------------


@dataclass
class Parcel:
    t_entry: float  # temperature on entry, degC
    time_entry: float  # s
    mass: float  # kg


@dataclass
class PipeLoop:
    """Plug-flow pipe as a FIFO of parcels, oldest at the left.

    Parcel temperatures are stored as entry values and decayed lazily towards
    ambient with rate ``k = loss / (rho A c_p)`` [1/s], which equals the
    per-metre loss law exp(-k L / v) at the outlet.
    """

    length_m: float = 880.0
    area_m2: float = 2.0e-4
    mass_flow: float = 0.1  # kg/s
    loss_w_per_mk: float = 0.05
    t_amb: float = 15.0
    t_init: float = 40.0
    time: float = 0.0
    parcels: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.mass_flow < 0:
            raise ValueError("mass flow must be non-negative")
        if not self.parcels:
            self.parcels.append(Parcel(self.t_init, self.time, self.total_mass))

    @property
    def total_mass(self) -> float:
        return RHO_WATER * self.area_m2 * self.length_m

    @property
    def decay_rate(self) -> float:
        return self.loss_w_per_mk / (RHO_WATER * self.area_m2 * CP_WATER)

    @property
    def velocity(self) -> float:
        return self.mass_flow / (RHO_WATER * self.area_m2)

    @property
    def transport_delay(self) -> float:
        return math.inf if self.mass_flow == 0 else self.length_m / self.velocity

    def parcel_temperature(self, p: Parcel, now: float | None = None) -> float:
        now = self.time if now is None else now
        return self.t_amb + (p.t_entry - self.t_amb) * math.exp(-self.decay_rate * (now - p.time_entry))

    def stored_mass(self) -> float:
        return sum(p.mass for p in self.parcels)

    def stored_energy(self, t_ref: float = 0.0) -> float:
        """J relative to ``t_ref``."""
        return sum(p.mass * CP_WATER * (self.parcel_temperature(p) - t_ref) for p in self.parcels)


def step_pipe(pipe: PipeLoop, inlet_t: float, dt: float) -> float:
    """Advance the pipe by ``dt`` and return the mixed outlet temperature.

    Mutates ``pipe``. The entering parcel is stamped at the start of the step,
    so a parcel leaves after roughly length/velocity seconds.
    """
    _check_dt(dt)
    start = pipe.time
    pipe.time += dt
    m_in = pipe.mass_flow * dt
    if m_in == 0:
        return pipe.parcel_temperature(pipe.parcels[0])
    pipe.parcels.append(Parcel(inlet_t, start, m_in))
    need = m_in
    mass_out = 0.0
    heat_out = 0.0
    while need > 0 and pipe.parcels:
        front = pipe.parcels[0]
        take = min(front.mass, need)
        t_front = pipe.parcel_temperature(front)
        mass_out += take
        heat_out += take * t_front
        need -= take
        # Float residue below a microgram is merged into the outflow.
        if front.mass - take <= 1e-9:
            pipe.parcels.popleft()
        else:
            front.mass -= take
    return heat_out / mass_out


# -- consumer and network ----------------------------------------------------------


@dataclass
class ThermalState:
    """Snapshot of the DTU loop published each tick."""

    t_tank: float
    t_outlet: float
    t_return: float
    heat_applied_kw: float
    tank_clamped: bool


@dataclass
class DhnNetwork:
    """Heater bank, tank, pipe and consumer stepped on one clock.

    Step order: pipe (fed at the current tank temperature), consumer, tank.
    With that order and zero losses the loop conserves energy exactly up to
    floating-point rounding.
    """

    bank: HeaterBank = field(default_factory=HeaterBank)
    tank: AccumulatorTank = field(default_factory=AccumulatorTank)
    pipe: PipeLoop = field(default_factory=PipeLoop)
    t_return_set: float = 35.0
    # Cumulative energy (J) entering from heaters and leaving at the consumer.
    energy_in: float = 0.0
    energy_out: float = 0.0
    last: ThermalState | None = None

    @classmethod
    def from_params(cls, params: dict | None = None) -> "DhnNetwork":
        p = dict(params or {})
        tank = AccumulatorTank(
            temperature=p.get("t_tank_init", 50.0),
            volume_l=p.get("tank_volume_l", 200.0),
            ua_w_per_k=p.get("tank_ua_w_per_k", 2.0),
            t_amb=p.get("t_amb", 15.0),
        )
        pipe = PipeLoop(
            length_m=p.get("pipe_length_m", 880.0),
            area_m2=p.get("pipe_area_m2", 2.0e-4),
            mass_flow=p.get("mass_flow_kg_s", 0.1),
            loss_w_per_mk=p.get("pipe_loss_w_per_mk", 0.05),
            t_amb=p.get("t_amb", 15.0),
            t_init=p.get("t_pipe_init", 40.0),
        )
        return cls(HeaterBank(), tank, pipe, t_return_set=p.get("t_return_set", 35.0))

    def stored_energy(self, t_ref: float = 0.0) -> float:
        return self.tank.heat_capacity * (self.tank.temperature - t_ref) + self.pipe.stored_energy(t_ref)

    def step(self, requested_kw: float, dt: float) -> ThermalState:
        _check_dt(dt)
        applied = self.bank.set(requested_kw)
        t_supply = self.tank.temperature
        t_out = step_pipe(self.pipe, t_supply, dt)
        t_ret = min(t_out, self.t_return_set)
        mdot_cp = self.pipe.mass_flow * CP_WATER
        consumer_w = mdot_cp * (t_out - t_ret)
        # The tank loses the supply stream and regains the return stream.
        draw_kw = mdot_cp * (t_supply - t_ret) / 1000.0
        self.tank = step_tank(self.tank, applied, draw_kw, dt)
        self.energy_in += applied * 1000.0 * dt
        self.energy_out += consumer_w * dt
        self.last = ThermalState(self.tank.temperature, t_out, t_ret, applied, self.tank.clamped)
        return self.last


# -- CRES node -------------------------------------------------------------------


@dataclass(frozen=True)
class CresThermalState:
    t_cres: float = 45.0
    demand_kw: float = 20.0
    p_th_cres: float = 0.0
    c_j_per_k: float = 5.0e6
    ua_w_per_k: float = 50.0
    t_amb: float = 15.0


def step_cres(state: CresThermalState, ehp_on: bool, ehp_heat_kw: float, dt: float) -> CresThermalState:
    _check_dt(dt)
    p_th = min(max(ehp_heat_kw, 0.0), 30.0) if ehp_on else 0.0
    net_w = (p_th - state.demand_kw) * 1000.0 - state.ua_w_per_k * (state.t_cres - state.t_amb)
    t = state.t_cres + net_w * dt / state.c_j_per_k
    return replace(state, t_cres=min(max(t, 0.0), 100.0), p_th_cres=p_th)
