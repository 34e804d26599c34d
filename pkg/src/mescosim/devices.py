"""Electrical-side device emulators: battery, CHP and heat pump.

Sign convention throughout: positive P is consumption at the PCC, negative P
is generation. The battery charges with positive P.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


class NonPositiveDt(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt!r}")


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


# -- battery -------------------------------------------------------------------


@dataclass(frozen=True)
class BessState:
    soc: float = 50.0
    e_cap_kwh: float = 100.0
    p_kw: float = 0.0
    q_kvar: float = 0.0
    p_max_kw: float = 40.0
    q_max_kvar: float = 5.0


def bess_step(state: BessState, p_ref: float, dt: float, q_ref: float = 0.0) -> BessState:
    """Apply a power setpoint for ``dt`` seconds.

    The applied power is the setpoint clamped to the converter rating and then
    limited so the SoC cannot pass 0 or 100 within the step. A full battery
    therefore refuses charge and an empty one refuses discharge, and the SoC
    change always equals applied power times time over capacity.
    """
    _check_dt(dt)
    p = _clamp(float(p_ref), -state.p_max_kw, state.p_max_kw)
    q = _clamp(float(q_ref), -state.q_max_kvar, state.q_max_kvar)
    # kW over dt seconds as a percent of E_cap kWh.
    gain = dt / (36.0 * state.e_cap_kwh)
    if p > 0:
        p = min(p, (100.0 - state.soc) / gain)
    elif p < 0:
        p = max(p, -state.soc / gain)
    soc = _clamp(state.soc + p * gain, 0.0, 100.0)
    return replace(state, soc=soc, p_kw=p, q_kvar=q)


# -- CHP -----------------------------------------------------------------------


@dataclass(frozen=True)
class ChpState:
    on: bool = False
    p_th_kw: float = 0.0
    p_el_kw: float = 0.0
    q_kvar: float = 0.0
    p_th_min: float = 46.0
    p_th_max: float = 81.0
    ratio_el_th: float = 0.55

    @property
    def p_el_injection(self) -> float:
        """Electrical contribution at the PCC under the consumption-positive convention."""
        return -self.p_el_kw


def chp_step(state: ChpState, on_cmd: bool, p_th_ref: float) -> ChpState:
    if not on_cmd:
        return replace(state, on=False, p_th_kw=0.0, p_el_kw=0.0)
    p_th = _clamp(float(p_th_ref), state.p_th_min, state.p_th_max)
    return replace(state, on=True, p_th_kw=p_th, p_el_kw=state.ratio_el_th * p_th)


HEAT_STEP_KW = 2.5


def quantize_half_up(x: float, step: float = HEAT_STEP_KW) -> float:
    """Nearest multiple of ``step``; exact half-steps go up."""
    return math.floor(x / step + 0.5) * step


def map_chp_to_dtu(p_th_chp: float, lo: float = 46.0, hi: float = 81.0, span: float = 22.5) -> float:
    """Scale the CHP thermal range onto the DTU heater bank range, in 2.5 kW steps.

    Zero means the CHP is off and maps to zero. The range endpoints map to
    0 and ``span``.
    """
    if p_th_chp == 0:
        return 0.0
    if not (lo <= p_th_chp <= hi):
        raise OutOfDomain(f"P_th_CHP={p_th_chp!r} outside [{lo}, {hi}]")
    raw = (p_th_chp - lo) / (hi - lo) * span
    return quantize_half_up(raw)


# -- heat pump -----------------------------------------------------------------


@dataclass(frozen=True)
class EhpState:
    on: bool = False
    p_el_kw: float = 0.0
    p_th_kw: float = 0.0
    rated_kw: float = 16.0
    cop: float = 1.8
    p_th_max: float = 30.0


def ehp_step(state: EhpState, on_cmd: bool) -> EhpState:
    if not on_cmd:
        return replace(state, on=False, p_el_kw=0.0, p_th_kw=0.0)
    return replace(
        state,
        on=True,
        p_el_kw=state.rated_kw,
        p_th_kw=min(state.cop * state.rated_kw, state.p_th_max),
    )
