"""Phasor emulator of the low-voltage benchmark feeder.

Balanced single-phase equivalent: bus voltages are phase-to-neutral phasors,
injections are three-phase totals in kW/kVAr (positive = consumption) and are
split evenly across phases. The slack is the transformer secondary, held at
``v_nom`` with zero angle.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class TopologyError(ValueError):
    pass


class CyclicTopology(TopologyError):
    pass


class DisconnectedTopology(TopologyError):
    pass


class UnknownBusReference(TopologyError):
    pass


class UnknownBus(KeyError):
    pass


class TimeOutOfRange(UserWarning):
    """Profile evaluated past its last sample; the final value is held."""


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r_ohm: float
    x_ohm: float

    @property
    def z(self) -> complex:
        return complex(self.r_ohm, self.x_ohm)


@dataclass(frozen=True)
class Injection:
    bus: str
    p_kw: float
    q_kvar: float = 0.0


@dataclass
class GridModel:
    slack: str
    buses: list[str]
    branches: list[Branch]
    pcc: dict[str, str] = field(default_factory=dict)
    loads: dict[str, str] = field(default_factory=dict)
    pvs: dict[str, str] = field(default_factory=dict)
    devices: dict[str, str] = field(default_factory=dict)
    v_nom: float = 240.0
    f_nom: float = 50.0
    s_base_kva: float = 100.0

    def __post_init__(self):
        self._validate()
        self._index = {b: i for i, b in enumerate(self.buses)}
        self._build_matrices()

    def _validate(self):
        known = set(self.buses)
        if len(known) != len(self.buses):
            raise TopologyError("duplicate bus id")
        if self.slack not in known:
            raise UnknownBusReference(f"slack {self.slack!r}")
        for br in self.branches:
            for b in (br.from_bus, br.to_bus):
                if b not in known:
                    raise UnknownBusReference(f"branch endpoint {b!r}")
            if br.z == 0:
                raise TopologyError(f"zero impedance on {br.from_bus}-{br.to_bus}")
        for group in (self.pcc, self.loads, self.pvs, self.devices):
            for name, b in group.items():
                if b not in known:
                    raise UnknownBusReference(f"{name} attached to undeclared bus {b!r}")
        # Union-find over undirected edges: any repeated connection is a loop.
        parent = {b: b for b in self.buses}

        def root(b):
            while parent[b] != b:
                parent[b] = parent[parent[b]]
                b = parent[b]
            return b

        for br in self.branches:
            ra, rb = root(br.from_bus), root(br.to_bus)
            if ra == rb:
                raise CyclicTopology(f"branch {br.from_bus}-{br.to_bus} closes a loop")
            parent[ra] = rb
        if len({root(b) for b in self.buses}) != 1:
            raise DisconnectedTopology("branch graph does not span every bus")

    def _build_matrices(self):
        n = len(self.buses)
        adj: dict[str, list[tuple[str, Branch]]] = {b: [] for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].append((br.to_bus, br))
            adj[br.to_bus].append((br.from_bus, br))
        # Orient the tree away from the slack.
        self.parent: dict[str, str | None] = {self.slack: None}
        self.feeder_branch: dict[str, Branch] = {}
        order = [self.slack]
        for b in order:
            for nb, br in adj[b]:
                if nb not in self.parent:
                    self.parent[nb] = b
                    self.feeder_branch[nb] = br
                    order.append(nb)
        self.order = order
        # Path impedance shared by buses i and j (from the slack).
        path: dict[str, list[str]] = {self.slack: []}
        for b in order[1:]:
            path[b] = path[self.parent[b]] + [b]
        self.pq_buses = [b for b in self.buses if b != self.slack]
        m = len(self.pq_buses)
        dlf = np.zeros((m, m), dtype=complex)
        for i, bi in enumerate(self.pq_buses):
            pi = set(path[bi])
            for j, bj in enumerate(self.pq_buses):
                dlf[i, j] = sum(self.feeder_branch[b].z for b in path[bj] if b in pi)
        self.dlf = dlf
        y = np.zeros((n, n), dtype=complex)
        for br in self.branches:
            a, c = self._index[br.from_bus], self._index[br.to_bus]
            yb = 1.0 / br.z
            y[a, a] += yb
            y[c, c] += yb
            y[a, c] -= yb
            y[c, a] -= yb
        self.ybus = y
        self._pq_idx = np.array([self._index[b] for b in self.pq_buses], dtype=int)

    def index(self, bus: str) -> int:
        try:
            return self._index[bus]
        except KeyError:
            raise UnknownBus(bus) from None

    def resolve(self, name: str) -> str:
        """Map a PCC label or attached element to its bus id; bus ids pass through."""
        for group in (self.pcc, self.devices, self.loads, self.pvs):
            if name in group:
                return group[name]
        if name in self._index:
            return name
        raise UnknownBus(name)

    def describe(self) -> str:
        """Indented tree listing, one bus per line."""
        labels: dict[str, list[str]] = {b: [] for b in self.buses}
        for group in (self.pcc, self.loads, self.pvs, self.devices):
            for name, b in group.items():
                labels[b].append(name)
        children: dict[str, list[str]] = {b: [] for b in self.buses}
        for b in self.order[1:]:
            children[self.parent[b]].append(b)
        lines = []

        def walk(b, depth):
            extra = f"  [{', '.join(labels[b])}]" if labels[b] else ""
            if b == self.slack:
                head = f"{b} (slack, {self.v_nom:g} V)"
            else:
                br = self.feeder_branch[b]
                head = f"{b}  R={br.r_ohm:.4f} ohm X={br.x_ohm:.4f} ohm"
            lines.append("  " * depth + head + extra)
            for c in children[b]:
                walk(c, depth + 1)

        walk(self.slack, 0)
        return "\n".join(lines)


@dataclass
class GridState:
    buses: list[str]
    voltages: np.ndarray  # complex phase-to-neutral volts
    iterations: int
    converged: bool
    mismatch_pu: float

    def magnitude(self, bus: str) -> float:
        try:
            return float(abs(self.voltages[self.buses.index(bus)]))
        except ValueError:
            raise UnknownBus(bus) from None

    def angle(self, bus: str) -> float:
        return float(np.angle(self.voltages[self.buses.index(bus)]))


def _per_phase_load(model: GridModel, injections) -> np.ndarray:
    s = np.zeros(len(model.buses), dtype=complex)
    for inj in injections:
        if not (math.isfinite(inj.p_kw) and math.isfinite(inj.q_kvar)):
            raise ValueError(f"non-finite injection at {inj.bus}")
        s[model.index(model.resolve(inj.bus))] += complex(inj.p_kw, inj.q_kvar) * 1000.0 / 3.0
    return s


def power_mismatch_pu(model: GridModel, v: np.ndarray, s_load: np.ndarray) -> float:
    """Largest per-bus complex power mismatch at the PQ buses, three-phase per-unit."""
    s_inj = v * np.conj(model.ybus @ v)
    err = np.abs(s_inj + s_load)[model._pq_idx]
    return float(err.max(initial=0.0)) * 3.0 / (model.s_base_kva * 1000.0)


def solve_power_flow(model: GridModel, injections, tol: float = 1e-6, max_iter: int = 50) -> GridState:
    """Backward/forward sweep on the radial tree.

    Each iteration computes load currents from the present voltages, sums them
    into branch currents toward the slack, and walks voltage drops back out.
    Convergence is judged on the power mismatch; failure to converge is
    reported on the state, not raised.
    """
    s_load = _per_phase_load(model, injections)
    n = len(model.buses)
    v = np.full(n, complex(model.v_nom, 0.0))
    idx = model._pq_idx
    s_pq = s_load[idx]
    if not s_pq.any():
        return GridState(list(model.buses), v, 0, True, 0.0)
    v0 = complex(model.v_nom, 0.0)
    mismatch = math.inf
    it = 0
    while it < max_iter:
        it += 1
        i_load = np.conj(s_pq / v[idx])
        v[idx] = v0 - model.dlf @ i_load
        mismatch = power_mismatch_pu(model, v, s_load)
        if mismatch < tol:
            break
    converged = mismatch < tol
    if not converged:
        log.warning("power flow not converged after %d iterations (mismatch %.3g pu)", it, mismatch)
    return GridState(list(model.buses), v, it, converged, mismatch)


def voltage_rise(state: GridState, bus: str, v_ref: float = 240.0) -> float:
    """Percent deviation of the bus magnitude from the 240 V reference."""
    return (state.magnitude(bus) - v_ref) / v_ref * 100.0


# -- configuration -------------------------------------------------------------


def load_topology(config: dict | str | Path | None = None) -> GridModel:
    """Build a GridModel from a dict, a JSON path, or the packaged default."""
    if config is None:
        config = json.loads(resources.files("mescosim").joinpath("data", "grid.json").read_text())
    elif not isinstance(config, dict):
        config = json.loads(Path(config).read_text())
    cables = config.get("cables", {})
    branches = []
    for b in config["branches"]:
        if "cable" in b:
            try:
                c = cables[b["cable"]]
            except KeyError:
                raise TopologyError(f"unknown cable type {b['cable']!r}") from None
            km = b["length_m"] / 1000.0
            r, x = c["r_ohm_per_km"] * km, c["x_ohm_per_km"] * km
        else:
            r, x = b["r_ohm"], b["x_ohm"]
        branches.append(Branch(b["from"], b["to"], float(r), float(x)))
    return GridModel(
        slack=config["slack"],
        buses=list(config["buses"]),
        branches=branches,
        pcc=dict(config.get("pcc", {})),
        loads=dict(config.get("loads", {})),
        pvs=dict(config.get("pvs", {})),
        devices=dict(config.get("devices", {})),
        v_nom=float(config.get("v_nom", 240.0)),
        f_nom=float(config.get("f_nom", 50.0)),
        s_base_kva=float(config.get("s_base_kva", 100.0)),
    )


@dataclass
class ProfileSet:
    """Piecewise-linear kW series per load and PV; PV values are generation."""

    loads: dict[str, list[tuple[float, float]]]
    pvs: dict[str, list[tuple[float, float]]]
    power_factor: float = 0.95

    def end_time(self) -> float:
        series = [*self.loads.values(), *self.pvs.values()]
        return max((s[-1][0] for s in series if s), default=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileSet":
        def conv(group):
            out = {}
            for name, pts in group.items():
                pts = [(float(t), float(p)) for t, p in pts]
                if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
                    raise ValueError(f"profile {name}: times must increase")
                out[name] = pts
            return out

        return cls(conv(d.get("loads", {})), conv(d.get("pvs", {})), float(d.get("power_factor", 0.95)))


def load_profiles(kind_or_path: str | Path) -> ProfileSet:
    """Packaged profile by scenario kind ('overvoltage'/'undervoltage') or a JSON path."""
    if str(kind_or_path) in ("overvoltage", "undervoltage"):
        text = resources.files("mescosim").joinpath("data", f"profiles_{kind_or_path}.json").read_text()
    else:
        text = Path(kind_or_path).read_text()
    return ProfileSet.from_dict(json.loads(text))


def _interp(points: list[tuple[float, float]], t: float) -> float:
    ts = [p[0] for p in points]
    ps = [p[1] for p in points]
    return float(np.interp(t, ts, ps))


def apply_profiles(model: GridModel, profiles: ProfileSet, t: float) -> list[Injection]:
    """Load and PV injections at time ``t`` seconds; beyond the table the last sample holds."""
    end = profiles.end_time()
    if t > end:
        warnings.warn(f"profile time {t:.1f} s beyond table end {end:.1f} s; holding last sample",
                      TimeOutOfRange, stacklevel=2)
    tan_phi = math.tan(math.acos(profiles.power_factor))
    out = []
    for name, bus in model.loads.items():
        p = _interp(profiles.loads[name], t) if name in profiles.loads else 0.0
        out.append(Injection(bus, p, p * tan_phi))
    for name, bus in model.pvs.items():
        p = _interp(profiles.pvs[name], t) if name in profiles.pvs else 0.0
        out.append(Injection(bus, -p, 0.0))
    return out
