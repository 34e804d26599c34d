"""Scenario orchestration: RI nodes, replication schedule, records and metrics.

Every RI runs as a node with its own full-catalog registry and a push/pull
link pair to the cloud. A tick executes in two barrier stages so the same
node code serves in-process runs and multi-process runs over the uAPI wire:

    stage A  profiles -> devices -> grid -> publish, then push (replication ticks)
    stage B  pull (replication ticks), control (replication ticks), thermal

All pushes of a tick complete before any pull starts.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import csc, devices, grid, thermal
from .replication import (
    CloudPort,
    CloudStore,
    Direction,
    NodeStore,
    ReplicationLink,
    pull_cycle,
    push_cycle,
)
from .signals import (
    CHP_ON_OFF,
    F_RSE_REF,
    F_SIN_REF,
    ON_OFF,
    P_BAR_DTU,
    P_EL_CRES,
    P_EL_RSE,
    P_EL_SIN,
    P_EL_SIN_REF,
    P_TH_CHP,
    P_TH_CHP_REF,
    P_TH_CRES,
    Q_EL_RSE,
    Q_EL_RSE_REF,
    Q_EL_SIN,
    Q_EL_SIN_REF,
    SOC,
    T_CRES,
    T_DTU,
    V_RSE_REF,
    V_SIN_REF,
    SignalRegistry,
    default_catalog,
    default_registry,
)
from .uapi import (
    CloudService,
    EndpointUnreachable,
    RemoteCloud,
    Response,
    UapiClient,
    UapiError,
    UapiService,
    make_server,
)

log = logging.getLogger(__name__)

V_REF = 240.0


class ConfigInvalid(ValueError):
    pass


# -- configuration -----------------------------------------------------------------

DEFAULT_DURATION_S = {"overvoltage": 960.0, "undervoltage": 1680.0}


@dataclass
class LinkConfig:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_probability: float = 0.0


@dataclass
class ScenarioConfig:
    kind: str = "overvoltage"
    duration_s: float | None = None
    dt_s: float = 0.5
    rate_hz: float = 2.0
    seed: int = 0
    link: LinkConfig = field(default_factory=LinkConfig)
    stale_horizon_ms: int = 2000
    devices: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    thermal: dict = field(default_factory=dict)
    cres: dict = field(default_factory=dict)
    grid: Any = None
    profiles: Any = None
    out_dir: str | None = None
    deployment: str = "in-process"
    endpoints: dict = field(default_factory=dict)
    realtime: bool = False

    def __post_init__(self):
        if isinstance(self.link, dict):
            try:
                self.link = LinkConfig(**self.link)
            except TypeError as exc:
                raise ConfigInvalid(f"link: {exc}") from None
        if self.duration_s is None and self.kind in DEFAULT_DURATION_S:
            self.duration_s = DEFAULT_DURATION_S[self.kind]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ScenarioConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "realtime", "deployment", "endpoints"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.rate_hz

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.dt_s))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigInvalid(msg)

        need(self.kind in DEFAULT_DURATION_S, f"kind must be one of {sorted(DEFAULT_DURATION_S)}")
        need(isinstance(self.duration_s, (int, float)) and math.isfinite(self.duration_s)
             and self.duration_s >= 0, "duration_s must be a finite non-negative number")
        need(isinstance(self.rate_hz, (int, float)) and 1.0 <= self.rate_hz <= 2.0,
             "rate_hz must lie in [1, 2]")
        need(isinstance(self.dt_s, (int, float)) and self.dt_s > 0, "dt_s must be positive")
        need(self.dt_s <= 1.0 / self.rate_hz + 1e-12, "dt_s must not exceed the exchange period")
        need(float(self.dt_s * 1000).is_integer(), "dt_s must be a whole number of milliseconds")
        need(self.link.latency_ms >= 0 and self.link.jitter_ms >= 0, "latency and jitter must be >= 0")
        need(0.0 <= self.link.drop_probability < 1.0, "drop_probability must lie in [0, 1)")
        need(isinstance(self.seed, int), "seed must be an integer")
        need(self.stale_horizon_ms > 0, "stale_horizon_ms must be positive")
        need(self.deployment in ("in-process", "multi-process"),
             "deployment must be in-process or multi-process")
        try:
            model = self.grid_model()
            self.profile_set()
        except (grid.TopologyError, KeyError, ValueError, OSError) as exc:
            raise ConfigInvalid(f"grid/profiles: {exc!r}") from None
        for dev in ("BESS", "CHP", "EHP"):
            need(dev in model.devices, f"grid config must attach {dev}")
        need(model.devices["CHP"] == model.devices["EHP"],
             "CHP and EHP must share the RSE coupling bus")
        try:
            self.controller_config()
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"controller: {exc}") from None

    def grid_model(self) -> grid.GridModel:
        return grid.load_topology(self.grid)

    def profile_set(self) -> grid.ProfileSet:
        if isinstance(self.profiles, dict):
            return grid.ProfileSet.from_dict(self.profiles)
        return grid.load_profiles(self.profiles or self.kind)

    def controller_config(self) -> csc.ControllerConfig:
        c = dict(self.controller)
        over = c.pop("over_band", None)
        under = c.pop("under_band", None)
        if over is not None:
            c["over_band"] = csc.HysteresisBand(float(over[0]), float(over[1]), csc.Sense.OVER)
        if under is not None:
            c["under_band"] = csc.HysteresisBand(float(under[0]), float(under[1]), csc.Sense.UNDER)
        return csc.ControllerConfig(**c)


# -- nodes ---------------------------------------------------------------------------


class RiNode:
    """One RI: local registry, replication links, and its emulators."""

    namespace = ""
    writes: tuple[str, ...] = ()
    subscriptions: tuple[str, ...] = ()

    def __init__(self, cfg: ScenarioConfig, cloud: CloudPort):
        self.cfg = cfg
        self.cloud = cloud
        self.registry = default_registry()
        self.store = NodeStore(self.namespace, self.registry)
        link = dict(period_ms=cfg.period_ms, latency_ms=cfg.link.latency_ms,
                    jitter_ms=cfg.link.jitter_ms, drop_probability=cfg.link.drop_probability)
        seed = f"{cfg.seed}:{self.namespace}"
        self.push = ReplicationLink(direction=Direction.PUSH, seed=seed, **link)
        self.pull = ReplicationLink(direction=Direction.PULL, seed=seed, **link)
        self.dt = cfg.dt_s
        self.now_ms = 0
        self.kind = csc.ScenarioKind(cfg.kind)
        self.initial = csc.initial_commands(self.kind, cfg.controller_config())
        self.cloud_errors = 0
        self.max_lag_ms = 0

    def write(self, key: str, value: float) -> None:
        self.registry.write(key, value, self.now_ms, self.namespace)

    def value(self, key: str, default: float) -> float:
        return self.registry.value(key, default)

    # phases; subclasses override what they own
    def local(self, t_s: float) -> None:
        pass

    def control(self, t_s: float) -> None:
        pass

    def thermal(self, t_s: float) -> None:
        pass

    def stage_a(self, tick: int, t_ms: int, replicate: bool) -> None:
        self.now_ms = t_ms
        self.local(t_ms / 1000.0)
        if replicate:
            try:
                push_cycle(self.store, self.push, self.cloud)
            except (EndpointUnreachable, UapiError) as exc:
                self.push.cycle += 1
                self.cloud_errors += 1
                log.warning("%s: push failed at %d ms: %s", self.namespace, t_ms, exc)

    def stage_b(self, tick: int, t_ms: int, replicate: bool) -> dict[str, list]:
        self.now_ms = t_ms
        if replicate:
            before = self.registry.snapshot()
            try:
                pull_cycle(self.cloud, self.pull, self.store, self.subscriptions)
            except (EndpointUnreachable, UapiError) as exc:
                self.pull.cycle += 1
                self.cloud_errors += 1
                log.warning("%s: pull failed at %d ms: %s", self.namespace, t_ms, exc)
            for key in self.subscriptions:
                s = self.registry.read(key)
                if s is not None and s is not before.get(key):
                    self.max_lag_ms = max(self.max_lag_ms, t_ms - s.timestamp)
            self.control(t_ms / 1000.0)
        self.thermal(t_ms / 1000.0)
        return self.owned_snapshot()

    def owned_snapshot(self) -> dict[str, list]:
        out = {}
        for key in self.writes:
            s = self.registry.read(key)
            if s is not None:
                out[key] = [s.value, s.quality.value]
        return out

    def stats(self) -> dict:
        return {"cloud_errors": self.cloud_errors, "max_lag_ms": self.max_lag_ms,
                "push_cycles": self.push.cycle, "pull_cycles": self.pull.cycle,
                "stale_reads": getattr(self, "stale_reads", 0)}


class TudNode(RiNode):
    """Grid emulator: solves the feeder and publishes PCC voltages."""

    namespace = "TUD"
    writes = (V_SIN_REF, V_RSE_REF, F_SIN_REF, F_RSE_REF)
    subscriptions = (P_EL_SIN, Q_EL_SIN, P_EL_RSE, Q_EL_RSE)

    def __init__(self, cfg, cloud):
        super().__init__(cfg, cloud)
        self.model = cfg.grid_model()
        self.profiles = cfg.profile_set()
        self.state: grid.GridState | None = None
        self.not_converged = 0

    def local(self, t_s):
        inj = grid.apply_profiles(self.model, self.profiles, t_s)
        bess, rse = self.model.devices["BESS"], self.model.devices["CHP"]
        inj.append(grid.Injection(bess, self.value(P_EL_SIN, 0.0), self.value(Q_EL_SIN, 0.0)))
        inj.append(grid.Injection(rse, self.value(P_EL_RSE, 0.0), self.value(Q_EL_RSE, 0.0)))
        self.state = grid.solve_power_flow(self.model, inj)
        if not self.state.converged:
            self.not_converged += 1
        self.write(V_SIN_REF, self.state.magnitude(bess))
        self.write(V_RSE_REF, self.state.magnitude(rse))
        self.write(F_SIN_REF, self.model.f_nom)
        self.write(F_RSE_REF, self.model.f_nom)


class SinNode(RiNode):
    """Battery at PCC2."""

    namespace = "SIN"
    writes = (P_EL_SIN, Q_EL_SIN, SOC)
    subscriptions = (P_EL_SIN_REF, Q_EL_SIN_REF, V_SIN_REF, F_SIN_REF)

    def __init__(self, cfg, cloud):
        super().__init__(cfg, cloud)
        p = cfg.devices.get("bess", {})
        self.bess = devices.BessState(soc=p.get("soc0", 50.0), e_cap_kwh=p.get("e_cap_kwh", 100.0))

    def local(self, t_s):
        p_ref = self.value(P_EL_SIN_REF, self.initial.p_sin_ref)
        q_ref = self.value(Q_EL_SIN_REF, self.initial.q_sin_ref)
        self.bess = devices.bess_step(self.bess, p_ref, self.dt, q_ref)
        self.write(P_EL_SIN, self.bess.p_kw)
        self.write(Q_EL_SIN, self.bess.q_kvar)
        self.write(SOC, self.bess.soc)


class RseNode(RiNode):
    """CHP, the PCC4 converter (CHP plus the heat pump load) and the controller."""

    namespace = "RSE"
    commands = (P_EL_SIN_REF, Q_EL_SIN_REF, ON_OFF, CHP_ON_OFF, P_TH_CHP_REF, Q_EL_RSE_REF)
    writes = (P_TH_CHP, P_EL_RSE, Q_EL_RSE) + commands
    subscriptions = (P_EL_CRES, V_SIN_REF, V_RSE_REF, F_RSE_REF)

    def __init__(self, cfg, cloud):
        super().__init__(cfg, cloud)
        p = cfg.devices.get("chp", {})
        self.chp = devices.ChpState(ratio_el_th=p.get("ratio_el_th", 0.55))
        self.ctl_cfg = cfg.controller_config()
        self.ctl = csc.ControllerState(self.kind, commands=self.initial)
        self.stale_reads = 0
        self.q_max = self.registry.descriptor(Q_EL_RSE).max

    def local(self, t_s):
        on = self.value(CHP_ON_OFF, float(self.initial.chp_on)) >= 0.5
        self.chp = devices.chp_step(self.chp, on, self.value(P_TH_CHP_REF, self.initial.p_th_ref))
        q = min(max(self.value(Q_EL_RSE_REF, self.initial.q_rse_ref), -self.q_max), self.q_max)
        # Off reads as 0 and lands on the range floor, which the DTU map sends to 0.
        self.write(P_TH_CHP, self.chp.p_th_kw)
        self.write(P_EL_RSE, self.chp.p_el_injection + self.value(P_EL_CRES, 0.0))
        self.write(Q_EL_RSE, q)

    def control(self, t_s):
        v2 = self.registry.read(V_SIN_REF)
        v4 = self.registry.read(V_RSE_REF)
        if v2 is None or v4 is None:
            return
        horizon = self.cfg.stale_horizon_ms
        if self.registry.is_stale(V_SIN_REF, self.now_ms, horizon) or \
                self.registry.is_stale(V_RSE_REF, self.now_ms, horizon):
            self.stale_reads += 1
            log.info("controller acting on stale voltages at %d ms", self.now_ms)
        dev2 = (v2.value - V_REF) / V_REF * 100.0
        dev4 = (v4.value - V_REF) / V_REF * 100.0
        cmd = csc.step(self.kind, dev2, dev4, self.ctl, self.ctl_cfg)
        self.write(P_EL_SIN_REF, cmd.p_sin_ref)
        self.write(Q_EL_SIN_REF, cmd.q_sin_ref)
        self.write(ON_OFF, float(cmd.ehp_on))
        self.write(CHP_ON_OFF, float(cmd.chp_on))
        self.write(P_TH_CHP_REF, cmd.p_th_ref)
        self.write(Q_EL_RSE_REF, cmd.q_rse_ref)


class CresNode(RiNode):
    """Heat pump and its thermal load."""

    namespace = "CRES"
    writes = (P_TH_CRES, P_EL_CRES, T_CRES)
    subscriptions = (ON_OFF,)

    def __init__(self, cfg, cloud):
        super().__init__(cfg, cloud)
        p = cfg.devices.get("ehp", {})
        self.ehp = devices.EhpState(cop=p.get("cop", 1.8), rated_kw=p.get("rated_kw", 16.0))
        c = cfg.cres
        self.node = thermal.CresThermalState(
            t_cres=c.get("t_init", 45.0), demand_kw=c.get("demand_kw", 20.0),
            c_j_per_k=c.get("c_j_per_k", 5.0e6), ua_w_per_k=c.get("ua_w_per_k", 50.0),
            t_amb=c.get("t_amb", 15.0))

    def local(self, t_s):
        on = self.value(ON_OFF, float(self.initial.ehp_on)) >= 0.5
        self.ehp = devices.ehp_step(self.ehp, on)
        self.write(P_EL_CRES, self.ehp.p_el_kw)
        self.write(P_TH_CRES, self.ehp.p_th_kw)

    def thermal(self, t_s):
        self.node = thermal.step_cres(self.node, self.ehp.on, self.ehp.p_th_kw, self.dt)
        self.write(T_CRES, self.node.t_cres)


class DtuNode(RiNode):
    """District-heating loop; the heater bank follows the mapped CHP output."""

    namespace = "DTU"
    writes = (P_BAR_DTU, T_DTU)
    subscriptions = (P_TH_CHP,)

    def __init__(self, cfg, cloud):
        super().__init__(cfg, cloud)
        self.dhn = thermal.DhnNetwork.from_params(cfg.thermal)

    def thermal(self, t_s):
        request = devices.map_chp_to_dtu(self.value(P_TH_CHP, 0.0))
        state = self.dhn.step(request, self.dt)
        self.write(P_BAR_DTU, state.heat_applied_kw)
        self.write(T_DTU, state.t_tank)


NODE_TYPES: dict[str, type[RiNode]] = {
    cls.namespace: cls for cls in (TudNode, SinNode, RseNode, CresNode, DtuNode)
}

OWNER = {key: ns for ns, cls in NODE_TYPES.items() for key in cls.writes}


# -- records -------------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class RunRecord:
    columns: list[str]
    times_ms: list[int] = field(default_factory=list)
    values: list[list[float | None]] = field(default_factory=list)
    qualities: list[list[str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, t_ms: int, snapshot: dict[str, list]) -> None:
        if self.times_ms and t_ms <= self.times_ms[-1]:
            raise ValueError("record rows must strictly increase in time")
        self.times_ms.append(int(t_ms))
        self.values.append([snapshot[k][0] if k in snapshot else None for k in self.columns])
        self.qualities.append([snapshot[k][1] if k in snapshot else "" for k in self.columns])

    def __len__(self) -> int:
        return len(self.times_ms)

    def column(self, key: str) -> list[float | None]:
        j = self.columns.index(key)
        return [row[j] for row in self.values]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ms"] + [c for k in self.columns for c in (k, f"{k}.quality")])
        for t, vals, quals in zip(self.times_ms, self.values, self.qualities):
            w.writerow([t] + [c for v, q in zip(vals, quals) for c in (_fmt(v), q)])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str, meta: dict | None = None) -> "RunRecord":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "time_ms":
            raise ValueError("record must start with a time_ms header")
        header = rows[0][1:]
        columns = header[0::2]
        rec = cls(columns, meta=dict(meta or {}))
        for row in rows[1:]:
            rec.times_ms.append(int(row[0]))
            cells = row[1:]
            rec.values.append([float(v) if v != "" else None for v in cells[0::2]])
            rec.qualities.append(list(cells[1::2]))
        return rec

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.csv").write_text(self.to_csv_text())
        (out / "record.meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return out / "record.csv"

    @classmethod
    def read(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        meta_path = path.with_name(path.stem + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls.from_csv_text(path.read_text(), meta)


# -- orchestration -------------------------------------------------------------------


def replication_ticks(cfg: ScenarioConfig) -> list[bool]:
    """Per tick, whether a replication cycle (and a control step) runs on it.

    A cycle runs on the first tick of every exchange period.
    """
    dt_ms = int(round(cfg.dt_s * 1000))
    flags, last = [], None
    for k in range(cfg.n_ticks):
        period = math.floor(k * dt_ms / cfg.period_ms + 1e-9)
        flags.append(period != last)
        last = period
    return flags


class RemoteNode:
    """Orchestrator-side proxy for a node hosted by ``serve_ri``."""

    def __init__(self, namespace: str, url: str):
        self.namespace = namespace
        self.client = UapiClient(url, timeout=30.0)

    def _step(self, stage: str, tick: int, t_ms: int, replicate: bool):
        return self.client.request("POST", f"/v1/{self.namespace}/step",
                                   {"stage": stage, "tick": tick, "t_ms": t_ms, "replicate": replicate},
                                   idempotent=False)

    def stage_a(self, tick, t_ms, replicate):
        self._step("a", tick, t_ms, replicate)

    def stage_b(self, tick, t_ms, replicate):
        return self._step("b", tick, t_ms, replicate)["snapshot"]

    def stats(self) -> dict:
        return self.client.request("GET", f"/v1/{self.namespace}/stats")


def build_nodes(cfg: ScenarioConfig, cloud: CloudPort) -> dict[str, RiNode]:
    return {ns: cls(cfg, cloud) for ns, cls in NODE_TYPES.items()}


def _drive(cfg: ScenarioConfig, nodes: dict, pool: ThreadPoolExecutor | None) -> RunRecord:
    record = RunRecord([d.key for d in default_catalog()])
    dt_ms = int(round(cfg.dt_s * 1000))
    order = list(nodes.values())
    start = time.monotonic()
    for k, replicate in enumerate(replication_ticks(cfg)):
        t_ms = k * dt_ms
        if cfg.realtime:
            delay = start + t_ms / 1000.0 - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        if pool is None:
            for n in order:
                n.stage_a(k, t_ms, replicate)
            snaps = [n.stage_b(k, t_ms, replicate) for n in order]
        else:
            list(pool.map(lambda n: n.stage_a(k, t_ms, replicate), order))
            snaps = list(pool.map(lambda n: n.stage_b(k, t_ms, replicate), order))
        merged: dict[str, list] = {}
        for s in snaps:
            merged.update(s)
        record.append(t_ms, merged)
    return record


def run_scenario(cfg: ScenarioConfig) -> tuple[RunRecord, dict]:
    cfg.validate()
    procs: list[subprocess.Popen] = []
    pool = None
    try:
        if cfg.deployment == "in-process":
            nodes = build_nodes(cfg, CloudStore(default_registry()))
        else:
            endpoints = dict(cfg.endpoints)
            if not endpoints:
                endpoints, procs = spawn_services(cfg)
            missing = [ns for ns in NODE_TYPES if ns not in endpoints]
            if missing:
                raise ConfigInvalid(f"multi-process endpoints missing {missing}")
            nodes = {ns: RemoteNode(ns, endpoints[ns]) for ns in NODE_TYPES}
            for ns, n in nodes.items():
                n.client.wait_ready(ns)
            pool = ThreadPoolExecutor(max_workers=len(nodes))
        record = _drive(cfg, nodes, pool)
        stats = {ns: n.stats() for ns, n in nodes.items()}
    finally:
        if pool is not None:
            pool.shutdown()
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
    record.meta = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "dt_s": cfg.dt_s,
        "rate_hz": cfg.rate_hz,
        "replication_cycles": sum(replication_ticks(cfg)),
        "replication_max_lag_ms": max((s["max_lag_ms"] for s in stats.values()), default=0),
        "cloud_errors": sum(s["cloud_errors"] for s in stats.values()),
        "stale_control_steps": stats.get("RSE", {}).get("stale_reads", 0),
        "versions": {"mescosim": _version(), "python": sys.version.split()[0]},
    }
    ctl = cfg.controller_config()
    metrics = compute_metrics(record, over_band=ctl.over_band, under_band=ctl.under_band)
    if cfg.out_dir:
        write_outputs(cfg, record, metrics)
    return record, metrics


def _version() -> str:
    from . import __version__

    return __version__


def write_outputs(cfg: ScenarioConfig, record: RunRecord, metrics: dict) -> None:
    out = Path(cfg.out_dir)
    record.write(out)
    (out / "metrics.txt").write_text(format_metrics(metrics))
    echo = {"config": cfg.to_dict(), "sha256": cfg.config_hash()}
    (out / "config.echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


# -- multi-process services ----------------------------------------------------------


class NodeService(UapiService):
    """uAPI for one RI plus the orchestrator's barrier routes."""

    def __init__(self, node: RiNode, horizon_ms: int):
        super().__init__(node.registry, namespaces={node.namespace}, node_id=node.namespace,
                         clock=lambda: node.now_ms, horizon_ms=horizon_ms,
                         subscriptions={node.namespace: set(node.subscriptions)})
        self.node = node
        self._lock = threading.Lock()
        ns = node.namespace
        self.add_route("POST", f"/v1/{ns}/step", self._step)
        self.add_route("GET", f"/v1/{ns}/stats", lambda _: Response(200, node.stats()))

    def _step(self, payload) -> Response:
        try:
            stage, tick, t_ms = payload["stage"], int(payload["tick"]), int(payload["t_ms"])
            replicate = bool(payload["replicate"])
        except (KeyError, TypeError, ValueError) as exc:
            return Response(422, {"error": "unprocessable", "detail": str(exc)})
        with self._lock:
            if stage == "a":
                self.node.stage_a(tick, t_ms, replicate)
                return Response(200, {"ok": True})
            if stage == "b":
                return Response(200, {"snapshot": self.node.stage_b(tick, t_ms, replicate)})
        return Response(422, {"error": "unprocessable", "detail": f"stage {stage!r}"})


def make_ri_server(namespace: str, cfg: ScenarioConfig, port: int = 0, cloud_url: str | None = None,
                   host: str = "127.0.0.1"):
    """Build (not start) the HTTP server for one RI, or for the cloud when namespace is 'cloud'."""
    if namespace == "cloud":
        return make_server(CloudService(default_registry(), horizon_ms=cfg.stale_horizon_ms), host, port)
    if namespace not in NODE_TYPES:
        raise ConfigInvalid(f"unknown namespace {namespace!r}")
    if not cloud_url:
        raise ConfigInvalid("an RI service needs the cloud URL")
    registry = SignalRegistry(default_catalog())
    cloud = RemoteCloud(UapiClient(cloud_url), registry)
    node = NODE_TYPES[namespace](cfg, cloud)
    return make_server(NodeService(node, cfg.stale_horizon_ms), host, port)


def serve_ri(namespace: str, cfg: ScenarioConfig, port: int = 0, cloud_url: str | None = None,
             host: str = "127.0.0.1") -> None:
    """Host one RI (or the cloud) until interrupted. Prints the bound URL first."""
    server = make_ri_server(namespace, cfg, port, cloud_url, host)
    h, p = server.server_address[:2]
    print(f"listening http://{h}:{p}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def _spawn(args: list[str]) -> tuple[subprocess.Popen, str]:
    proc = subprocess.Popen([sys.executable, "-m", "mescosim", *args],
                            stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()
    if not line.startswith("listening "):
        proc.kill()
        raise EndpointUnreachable(f"service {args} failed to start: {line!r}")
    return proc, line.split(" ", 1)[1]


def spawn_services(cfg: ScenarioConfig, config_path: str | Path | None = None):
    """Start one cloud process and one process per RI on free loopback ports."""
    import tempfile

    if config_path is None:
        tmp = tempfile.NamedTemporaryFile("w", suffix=".json", delete=False)
        d = cfg.to_dict()
        d.update(deployment="in-process", endpoints={}, out_dir=None, realtime=False)
        json.dump(d, tmp)
        tmp.close()
        config_path = tmp.name
    procs = []
    try:
        cloud, cloud_url = _spawn(["serve", "--namespace", "cloud", "--config", str(config_path), "--port", "0"])
        procs.append(cloud)
        endpoints = {"cloud": cloud_url}
        for ns in NODE_TYPES:
            p, url = _spawn(["serve", "--namespace", ns, "--config", str(config_path),
                             "--port", "0", "--cloud", cloud_url])
            procs.append(p)
            endpoints[ns] = url
    except Exception:
        for p in procs:
            p.kill()
        raise
    return endpoints, procs


# -- metrics -------------------------------------------------------------------------


def _deviation(volts: list[float | None]) -> list[float | None]:
    return [None if v is None else (v - V_REF) / V_REF * 100.0 for v in volts]


def _replay(band: csc.HysteresisBand, devs: list[float | None]) -> tuple[list[int], list[int]]:
    """Tick indices where the band machine switches on and off."""
    mode = csc.Mode.INACTIVE
    on, off = [], []
    for i, d in enumerate(devs):
        if d is None:
            continue
        new = csc.hysteresis_step(band, mode, d)
        if new is not mode:
            (on if new is csc.Mode.ACTIVE else off).append(i)
        mode = new
    return on, off


def compute_metrics(record: RunRecord, over_band: csc.HysteresisBand = csc.OVER_BAND,
                    under_band: csc.HysteresisBand = csc.UNDER_BAND, kind: str | None = None) -> dict:
    """Summary numbers for a run. An empty record gives an empty report."""
    if len(record) == 0:
        return {}
    kind = kind or record.meta.get("kind", "overvoltage")
    band = over_band if kind == "overvoltage" else under_band
    times = record.times_ms
    dt_s = (times[1] - times[0]) / 1000.0 if len(times) > 1 else float(record.meta.get("dt_s", 0.5))
    m: dict[str, Any] = {"kind": kind, "ticks": len(record), "duration_s": (times[-1] - times[0]) / 1000.0 + dt_s}
    for pcc, key in (("pcc2", V_SIN_REF), ("pcc4", V_RSE_REF)):
        devs = _deviation(record.column(key))
        known = [d for d in devs if d is not None]
        m[f"max_rise_{pcc}"] = max(known, default=0.0)
        m[f"min_rise_{pcc}"] = min(known, default=0.0)
        on, off = _replay(band, devs)
        m[f"activations_{pcc}"] = len(on)
        m[f"deactivations_{pcc}"] = len(off)
        recovery = None
        if on:
            later = [i for i in range(on[0] + 1, len(devs)) if devs[i] is not None and abs(devs[i]) < 1.0]
            if later:
                recovery = (times[later[0]] - times[on[0]]) / 1000.0
        m[f"recovery_s_{pcc}"] = recovery
    soc = [v for v in record.column(SOC) if v is not None]
    m["soc_delta"] = soc[-1] - soc[0] if soc else 0.0
    heat = [v or 0.0 for v in record.column(P_BAR_DTU)]
    m["dtu_heat_kwh"] = sum(heat) * dt_s / 3600.0
    for k in ("replication_cycles", "replication_max_lag_ms", "cloud_errors", "stale_control_steps"):
        if k in record.meta:
            m[k] = record.meta[k]
    return m


def format_metrics(metrics: dict) -> str:
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in metrics.items())


def parse_metrics(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


# -- actuation analysis ----------------------------------------------------------------


def first_index(values: list, pred, start: int = 0) -> int | None:
    return next((i for i in range(start, len(values)) if values[i] is not None and pred(values[i])), None)


def device_actuations(record: RunRecord) -> dict[str, int | None]:
    """First tick at which each device's own output shows the scenario action."""
    kind = record.meta.get("kind", "overvoltage")
    p_sin = record.column(P_EL_SIN)
    p_cres = record.column(P_EL_CRES)
    if kind == "overvoltage":
        return {
            "bess": first_index(p_sin, lambda v: v >= 40.0),
            "ehp": first_index(p_cres, lambda v: v > 0.0),
        }
    return {
        "bess": first_index(p_sin, lambda v: v == 0.0),
        "ehp": first_index(p_cres, lambda v: v == 0.0),
        "chp": first_index(record.column(P_TH_CHP), lambda v: v > 46.0),
        "dtu": first_index(record.column(P_BAR_DTU), lambda v: v > 0.0),
    }


def pcc_actuations(record: RunRecord) -> dict[str, int | None]:
    """First tick at which the controlled power at each PCC reflects the action.

    PCC2 carries the battery alone. PCC4 is the RSE converter, so heat pump
    and CHP changes appear there only once P_el_RSE includes them.
    """
    kind = record.meta.get("kind", "overvoltage")
    p_sin = record.column(P_EL_SIN)
    p_rse = record.column(P_EL_RSE)
    if kind == "overvoltage":
        return {"pcc2": first_index(p_sin, lambda v: v >= 40.0),
                "pcc4": first_index(p_rse, lambda v: v > 0.0)}
    return {"pcc2": first_index(p_sin, lambda v: v == 0.0),
            "pcc4": first_index(p_rse, lambda v: v < 0.0)}


def split_extrema(record: RunRecord, key: str, tick: int | None, sense: str) -> tuple[float, float] | None:
    """(pre, post) extreme deviation around an actuation tick; post excludes the tick itself."""
    if tick is None:
        return None
    devs = [d for d in _deviation(record.column(key))]
    pre = [d for d in devs[: tick + 1] if d is not None]
    post = [d for d in devs[tick + 1:] if d is not None]
    if not pre or not post:
        return None
    f = max if sense == "over" else min
    return f(pre), f(post)
