"""Star replication between RI-local registries and a shared cloud registry.

Replication runs in discrete cycles. A push cycle offers every locally changed
signal to the cloud; a pull cycle offers every newer cloud sample of a
subscribed signal back to the local store. Both directions merge by
last-write-wins (newest timestamp, ties to the smaller origin id).

Links model loss as an independent Bernoulli trial per key and cycle, and
latency as a delay to a later cycle boundary.
"""

from __future__ import annotations

import enum
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from .signals import SignalRegistry, SignalSample, UnknownSignal, lww_wins


class Direction(str, enum.Enum):
    PUSH = "local->cloud"
    PULL = "cloud->local"


class CloudPort(Protocol):
    """What a replication link needs from the cloud side of the star."""

    def merge_many(self, samples: list[SignalSample]) -> list[bool]: ...

    def fetch(self, keys: list[str]) -> dict[str, SignalSample | None]: ...


@dataclass
class NodeStore:
    node_id: str
    registry: SignalRegistry
    # Last sample delivered to the cloud per key.
    pushed: dict[str, SignalSample] = field(default_factory=dict)

    @property
    def push_cursor(self) -> dict[str, int]:
        return {k: s.timestamp for k, s in self.pushed.items()}

    def mark_pushed(self, sample: SignalSample) -> None:
        prev = self.pushed.get(sample.key)
        if prev is None or lww_wins(sample, prev):
            self.pushed[sample.key] = sample


class CloudStore:
    """The cloud node: one registry holding the union of all namespaces."""

    def __init__(self, registry: SignalRegistry):
        self.registry = registry

    def merge_many(self, samples: list[SignalSample]) -> list[bool]:
        return [self.registry.merge(s) for s in samples]

    def fetch(self, keys: list[str]) -> dict[str, SignalSample | None]:
        return {k: self.registry.read(k) for k in keys}


@dataclass
class ReplicationLink:
    period_ms: int = 500
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_probability: float = 0.0
    direction: Direction = Direction.PUSH
    seed: int | str = 0
    cycle: int = 0

    def __post_init__(self):
        if self.period_ms <= 0:
            raise ValueError("period_ms must be positive")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        # 1.0 is accepted so tests can force a fully lossy cycle; sustained
        # use of 1.0 forfeits eventual delivery.
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        self.direction = Direction(self.direction)
        self._rng = random.Random(f"{self.seed}:{self.direction.value}")
        self._in_flight: list[tuple[int, SignalSample]] = []

    def _delay_cycles(self) -> int:
        delay = self.latency_ms
        if self.jitter_ms:
            delay += self._rng.uniform(0.0, self.jitter_ms)
        return math.ceil(delay / self.period_ms) if delay > 0 else 0

    def _due(self) -> list[SignalSample]:
        due = [s for c, s in self._in_flight if c <= self.cycle]
        self._in_flight = [(c, s) for c, s in self._in_flight if c > self.cycle]
        return due

    def _transmit(self, offers: list[SignalSample]) -> list[SignalSample]:
        """Apply loss and latency to offers; return those arriving this cycle."""
        in_flight = {s for _, s in self._in_flight}
        now = []
        for sample in offers:
            if sample in in_flight:
                continue
            if self._rng.random() < self.drop_probability:
                continue
            delay = self._delay_cycles()
            if delay == 0:
                now.append(sample)
            else:
                self._in_flight.append((self.cycle + delay, sample))
        return now

    @property
    def in_flight(self) -> list[SignalSample]:
        return [s for _, s in self._in_flight]


@dataclass
class ReplicationTrace:
    """Write and delivery log used to measure end-to-end lag in cycles."""

    subscribers: dict[str, set[str]] = field(default_factory=dict)
    writes: list[tuple[str, int, int, str | None]] = field(default_factory=list)
    deliveries: list[tuple[str, str, int, int]] = field(default_factory=list)

    def record_write(self, key: str, timestamp: int, cycle: int, node_id: str | None = None) -> None:
        """``cycle`` is the index of the next replication cycle to run.

        The writing node, if given, already holds the sample and is not waited on.
        """
        self.writes.append((key, timestamp, cycle, node_id))

    def record_delivery(self, key: str, node_id: str, timestamp: int, cycle: int) -> None:
        self.deliveries.append((key, node_id, timestamp, cycle))


def push_cycle(local: NodeStore, link: ReplicationLink, cloud: CloudPort) -> int:
    """Run one local->cloud cycle. Returns the number of samples delivered."""
    if link.direction is not Direction.PUSH:
        raise ValueError("push_cycle needs a local->cloud link")
    latest = local.registry.snapshot()
    offers = [
        latest[k] for k in sorted(latest)
        if local.pushed.get(k) != latest[k]
    ]
    delivered = link._due() + link._transmit(offers)
    if delivered:
        cloud.merge_many(delivered)
        for s in delivered:
            local.mark_pushed(s)
    link.cycle += 1
    return len(delivered)


def pull_cycle(
    cloud: CloudPort,
    link: ReplicationLink,
    local: NodeStore,
    subscriptions: Iterable[str],
    trace: ReplicationTrace | None = None,
) -> int:
    """Run one cloud->local cycle for the subscribed keys.

    Returns the number of samples merged into the local store.
    """
    if link.direction is not Direction.PULL:
        raise ValueError("pull_cycle needs a cloud->local link")
    keys = sorted(set(subscriptions))
    for k in keys:
        if k not in local.registry:
            raise UnknownSignal(k)
    remote = cloud.fetch(keys) if keys else {}
    offers = [
        s for k in keys
        if (s := remote.get(k)) is not None and lww_wins(s, local.registry.read(k))
    ]
    count = 0
    cycle = link.cycle
    for sample in link._due() + link._transmit(offers):
        if local.registry.merge(sample):
            count += 1
            # The cloud already holds this sample; never echo it back.
            local.mark_pushed(sample)
            if trace is not None:
                trace.record_delivery(sample.key, local.node_id, sample.timestamp, cycle)
    link.cycle += 1
    return count


def end_to_end_lag(trace: ReplicationTrace) -> dict[str, int | None]:
    """Per key, the worst number of cycles from a write until every subscriber sees it.

    A write made before cycle ``c`` that becomes visible during cycle ``c``
    has lag 1. ``None`` marks a write some subscriber never observed.
    """
    seen: dict[tuple[str, str], list[tuple[int, int]]] = defaultdict(list)
    for key, node, ts, cycle in trace.deliveries:
        seen[key, node].append((cycle, ts))
    for v in seen.values():
        v.sort()
    report: dict[str, int | None] = {}
    for key, ts, write_cycle, writer in trace.writes:
        worst = report.get(key, 0)
        if worst is None:
            continue
        for node in sorted(trace.subscribers.get(key, set()) - {writer}):
            visible = next((c for c, t in seen[key, node] if t >= ts and c >= write_cycle), None)
            if visible is None:
                worst = None
                break
            worst = max(worst, visible - write_cycle + 1)
        report[key] = worst
    return report


class ReplicationNetwork:
    """In-memory star: several local stores, one cloud, one link pair per node.

    Each ``cycle()`` runs every push before any pull, so a lossless write is
    visible at all subscribers after one cycle.
    """

    def __init__(self, cloud: CloudStore, link_defaults: dict | None = None, seed: int = 0):
        self.cloud = cloud
        self.nodes: dict[str, NodeStore] = {}
        self.push_links: dict[str, ReplicationLink] = {}
        self.pull_links: dict[str, ReplicationLink] = {}
        self.subscriptions: dict[str, set[str]] = {}
        self.trace = ReplicationTrace()
        self.cycles = 0
        self._link_defaults = dict(link_defaults or {})
        self._seed = seed

    def add_node(self, node: NodeStore, subscriptions: Iterable[str] = ()) -> None:
        self.nodes[node.node_id] = node
        self.push_links[node.node_id] = ReplicationLink(
            direction=Direction.PUSH, seed=f"{self._seed}:{node.node_id}", **self._link_defaults)
        self.pull_links[node.node_id] = ReplicationLink(
            direction=Direction.PULL, seed=f"{self._seed}:{node.node_id}", **self._link_defaults)
        self.subscriptions[node.node_id] = set(subscriptions)
        for key in subscriptions:
            self.trace.subscribers.setdefault(key, set()).add(node.node_id)

    def write(self, node_id: str, key: str, value: float, timestamp: int) -> SignalSample:
        sample = self.nodes[node_id].registry.write(key, value, timestamp, node_id)
        self.trace.record_write(key, timestamp, self.cycles, node_id)
        return sample

    def set_drop_probability(self, p: float) -> None:
        for link in (*self.push_links.values(), *self.pull_links.values()):
            link.drop_probability = p

    def cycle(self) -> int:
        moved = 0
        for nid, node in self.nodes.items():
            moved += push_cycle(node, self.push_links[nid], self.cloud)
        for nid, node in self.nodes.items():
            moved += pull_cycle(self.cloud, self.pull_links[nid], node,
                                self.subscriptions[nid], trace=self.trace)
        self.cycles += 1
        return moved

    def converged(self) -> bool:
        """True once every subscriber mirrors the cloud on its subscribed keys."""
        for nid, node in self.nodes.items():
            for key in self.subscriptions[nid]:
                if node.registry.read(key) != self.cloud.registry.read(key):
                    return False
        return True
