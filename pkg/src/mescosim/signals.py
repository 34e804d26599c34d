"""Namespaced signal registry.

Every value exchanged between research infrastructures (RIs) is a sample of a
registered signal. A signal is identified by ``"<namespace>/<name>"`` and
carries a unit and an operational range; out-of-range writes are clamped and
flagged rather than rejected.
"""

from __future__ import annotations

import csv
import enum
import math
import threading
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable


class SignalError(Exception):
    """Base class for registry errors."""


class DuplicateSignal(SignalError):
    pass


class InvalidRange(SignalError):
    pass


class UnknownSignal(SignalError, KeyError):
    pass


class NonFinite(SignalError, ValueError):
    pass


class Superseded(SignalError):
    """A write carried a timestamp older than the stored sample."""


class Kind(str, enum.Enum):
    MEASUREMENT = "measurement"
    SETPOINT = "setpoint"
    STATUS = "status"


class Quality(str, enum.Enum):
    OK = "ok"
    CLAMPED = "clamped"
    STALE = "stale"


@dataclass(frozen=True)
class SignalDescriptor:
    namespace: str
    name: str
    unit: str
    min: float
    max: float
    kind: Kind = Kind.MEASUREMENT

    def __post_init__(self):
        if not (self.min < self.max):
            raise InvalidRange(f"{self.key}: min={self.min} must be < max={self.max}")
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def key(self) -> str:
        return signal_key(self.namespace, self.name)

    def clamp(self, value: float) -> float:
        return min(max(value, self.min), self.max)


@dataclass(frozen=True)
class SignalSample:
    descriptor: SignalDescriptor
    value: float
    timestamp: int
    origin: str
    quality: Quality = Quality.OK

    @property
    def key(self) -> str:
        return self.descriptor.key


def signal_key(namespace: str, name: str) -> str:
    return f"{namespace}/{name}"


def split_key(key: str) -> tuple[str, str]:
    namespace, _, name = key.partition("/")
    return namespace, name


def lww_wins(candidate: SignalSample, current: SignalSample | None) -> bool:
    """True if ``candidate`` should replace ``current`` under last-write-wins.

    Newer timestamp wins; equal timestamps go to the lexicographically smaller
    origin. Identical (timestamp, origin) pairs never replace each other.
    """
    if current is None:
        return True
    if candidate.timestamp != current.timestamp:
        return candidate.timestamp > current.timestamp
    return candidate.origin < current.origin


class SignalRegistry:
    """Catalog of descriptors plus the latest accepted sample per signal.

    Safe to share across threads: every mutation of a key happens under one
    lock, so readers see either the old or the new sample.
    """

    def __init__(self, descriptors: Iterable[SignalDescriptor] = ()):
        self._catalog: dict[str, SignalDescriptor] = {}
        self._latest: dict[str, SignalSample] = {}
        self._lock = threading.Lock()
        for d in descriptors:
            self.register_signal(d)

    # -- catalog -----------------------------------------------------------

    def register_signal(self, descriptor: SignalDescriptor) -> str:
        with self._lock:
            if descriptor.key in self._catalog:
                raise DuplicateSignal(descriptor.key)
            self._catalog[descriptor.key] = descriptor
        return descriptor.key

    @property
    def catalog(self) -> dict[str, SignalDescriptor]:
        return dict(self._catalog)

    def keys(self) -> list[str]:
        return list(self._catalog)

    def namespaces(self) -> set[str]:
        return {d.namespace for d in self._catalog.values()}

    def descriptors(self, namespace: str | None = None) -> list[SignalDescriptor]:
        return [d for d in self._catalog.values() if namespace is None or d.namespace == namespace]

    def descriptor(self, key: str) -> SignalDescriptor:
        try:
            return self._catalog[key]
        except KeyError:
            raise UnknownSignal(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self._catalog

    # -- samples -----------------------------------------------------------

    def write(self, key: str, raw_value: float, timestamp: int, origin: str) -> SignalSample:
        """Clamp and store a raw value.

        Raises Superseded (without mutating) if ``timestamp`` is older than the
        stored sample's.
        """
        d = self.descriptor(key)
        raw = float(raw_value)
        if not math.isfinite(raw):
            raise NonFinite(f"{key}: {raw_value!r}")
        value = d.clamp(raw)
        quality = Quality.OK if value == raw else Quality.CLAMPED
        sample = SignalSample(d, value, int(timestamp), origin, quality)
        with self._lock:
            current = self._latest.get(key)
            if current is not None and sample.timestamp < current.timestamp:
                raise Superseded(
                    f"{key}: timestamp {sample.timestamp} older than stored {current.timestamp}"
                )
            self._latest[key] = sample
        return sample

    def merge(self, sample: SignalSample) -> bool:
        """Apply a replicated sample by last-write-wins. Returns True if stored."""
        d = self.descriptor(sample.key)
        if sample.descriptor != d:
            sample = replace(sample, descriptor=d)
        with self._lock:
            if not lww_wins(sample, self._latest.get(sample.key)):
                return False
            self._latest[sample.key] = sample
        return True

    def read(self, key: str) -> SignalSample | None:
        self.descriptor(key)
        return self._latest.get(key)

    def value(self, key: str, default: float | None = None) -> float | None:
        sample = self.read(key)
        return default if sample is None else sample.value

    def is_stale(self, key: str, now: int, horizon: int) -> bool:
        sample = self.read(key)
        return sample is None or now - sample.timestamp > horizon

    def snapshot(self) -> dict[str, SignalSample]:
        with self._lock:
            return dict(self._latest)


# -- catalog files -----------------------------------------------------------

CATALOG_FIELDS = ("namespace", "name", "unit", "min", "max", "kind")


def read_catalog(path: str | Path) -> list[SignalDescriptor]:
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_catalog(fh)


def _parse_catalog(lines) -> list[SignalDescriptor]:
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CATALOG_FIELDS:
        raise ValueError(f"catalog header must be {','.join(CATALOG_FIELDS)}")
    return [
        SignalDescriptor(
            row["namespace"], row["name"], row["unit"],
            float(row["min"]), float(row["max"]), Kind(row["kind"]),
        )
        for row in reader
    ]


def write_catalog(path: str | Path, descriptors: Iterable[SignalDescriptor]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_FIELDS)
        for d in descriptors:
            w.writerow([d.namespace, d.name, d.unit, _fmt(d.min), _fmt(d.max), d.kind.value])


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


def _packaged(name: str) -> list[SignalDescriptor]:
    text = resources.files("mescosim").joinpath("data", name).read_text(encoding="utf-8")
    return _parse_catalog(text.splitlines())


def exchanged_catalog() -> list[SignalDescriptor]:
    """The 14 exchanged signals with their operational ranges, plus ON_OFF and T_CRES."""
    return _packaged("catalog.csv")


def control_extensions() -> list[SignalDescriptor]:
    """Setpoints and measurements the controller wiring needs beyond the exchanged set."""
    return _packaged("control_extensions.csv")


def default_catalog() -> list[SignalDescriptor]:
    return exchanged_catalog() + control_extensions()


def default_registry() -> SignalRegistry:
    return SignalRegistry(default_catalog())


# Keys used across modules; each must resolve in default_catalog().
P_EL_SIN = "SIN/P_el_SIN"
Q_EL_SIN = "SIN/Q_el_SIN"
P_EL_SIN_REF = "SIN/P_el_SIN_ref"
Q_EL_SIN_REF = "SIN/Q_el_SIN_ref"
SOC = "SIN/SoC"
V_SIN_REF = "SIN/V_SIN_ref"
F_SIN_REF = "SIN/f_SIN_ref"
P_TH_CHP = "RSE/P_th_CHP"
P_TH_CHP_REF = "RSE/P_th_CHP_ref"
CHP_ON_OFF = "RSE/CHP_ON_OFF"
P_EL_RSE = "RSE/P_el_RSE"
Q_EL_RSE = "RSE/Q_el_RSE"
Q_EL_RSE_REF = "RSE/Q_el_RSE_ref"
V_RSE_REF = "RSE/V_RSE_ref"
F_RSE_REF = "RSE/f_RSE_ref"
ON_OFF = "RSE/ON_OFF"
P_TH_CRES = "CRES/P_th_CRES"
P_EL_CRES = "CRES/P_el_CRES"
T_CRES = "CRES/T_CRES"
P_BAR_DTU = "DTU/P_bar_DTU"
T_DTU = "DTU/T_DTU"

KNOWN_KEYS = (
    P_EL_SIN, Q_EL_SIN, P_EL_SIN_REF, Q_EL_SIN_REF, SOC, V_SIN_REF, F_SIN_REF,
    P_TH_CHP, P_TH_CHP_REF, CHP_ON_OFF, P_EL_RSE, Q_EL_RSE, Q_EL_RSE_REF,
    V_RSE_REF, F_RSE_REF, ON_OFF, P_TH_CRES, P_EL_CRES, T_CRES, P_BAR_DTU, T_DTU,
)

# RI namespaces taking part in an experiment; TUD hosts the grid and owns no
# exchanged signal of its own.
NAMESPACES = ("SIN", "RSE", "CRES", "DTU", "TUD")
