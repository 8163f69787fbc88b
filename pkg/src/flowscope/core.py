"""Shared vocabulary: flow records, endpoints, pairs, topology, job clusters."""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

GpuAddr = str
SwitchId = str
MachineId = str

# int64 microseconds; records beyond this cannot compute end_time safely
MAX_TIME_US = 2**63 - 1


class FlowscopeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidPairError(FlowscopeError, ValueError):
    pass


class InvalidFlowError(FlowscopeError, ValueError):
    """A flow record violates the schema. ``reason`` is a short machine-friendly tag."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class UnknownAddressError(FlowscopeError, KeyError):
    def __init__(self, addresses: Iterable[str]):
        self.addresses = sorted(set(addresses))
        shown = ", ".join(self.addresses[:10])
        more = f" (+{len(self.addresses) - 10} more)" if len(self.addresses) > 10 else ""
        super().__init__(f"{len(self.addresses)} address(es) missing from topology: {shown}{more}")

    def __str__(self) -> str:
        return self.args[0]


class CommType(str, enum.Enum):
    DP = "DP"
    PP = "PP"


@dataclass(frozen=True, order=True)
class CommPair:
    """Unordered GPU pair stored with ``u < v``. Build with :func:`canonical_pair`."""

    u: GpuAddr
    v: GpuAddr

    def __post_init__(self):
        if not self.u:
            raise InvalidPairError("pair endpoints must be non-empty")
        if not self.u < self.v:
            raise InvalidPairError(f"pair must satisfy u < v, got ({self.u!r}, {self.v!r})")

    def __iter__(self):
        yield self.u
        yield self.v

    def __str__(self) -> str:
        return f"{self.u}<->{self.v}"


def canonical_pair(a: GpuAddr, b: GpuAddr) -> CommPair:
    if a == b:
        raise InvalidPairError(f"a pair needs two distinct endpoints, got {a!r} twice")
    return CommPair(a, b) if a < b else CommPair(b, a)


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """One unidirectional mirrored flow. Times in integer microseconds."""

    start: int
    src: GpuAddr
    dst: GpuAddr
    switches: Tuple[SwitchId, ...]
    size: int
    duration: int

    def __post_init__(self):
        if not self.src or not self.dst:
            raise InvalidFlowError("empty-address")
        if self.src == self.dst:
            raise InvalidFlowError("self-flow", self.src)
        if not self.switches or any(not s for s in self.switches):
            raise InvalidFlowError("no-switches")
        if type(self.start) is not int or type(self.size) is not int or type(self.duration) is not int:
            raise InvalidFlowError("non-integer-field")
        if self.start < 0:
            raise InvalidFlowError("negative-start", str(self.start))
        if self.size < 1:
            raise InvalidFlowError("bad-size", str(self.size))
        if self.duration < 1:
            raise InvalidFlowError("bad-duration", str(self.duration))
        if self.start > MAX_TIME_US - self.duration:
            raise InvalidFlowError("end-overflow", str(self.start))

    @property
    def end(self) -> int:
        return self.start + self.duration

    @property
    def pair(self) -> CommPair:
        return canonical_pair(self.src, self.dst)

    def sort_key(self):
        return (self.start, self.src, self.dst, self.switches, self.size, self.duration)


def make_flow(start, src, dst, switches, size, duration) -> FlowRecord:
    """Build a record with interned strings; large datasets repeat the same tokens."""
    intern = sys.intern
    return FlowRecord(
        start, intern(src), intern(dst), tuple(intern(s) for s in switches), size, duration
    )


def group_by_pair(flows: Iterable[FlowRecord]) -> Dict[CommPair, List[FlowRecord]]:
    """Partition flows by canonical pair, preserving input order within each pair."""
    groups: Dict[CommPair, List[FlowRecord]] = {}
    cache: Dict[Tuple[str, str], CommPair] = {}
    for f in flows:
        key = (f.src, f.dst)
        pair = cache.get(key)
        if pair is None:
            pair = cache[key] = canonical_pair(f.src, f.dst)
        groups.setdefault(pair, []).append(f)
    return groups


@dataclass(frozen=True)
class Topology:
    """GPU address to machine map, plus optional per-machine metadata."""

    machine_of: Mapping[GpuAddr, MachineId]
    metadata: Mapping[MachineId, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        for addr, machine in self.machine_of.items():
            if not addr or not machine:
                raise ValueError("topology addresses and machine ids must be non-empty")

    def machine(self, addr: GpuAddr) -> MachineId:
        try:
            return self.machine_of[addr]
        except KeyError:
            raise UnknownAddressError([addr]) from None

    def machines_for(self, gpus: Iterable[GpuAddr]) -> FrozenSet[MachineId]:
        missing = [g for g in gpus if g not in self.machine_of]
        if missing:
            raise UnknownAddressError(missing)
        return frozenset(self.machine_of[g] for g in gpus)

    @property
    def addresses(self) -> List[GpuAddr]:
        return sorted(self.machine_of)

    @property
    def machines(self) -> FrozenSet[MachineId]:
        return frozenset(self.machine_of.values())

    def __len__(self) -> int:
        return len(self.machine_of)


@dataclass(frozen=True)
class JobCluster:
    job_id: int
    gpus: FrozenSet[GpuAddr]
    machines: FrozenSet[MachineId]
    merge_ambiguous: bool = False

    def __post_init__(self):
        if not self.gpus:
            raise ValueError("a job cluster needs at least one GPU")

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "gpu_count": len(self.gpus),
            "machine_count": len(self.machines),
            "gpus": sorted(self.gpus),
            "machines": sorted(self.machines),
            "merge_ambiguity": self.merge_ambiguous,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "JobCluster":
        return cls(
            job_id=int(obj["job_id"]),
            gpus=frozenset(obj["gpus"]),
            machines=frozenset(obj["machines"]),
            merge_ambiguous=bool(obj.get("merge_ambiguity", False)),
        )


def first_or_none(items: Iterable) -> Optional[object]:
    for item in items:
        return item
    return None
