"""Training-job recognition from who-talks-to-whom.

GPUs of one job only ever talk to each other, so connected components of the
flow graph are job fragments. A job whose DP and PP traffic does not form a
single connected graph (tensor-parallel traffic inside a machine is never
mirrored) shows up as several fragments. Fragments spanning exactly the same
machine set are merged back into one job.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .core import FlowRecord, GpuAddr, JobCluster, MachineId, Topology, UnknownAddressError

log = logging.getLogger(__name__)


class DisjointSet:
    """Union-find over hashable items with path halving and union by rank."""

    def __init__(self, items: Iterable = ()):
        self._index: Dict[object, int] = {}
        self._items: List[object] = []
        self._parent: List[int] = []
        self._rank: List[int] = []
        for item in items:
            self.add(item)

    def add(self, item) -> int:
        idx = self._index.get(item)
        if idx is None:
            idx = len(self._items)
            self._index[item] = idx
            self._items.append(item)
            self._parent.append(idx)
            self._rank.append(0)
        return idx

    def __contains__(self, item) -> bool:
        return item in self._index

    def __len__(self) -> int:
        return len(self._items)

    def _find(self, idx: int) -> int:
        parent = self._parent
        while parent[idx] != idx:
            parent[idx] = parent[parent[idx]]
            idx = parent[idx]
        return idx

    def find(self, item):
        return self._items[self._find(self._index[item])]

    def union(self, a, b) -> None:
        ra, rb = self._find(self.add(a)), self._find(self.add(b))
        if ra == rb:
            return
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1

    def groups(self) -> List[Set]:
        by_root: Dict[int, Set] = {}
        for idx, item in enumerate(self._items):
            by_root.setdefault(self._find(idx), set()).add(item)
        return list(by_root.values())


@dataclass(frozen=True)
class CrossMachineCluster:
    """Connected component of the flow graph, with its machine footprint."""

    gpus: FrozenSet[GpuAddr]
    machines: FrozenSet[MachineId]
    # machine pairs that exchanged at least one flow inside this component
    machine_links: FrozenSet[Tuple[MachineId, MachineId]] = field(default=frozenset(), compare=False)

    @property
    def smallest(self) -> GpuAddr:
        return min(self.gpus)


@dataclass(frozen=True)
class Recognition:
    jobs: Tuple[JobCluster, ...]
    idle_endpoints: Tuple[GpuAddr, ...] = ()

    def to_json(self) -> dict:
        return {
            "jobs": [j.to_json() for j in self.jobs],
            "idle_endpoints": list(self.idle_endpoints),
        }

    def job_of(self) -> Dict[GpuAddr, int]:
        return {g: j.job_id for j in self.jobs for g in j.gpus}


def _flow_pairs(flows: Iterable[FlowRecord]) -> Set[Tuple[GpuAddr, GpuAddr]]:
    pairs = set()
    for f in flows:
        pairs.add((f.src, f.dst) if f.src < f.dst else (f.dst, f.src))
    return pairs


def build_cross_machine_clusters(
    flows: Iterable[FlowRecord], topo: Optional[Topology] = None
) -> List[CrossMachineCluster]:
    """Connected components of the flow graph.

    With ``topo`` the machine set of each component is filled in; any address
    missing from ``topo`` raises :class:`UnknownAddressError` naming all of them.
    Components are returned sorted by smallest member address.
    """
    pairs = sorted(_flow_pairs(flows))
    ds = DisjointSet()
    for u, v in pairs:
        ds.union(u, v)
    groups = ds.groups()

    if topo is not None:
        missing = {g for grp in groups for g in grp if g not in topo.machine_of}
        if missing:
            raise UnknownAddressError(missing)
    links: Dict[object, Set[Tuple[str, str]]] = {}
    if topo is not None:
        machine_of = topo.machine_of
        for u, v in pairs:
            mu, mv = machine_of[u], machine_of[v]
            link = (mu, mv) if mu <= mv else (mv, mu)
            links.setdefault(ds.find(u), set()).add(link)

    clusters = []
    for grp in groups:
        machines = frozenset(topo.machine_of[g] for g in grp) if topo is not None else frozenset()
        root = ds.find(next(iter(grp)))
        clusters.append(CrossMachineCluster(frozenset(grp), machines, frozenset(links.get(root, ()))))
    clusters.sort(key=lambda c: c.smallest)
    return clusters


def merge_by_topology(clusters: Sequence[CrossMachineCluster], topo: Topology) -> List[JobCluster]:
    """Merge clusters with identical machine sets; number jobs by smallest member address.

    A merged job is flagged ``merge_ambiguous`` when some of its fragments share
    no communicating machine pair with the rest, which is what two unrelated
    jobs co-located on the same machines would look like.
    """
    by_machines: Dict[FrozenSet[MachineId], List[CrossMachineCluster]] = {}
    for c in clusters:
        machines = c.machines or topo.machines_for(c.gpus)
        by_machines.setdefault(machines, []).append(c)

    merged = []
    for machines, parts in by_machines.items():
        gpus = frozenset().union(*(p.gpus for p in parts))
        merged.append((min(gpus), gpus, machines, _ambiguous(parts)))
    merged.sort(key=lambda m: m[0])
    return [
        JobCluster(job_id=i, gpus=gpus, machines=machines, merge_ambiguous=amb)
        for i, (_, gpus, machines, amb) in enumerate(merged)
    ]


def _ambiguous(parts: Sequence[CrossMachineCluster]) -> bool:
    """True if the fragments' machine-link sets do not form one connected overlap graph."""
    if len(parts) < 2:
        return False
    ds = DisjointSet(range(len(parts)))
    owner: Dict[Tuple[str, str], int] = {}
    for i, p in enumerate(parts):
        for link in p.machine_links:
            j = owner.setdefault(link, i)
            if j != i:
                ds.union(i, j)
    return len(ds.groups()) > 1


def recognize_jobs(flows: Iterable[FlowRecord], topo: Topology) -> Recognition:
    """Full recognition: flow-graph components merged by machine-set equality.

    Topology addresses that carry no flows are returned as idle endpoints.
    """
    flows = list(flows)
    clusters = build_cross_machine_clusters(flows, topo)
    jobs = merge_by_topology(clusters, topo)
    seen = {g for c in clusters for g in c.gpus}
    idle = tuple(a for a in topo.addresses if a not in seen)
    ambiguous = [j.job_id for j in jobs if j.merge_ambiguous]
    if ambiguous:
        log.warning("jobs %s merged fragments that never exchanged traffic; may be distinct jobs", ambiguous)
    return Recognition(tuple(jobs), idle)
