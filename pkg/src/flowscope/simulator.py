"""Synthetic mirrored-flow generator with ground truth.

Each job runs a 3D-parallel training loop. Ranks are laid out TP innermost,
PP middle, DP outermost, with TP confined to a machine so its traffic never
reaches a switch. A step is a GPipe-style forward/backward pass over the
micro-batches (PP activation and gradient transfers between adjacent stages)
followed by a ring all-reduce inside every DP group: for each gradient bucket
the ring runs 2(d-1) phases, every ring link sending one flow per phase.

The fabric is rail-optimised: machines are grouped in pods, GPU ``i`` of a
machine hangs off leaf ``(pod, i)``, and traffic leaving a leaf crosses one
spine chosen by a fixed hash of its endpoints.

All randomness comes from one seeded PCG64 generator consumed in a fixed
order, and all times are integer microseconds, so identical inputs give
byte-identical output.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import CommPair, CommType, FlowRecord, GpuAddr, Topology, canonical_pair
from .ingest import FlowDataset, make_dataset

SIM_EPOCH_US = 1_700_000_000_000_000
MiB = 1 << 20

# per-flow efficiency size / (size + overhead) puts 2-16 MiB flows at ~100-180 Gb/s
LINK_GBPS = 200
FLOW_OVERHEAD_BYTES = 2 * MiB
PHASE_GAP_US = 30


class SpecError(ValueError):
    """A job, noise or fault description is inconsistent."""


@dataclass(frozen=True)
class JobSpec:
    machines: int
    gpus_per_machine: int = 8
    tp: int = 8
    pp: int = 1
    dp: int = 1
    micro_batches: int = 4
    step_compute_time: int = 2_000_000
    pp_flow_size: int = 4 * MiB
    dp_total_bytes: int = 16 * MiB
    dp_chunking: Tuple[float, ...] = (0.4, 0.35, 0.25)
    steps: int = 10
    start_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dp_chunking", tuple(float(f) for f in self.dp_chunking))
        for name in ("machines", "gpus_per_machine", "tp", "pp", "dp", "micro_batches", "steps"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.tp * self.pp * self.dp != self.machines * self.gpus_per_machine:
            raise SpecError(
                f"tp*pp*dp = {self.tp * self.pp * self.dp} must equal machines*gpus_per_machine "
                f"= {self.machines * self.gpus_per_machine}"
            )
        if self.tp > self.gpus_per_machine:
            raise SpecError("tensor parallelism must fit inside one machine (tp <= gpus_per_machine)")
        if self.step_compute_time < 1000:
            raise SpecError("step_compute_time must be at least 1000 us")
        if self.pp_flow_size < 1 or self.dp_total_bytes < 1:
            raise SpecError("flow sizes must be positive")
        if self.start_offset < 0:
            raise SpecError("start_offset must be >= 0")
        fracs = self.dp_chunking
        if any(not 0.0 < f <= 1.0 for f in fracs):
            raise SpecError("dp_chunking fractions must lie in (0, 1]")
        sizes = {self.chunk_size(f) for f in fracs}
        if len(sizes) < 2:
            raise SpecError("dp_chunking must yield at least two distinct flow sizes")

    @property
    def world(self) -> int:
        return self.machines * self.gpus_per_machine

    def chunk_size(self, frac: float) -> int:
        return max(1, int(round(self.dp_total_bytes * frac)))

    def rank(self, t: int, p: int, k: int) -> int:
        return t + self.tp * (p + self.pp * k)

    def coords(self, rank: int) -> Tuple[int, int, int]:
        t = rank % self.tp
        p = (rank // self.tp) % self.pp
        k = rank // (self.tp * self.pp)
        return t, p, k

    @classmethod
    def from_json(cls, obj: Mapping) -> "JobSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown job fields: {sorted(unknown)}")
        try:
            return cls(**{k: (tuple(v) if k == "dp_chunking" else int(v)) for k, v in obj.items()})
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc


@dataclass(frozen=True)
class NoiseSpec:
    """Collection noise.

    ``size_collapse_prob`` is the per-step probability that all DP flows on a
    lossy mirror link carry one size. ``lossy_ring_fraction`` is the fraction
    of DP rings (size >= 3, all links visible) that have one such link.
    """

    drop_prob: float = 0.0
    duplicate_prob: float = 0.0
    jitter_sigma: float = 0.0
    size_collapse_prob: float = 0.0
    lossy_ring_fraction: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{f.name} must lie in [0, 1], got {v}")

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls()

    @classmethod
    def default(cls) -> "NoiseSpec":
        """Profile calibrated so unrefined classification loses a few percent on short windows."""
        return cls(
            drop_prob=0.002,
            duplicate_prob=0.002,
            jitter_sigma=0.02,
            size_collapse_prob=0.4,
            lossy_ring_fraction=1.0,
        )

    @classmethod
    def from_json(cls, obj) -> "NoiseSpec":
        if isinstance(obj, str):
            if obj not in NOISE_PROFILES:
                raise SpecError(f"unknown noise profile {obj!r}; known: {sorted(NOISE_PROFILES)}")
            return NOISE_PROFILES[obj]()
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown noise fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in obj.items()})


NOISE_PROFILES = {"zero": NoiseSpec.zero, "default": NoiseSpec.default}


class FaultKind(str, enum.Enum):
    SLOW_STEP = "SLOW_STEP"
    SLOW_DP_GROUP = "SLOW_DP_GROUP"
    THROTTLED_SWITCH = "THROTTLED_SWITCH"
    CONGESTED_SWITCH_COUNT = "CONGESTED_SWITCH_COUNT"


@dataclass(frozen=True)
class FaultSpec:
    """An injected degradation.

    ``subject`` is ``"job<j>"`` for SLOW_STEP, ``"job<j>/tp<t>/pp<p>"`` for
    SLOW_DP_GROUP and a switch id for the switch faults. ``job`` is the index
    of the affected job spec (for CONGESTED_SWITCH_COUNT, the job whose DP
    groups get rerouted). ``magnitude`` is a slowdown factor, except for
    CONGESTED_SWITCH_COUNT where it is the number of rerouted DP groups.
    """

    kind: FaultKind
    subject: str
    steps: Tuple[int, ...]
    magnitude: float
    job: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "subject": self.subject,
            "steps": list(self.steps),
            "magnitude": self.magnitude,
            "job": self.job,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FaultSpec":
        try:
            return cls(
                FaultKind(obj["kind"]),
                str(obj["subject"]),
                tuple(int(s) for s in obj["steps"]),
                float(obj["magnitude"]),
                None if obj.get("job") is None else int(obj["job"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SpecError(f"bad fault description {obj!r}: {exc}") from exc


@dataclass(frozen=True)
class Fabric:
    pod_machines: int = 8
    spines: int = 8

    def __post_init__(self):
        if self.pod_machines < 1 or self.spines < 1:
            raise SpecError("fabric sizes must be >= 1")

    def leaf(self, machine: int, local: int) -> str:
        return f"leaf-p{machine // self.pod_machines}-r{local}"

    def spine(self, a: Tuple[int, int], b: Tuple[int, int]) -> str:
        (m1, l1), (m2, l2) = sorted((a, b))
        return f"spine-{(m1 * 7 + m2 * 13 + l1 * 3 + l2 * 5) % self.spines}"

    def path(self, src: Tuple[int, int], dst: Tuple[int, int]) -> Tuple[str, ...]:
        la, lb = self.leaf(*src), self.leaf(*dst)
        if la == lb:
            return (la,)
        return (la, self.spine(src, dst), lb)

    def switches(self, machines: int, gpus_per_machine: int) -> List[str]:
        pods = -(-machines // self.pod_machines)
        leaves = [f"leaf-p{p}-r{r}" for p in range(pods) for r in range(gpus_per_machine)]
        return leaves + [f"spine-{s}" for s in range(self.spines)]


def gpu_address(machine: int, local: int) -> str:
    return f"10.{machine // 256}.{machine % 256}.{local + 1}"


def machine_name(machine: int) -> str:
    return f"m{machine:04d}"


def flow_duration(size: int, factor: float = 1.0) -> int:
    """Transfer time in us at the nominal per-flow rate, stretched by ``factor``."""
    base = -(-8 * (size + FLOW_OVERHEAD_BYTES) // (LINK_GBPS * 1000))
    if factor == 1.0:
        return max(1, base)
    return max(1, int(math.ceil(base * factor)))


def group_label(job: int, t: int, p: int) -> str:
    return f"job{job}/tp{t}/pp{p}"


@dataclass
class GroundTruth:
    jobs: List[dict] = field(default_factory=list)
    pair_types: Dict[CommPair, CommType] = field(default_factory=dict)
    step_boundaries: Dict[GpuAddr, List[Tuple[int, int]]] = field(default_factory=dict)
    faults: List[dict] = field(default_factory=list)
    dp_groups: List[dict] = field(default_factory=list)
    lossy_links: List[Tuple[str, str]] = field(default_factory=list)
    dropped: int = 0
    duplicated: int = 0

    def job_of(self) -> Dict[GpuAddr, int]:
        return {g: j["job"] for j in self.jobs for g in j["gpus"]}

    def to_json(self) -> dict:
        return {
            "jobs": self.jobs,
            "pair_types": [
                {"u": p.u, "v": p.v, "type": t.value} for p, t in sorted(self.pair_types.items())
            ],
            "step_boundaries": {r: [list(b) for b in bs] for r, bs in sorted(self.step_boundaries.items())},
            "faults": self.faults,
            "dp_groups": self.dp_groups,
            "lossy_links": [list(l) for l in self.lossy_links],
            "noise_counts": {"dropped": self.dropped, "duplicated": self.duplicated},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "GroundTruth":
        counts = obj.get("noise_counts", {})
        return cls(
            jobs=list(obj["jobs"]),
            pair_types={CommPair(d["u"], d["v"]): CommType(d["type"]) for d in obj["pair_types"]},
            step_boundaries={r: [tuple(b) for b in bs] for r, bs in obj["step_boundaries"].items()},
            faults=list(obj["faults"]),
            dp_groups=list(obj.get("dp_groups", [])),
            lossy_links=[tuple(l) for l in obj.get("lossy_links", [])],
            dropped=int(counts.get("dropped", 0)),
            duplicated=int(counts.get("duplicated", 0)),
        )


@dataclass
class _Job:
    index: int
    spec: JobSpec
    first_machine: int
    step_windows: List[Tuple[int, int]] = field(default_factory=list)

    def locate(self, rank: int) -> Tuple[int, int]:
        gpm = self.spec.gpus_per_machine
        return self.first_machine + rank // gpm, rank % gpm

    def addr(self, rank: int) -> str:
        return gpu_address(*self.locate(rank))


def _place(specs: Sequence[JobSpec]) -> List[_Job]:
    jobs, nxt = [], 0
    for i, s in enumerate(specs):
        jobs.append(_Job(i, s, nxt))
        nxt += s.machines
    return jobs


def inject_fault(
    kind,
    subject: str,
    steps: Iterable[int],
    magnitude: float,
    specs: Sequence[JobSpec],
    job: Optional[int] = None,
    fabric: Fabric = Fabric(),
) -> FaultSpec:
    """Validate a fault against ``specs`` and return its description."""
    kind = FaultKind(kind)
    steps = tuple(sorted({int(s) for s in steps}))
    if not steps:
        raise SpecError("a fault needs at least one step")
    if magnitude <= 0:
        raise SpecError("fault magnitude must be positive")
    jobs = _place(specs)
    if kind in (FaultKind.SLOW_STEP, FaultKind.SLOW_DP_GROUP):
        head, _, rest = subject.partition("/")
        if not head.startswith("job") or not head[3:].isdigit() or int(head[3:]) >= len(specs):
            raise SpecError(f"unknown job subject {subject!r}")
        job = int(head[3:])
        spec = specs[job]
        if kind is FaultKind.SLOW_DP_GROUP:
            try:
                t_part, p_part = rest.split("/")
                t, p = int(t_part[2:]), int(p_part[2:])
            except ValueError:
                raise SpecError(f"DP group subject must look like job<j>/tp<t>/pp<p>, got {subject!r}") from None
            if not (t_part.startswith("tp") and p_part.startswith("pp") and 0 <= t < spec.tp and 0 <= p < spec.pp):
                raise SpecError(f"unknown DP group {subject!r}")
            if spec.dp < 2:
                raise SpecError(f"job {job} has no DP groups")
        elif rest:
            raise SpecError(f"SLOW_STEP subject must be job<j>, got {subject!r}")
    else:
        total = sum(s.machines for s in specs)
        gpm = max(s.gpus_per_machine for s in specs)
        if subject not in fabric.switches(total, gpm):
            raise SpecError(f"unknown switch {subject!r}")
        if kind is FaultKind.CONGESTED_SWITCH_COUNT:
            if job is None or not 0 <= job < len(specs):
                raise SpecError("CONGESTED_SWITCH_COUNT needs the index of the job to reroute")
            if int(magnitude) != magnitude or magnitude < 1:
                raise SpecError("CONGESTED_SWITCH_COUNT magnitude is a group count >= 1")
    if job is not None:
        bad = [s for s in steps if not 0 <= s < specs[job].steps]
        if bad:
            raise SpecError(f"steps {bad} outside job {job}'s {specs[job].steps} steps")
    return FaultSpec(kind, subject, steps, float(magnitude), job)


class _Emitter:
    """Collects flows and per-rank DP ends for one generation run."""

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.flows: List[FlowRecord] = []
        self.paths: Dict[Tuple[int, int, int, int], Tuple[str, ...]] = {}
        self.pair_types: Dict[CommPair, CommType] = {}

    def path(self, src: Tuple[int, int], dst: Tuple[int, int]) -> Tuple[str, ...]:
        key = (*src, *dst)
        p = self.paths.get(key)
        if p is None:
            p = self.paths[key] = self.fabric.path(src, dst)
        return p


def _jitter(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    z = rng.standard_normal(n)
    return 1.0 + sigma * np.clip(z, -3.0, 3.0)


def _gap(nominal: int, factor: float) -> int:
    return max(1, int(round(nominal * factor)))


def generate(
    specs: Sequence[JobSpec],
    noise: NoiseSpec = NoiseSpec(),
    faults: Sequence[FaultSpec] = (),
    seed: int = 0,
    fabric: Fabric = Fabric(),
    extra_machines: int = 0,
) -> Tuple[FlowDataset, Topology, GroundTruth]:
    """Simulate ``specs`` on consecutive machines and return flows, topology, truth."""
    if not specs:
        raise SpecError("at least one job spec is required")
    rng = np.random.Generator(np.random.PCG64(seed))
    jobs = _place(specs)
    total_machines = sum(s.machines for s in specs) + extra_machines
    gpm = max(s.gpus_per_machine for s in specs)
    for f in faults:
        inject_fault(f.kind, f.subject, f.steps, f.magnitude, specs, f.job, fabric)

    topo = Topology(
        {gpu_address(m, l): machine_name(m) for m in range(total_machines) for l in range(gpm)}
    )
    truth = GroundTruth()
    em = _Emitter(fabric)

    for job in jobs:
        _simulate_job(job, noise, [f for f in faults if _fault_job(f) == job.index or f.job is None], rng, em, truth)

    for f in faults:
        truth.faults.append(_fault_truth(f, jobs, truth))

    flows = em.flows
    kept: List[FlowRecord] = []
    if noise.drop_prob > 0 or noise.duplicate_prob > 0:
        drop = rng.random(len(flows)) < noise.drop_prob
        dup = rng.random(len(flows)) < noise.duplicate_prob
        for f, d, c in zip(flows, drop, dup):
            if d:
                truth.dropped += 1
                continue
            kept.append(f)
            if c:
                truth.duplicated += 1
                kept.append(f)
    else:
        kept = flows
    truth.pair_types = dict(sorted(em.pair_types.items()))
    return make_dataset(kept, "<simulated>"), topo, truth


def _fault_job(f: FaultSpec) -> Optional[int]:
    if f.kind in (FaultKind.SLOW_STEP, FaultKind.SLOW_DP_GROUP):
        return int(f.subject.partition("/")[0][3:])
    return f.job


def _fault_truth(f: FaultSpec, jobs: List[_Job], truth: GroundTruth) -> dict:
    out = f.to_json()
    job = _fault_job(f)
    out["job"] = job
    if f.kind is FaultKind.SLOW_DP_GROUP:
        grp = next(g for g in truth.dp_groups if g["label"] == f.subject)
        out["members"] = grp["members"]
    if job is not None:
        out["step_windows"] = [list(jobs[job].step_windows[s]) for s in f.steps]
    else:
        out["step_windows_by_job"] = {
            str(j.index): [list(j.step_windows[s]) for s in f.steps if s < len(j.step_windows)] for j in jobs
        }
    return out


def _simulate_job(job: _Job, noise: NoiseSpec, faults: List[FaultSpec], rng, em: _Emitter, truth: GroundTruth):
    spec = job.spec
    tp, pp, d, mb = spec.tp, spec.pp, spec.dp, spec.micro_batches
    addr = [job.addr(r) for r in range(spec.world)]
    loc = [job.locate(r) for r in range(spec.world)]
    machines = sorted({machine_name(m) for m, _ in loc})
    truth.jobs.append(
        {"job": job.index, "gpus": sorted(addr), "machines": machines, "spec": _spec_json(spec)}
    )

    slots = mb + pp - 1
    t_f = max(1, spec.step_compute_time // (3 * slots))
    t_b = 2 * t_f
    t_opt = max(1000, spec.step_compute_time // 100)

    # DP groups are indexed by (t, p); ring order follows k
    groups = [(t, p) for p in range(pp) for t in range(tp)] if d >= 2 else []
    for t, p in groups:
        members = sorted(addr[spec.rank(t, p, k)] for k in range(d))
        truth.dp_groups.append({"job": job.index, "label": group_label(job.index, t, p), "members": members})

    def visible(a: int, b: int) -> bool:
        return loc[a][0] != loc[b][0]

    # one lossy mirror link per chosen ring, only where the rest of the ring can vouch for it
    lossy: Dict[Tuple[int, int], Tuple[int, int]] = {}
    if noise.lossy_ring_fraction > 0 and d >= 3:
        for t, p in groups:
            ring = [spec.rank(t, p, k) for k in range(d)]
            if not all(visible(ring[k], ring[(k + 1) % d]) for k in range(d)):
                continue
            pick = rng.random()
            link = int(rng.integers(d))
            if pick < noise.lossy_ring_fraction:
                a, b = ring[link], ring[(link + 1) % d]
                lossy[(t, p)] = (a, b)
                truth.lossy_links.append((addr[a], addr[b]))

    for t, p in groups:
        for k in range(d):
            a, b = spec.rank(t, p, k), spec.rank(t, p, (k + 1) % d)
            if visible(a, b):
                em.pair_types[canonical_pair(addr[a], addr[b])] = CommType.DP
    for t in range(tp):
        for k in range(d):
            for p in range(pp - 1):
                a, b = spec.rank(t, p, k), spec.rank(t, p + 1, k)
                if visible(a, b):
                    em.pair_types[canonical_pair(addr[a], addr[b])] = CommType.PP

    fault_by_kind: Dict[FaultKind, List[FaultSpec]] = {}
    for f in faults:
        fault_by_kind.setdefault(f.kind, []).append(f)

    def step_factor(kind: FaultKind, step: int, subject: Optional[str] = None) -> float:
        factor = 1.0
        for f in fault_by_kind.get(kind, ()):
            if step in f.steps and (subject is None or f.subject == subject):
                factor *= f.magnitude
        return factor

    sizes = [spec.chunk_size(fr) for fr in spec.dp_chunking]
    ends: Dict[int, List[Tuple[int, int]]] = {r: [] for r in range(spec.world)}
    job.step_windows = []
    flows = em.flows

    def emit(start, a, b, size, dur_factor, step, reroute, recorded_size=None):
        """Append one flow; ``recorded_size`` is what the collector reports when it differs."""
        path = em.path(loc[a], loc[b])
        if reroute is not None and reroute not in path:
            path = (path[0], reroute, path[-1]) if len(path) > 1 else (path[0], reroute)
        f = 1.0
        for sw_fault in fault_by_kind.get(FaultKind.THROTTLED_SWITCH, ()):
            if step in sw_fault.steps and sw_fault.subject in path:
                f *= sw_fault.magnitude
        dur = flow_duration(size, dur_factor * f)
        flows.append(FlowRecord(start, addr[a], addr[b], path, recorded_size or size, dur))
        return dur

    congest = [
        f for f in fault_by_kind.get(FaultKind.CONGESTED_SWITCH_COUNT, ()) if f.job == job.index
    ]

    now = SIM_EPOCH_US + spec.start_offset
    for step in range(spec.steps):
        step_start = now
        slow = step_factor(FaultKind.SLOW_STEP, step)
        sigma = noise.jitter_sigma
        jf = _jitter(rng, slots, sigma)
        jb = _jitter(rng, slots, sigma)
        jo = _jitter(rng, 1, sigma)[0]
        fwd = np.concatenate(([0], np.cumsum([_gap(t_f, x * slow) for x in jf])))
        bwd = np.concatenate(([0], np.cumsum([_gap(t_b, x * slow) for x in jb])))
        fwd_end = step_start + int(fwd[-1])

        # pipeline transfers: activation p -> p+1 after forward (m, p); gradient p -> p-1 after backward (m, p)
        if pp > 1:
            for m in range(mb):
                for p in range(pp - 1):
                    ts = step_start + int(fwd[m + p + 1])
                    for k in range(d):
                        for t in range(tp):
                            a, b = spec.rank(t, p, k), spec.rank(t, p + 1, k)
                            if visible(a, b):
                                emit(ts, a, b, spec.pp_flow_size, 1.0, step, None)
            for m in range(mb):
                for p in range(pp - 1, 0, -1):
                    ts = fwd_end + int(bwd[m + (pp - 1 - p) + 1])
                    for k in range(d):
                        for t in range(tp):
                            a, b = spec.rank(t, p, k), spec.rank(t, p - 1, k)
                            if visible(a, b):
                                emit(ts, a, b, spec.pp_flow_size, 1.0, step, None)
        dp_start = fwd_end + int(bwd[-1])

        collapse_draw = rng.random(len(groups)) if lossy else None
        reroute_switch = {g: f.subject for f in congest if step in f.steps for g in groups[: int(f.magnitude)]}

        job_end = dp_start
        phases = 2 * (d - 1)
        for gi, (t, p) in enumerate(groups):
            label = group_label(job.index, t, p)
            gslow = step_factor(FaultKind.SLOW_DP_GROUP, step, label)
            ring = [spec.rank(t, p, k) for k in range(d)]
            links = [(ring[k], ring[(k + 1) % d]) for k in range(d)]
            if d == 2:
                links = [(ring[0], ring[1]), (ring[1], ring[0])]
            jp = _jitter(rng, len(sizes) * phases, sigma)
            lossy_link = lossy.get((t, p))
            collapsed = lossy_link is not None and collapse_draw[gi] < noise.size_collapse_prob
            reroute = reroute_switch.get((t, p))
            ts = dp_start
            idx = 0
            for size in sizes:
                for _ in range(phases):
                    phase_end = ts
                    for a, b in links:
                        shown = sizes[0] if collapsed and (a, b) == lossy_link else None
                        if visible(a, b):
                            dur = emit(ts, a, b, size, gslow, step, reroute, shown)
                        else:
                            dur = flow_duration(size, gslow)
                        end = ts + dur
                        ends[a].append((step, end))
                        ends[b].append((step, end))
                        if end > phase_end:
                            phase_end = end
                    ts = phase_end + _gap(PHASE_GAP_US, jp[idx] * gslow * slow)
                    idx += 1
            job_end = max(job_end, ts)
        job.step_windows.append((step_start, job_end))
        now = job_end + _gap(t_opt, jo * slow)

    # per-rank truth: step start is the job step start, step end the rank's last DP transfer end
    last_end: Dict[int, Dict[int, int]] = {r: {} for r in range(spec.world)}
    for r, items in ends.items():
        for step, end in items:
            if end > last_end[r].get(step, -1):
                last_end[r][step] = end
    for r in range(spec.world):
        bounds = []
        for step, (s0, s1) in enumerate(job.step_windows):
            bounds.append((s0, last_end[r].get(step, s1)))
        truth.step_boundaries[addr[r]] = bounds


def _spec_json(spec: JobSpec) -> dict:
    out = asdict(spec)
    out["dp_chunking"] = list(spec.dp_chunking)
    return out


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce a generated dataset."""

    jobs: Tuple[JobSpec, ...]
    noise: NoiseSpec = NoiseSpec()
    faults: Tuple[FaultSpec, ...] = ()
    seed: int = 0
    fabric: Fabric = Fabric()
    extra_machines: int = 0

    def run(self):
        return generate(self.jobs, self.noise, self.faults, self.seed, self.fabric, self.extra_machines)

    @classmethod
    def from_json(cls, obj: Mapping, seed: Optional[int] = None) -> "Scenario":
        known = {"jobs", "noise", "faults", "seed", "fabric", "extra_machines"}
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown scenario keys: {sorted(unknown)}")
        if "jobs" not in obj or not obj["jobs"]:
            raise SpecError("scenario needs a non-empty 'jobs' list")
        jobs = tuple(JobSpec.from_json(j) for j in obj["jobs"])
        noise = NoiseSpec.from_json(obj.get("noise", "zero"))
        fabric_obj = obj.get("fabric", {})
        try:
            fabric = Fabric(**{k: int(v) for k, v in fabric_obj.items()})
        except TypeError as exc:
            raise SpecError(f"bad fabric: {exc}") from exc
        faults = []
        for fo in obj.get("faults", []):
            f = FaultSpec.from_json(fo)
            faults.append(inject_fault(f.kind, f.subject, f.steps, f.magnitude, jobs, f.job, fabric))
        return cls(
            jobs,
            noise,
            tuple(faults),
            int(seed if seed is not None else obj.get("seed", 0)),
            fabric,
            int(obj.get("extra_machines", 0)),
        )
