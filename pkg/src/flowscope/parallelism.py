"""DP vs PP classification of communication pairs inside one job.

Per pair, flows are split into training steps by change-point detection on
inter-flow gaps, then each step's number of distinct flow sizes N_k is
counted. Pipeline transfers repeat one activation shape, so the most common
N_k is 1 for PP pairs; gradient synchronisation moves buckets of varying
size, so DP pairs see several. A transitive pass then fixes DP pairs whose
size signature was corrupted: if u~v and v~w are DP, any observed u~w is DP.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import changepoint
from .changepoint import Segmentation
from .core import CommPair, CommType, FlowRecord, FlowscopeError, GpuAddr, JobCluster, group_by_pair

log = logging.getLogger(__name__)

MIN_FLOWS_FOR_DIVISION = 3
MIN_CONFIDENT_STEPS = 3


class ConsistencyError(FlowscopeError):
    """Inputs contradict each other (e.g. a pair spanning two recognized jobs)."""


class Confidence(str, enum.Enum):
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class StepParams:
    """Knobs for step division, shared by classification and timeline reconstruction."""

    threshold: float = changepoint.DEFAULT_THRESHOLD
    hazard: float = changepoint.DEFAULT_HAZARD
    noise_scale: float = changepoint.DEFAULT_NOISE_SCALE


@dataclass(frozen=True)
class PairEvidence:
    pair: CommPair
    steps: Segmentation
    distinct_size_counts: Tuple[int, ...]
    mode_of_counts: int
    raw_type: CommType
    refined_type: CommType
    confidence: Confidence
    flow_count: int = 0
    job_id: Optional[int] = None

    def __post_init__(self):
        if len(self.distinct_size_counts) != len(self.steps):
            raise ValueError("one distinct-size count per segment is required")
        if self.raw_type is CommType.DP and self.refined_type is not CommType.DP:
            raise ValueError("refinement never demotes DP to PP")

    @property
    def type(self) -> CommType:
        return self.refined_type

    def to_json(self) -> dict:
        return {
            "u": self.pair.u,
            "v": self.pair.v,
            "job_id": self.job_id,
            "type": self.refined_type.value,
            "raw_type": self.raw_type.value,
            "steps": len(self.steps),
            "change_points": list(self.steps.change_points),
            "flow_count": self.flow_count,
            "N_k": list(self.distinct_size_counts),
            "confidence": self.confidence.value,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "PairEvidence":
        counts = tuple(int(c) for c in obj["N_k"])
        return cls(
            pair=CommPair(obj["u"], obj["v"]),
            steps=Segmentation(int(obj["flow_count"]), tuple(obj["change_points"])),
            distinct_size_counts=counts,
            mode_of_counts=mode_of_counts(counts),
            raw_type=CommType(obj["raw_type"]),
            refined_type=CommType(obj["type"]),
            confidence=Confidence(obj["confidence"]),
            flow_count=int(obj["flow_count"]),
            job_id=obj.get("job_id"),
        )


def rising_boundaries(intervals: Sequence[float], seg: Segmentation) -> List[int]:
    """Interval indices whose change point opens a slower regime.

    A step gap shows up as two change points in the gap sequence: the jump to
    a long gap and the drop back to short ones. Only the jump marks a step
    boundary. A change point counts as rising when its interval exceeds the
    geometric mean of the segment before it.
    """
    logs = [math.log(x) for x in intervals]
    rises = []
    prev_start = 0
    for cp in seg.change_points:
        seg_logs = logs[prev_start:cp]
        if logs[cp] > math.fsum(seg_logs) / len(seg_logs):
            rises.append(cp)
        prev_start = cp
    return rises


def split_by_gaps(
    starts: Sequence[int], params: StepParams = StepParams()
) -> List[int]:
    """Indices into ``starts`` (sorted, distinct) where a new step begins."""
    if len(starts) < MIN_FLOWS_FOR_DIVISION:
        return []
    intervals = [b - a for a, b in zip(starts, starts[1:])]
    seg = changepoint.detect(
        intervals, threshold=params.threshold, hazard=params.hazard, noise_scale=params.noise_scale
    )
    # interval i separates starts[i] and starts[i + 1]
    return [i + 1 for i in rising_boundaries(intervals, seg)]


def divide_steps(pair_flows: Sequence[FlowRecord], params: StepParams = StepParams()) -> Segmentation:
    """Segment time-sorted flows into steps.

    Flows sharing a start time (both directions of one exchange, duplicates)
    form one observation so that gaps are strictly positive. Fewer than three
    flows give a single segment.
    """
    flows = sorted(pair_flows, key=FlowRecord.sort_key)
    n = len(flows)
    if n < MIN_FLOWS_FOR_DIVISION:
        return Segmentation(n, ())
    starts = sorted({f.start for f in flows})
    new_step_starts = {starts[i] for i in split_by_gaps(starts, params)}
    cps = tuple(i for i in range(1, n) if flows[i].start in new_step_starts and flows[i - 1].start != flows[i].start)
    return Segmentation(n, cps)


def mode_of_counts(counts: Sequence[int]) -> int:
    """Most frequent value; ties go to the largest value."""
    if not counts:
        raise ValueError("mode of an empty sequence")
    freq = Counter(counts)
    best = max(freq.values())
    return max(c for c, k in freq.items() if k == best)


def _bucket(size: int, bucket_bytes: int) -> int:
    return size if bucket_bytes <= 1 else size // bucket_bytes


def classify_pair(
    pair_flows: Sequence[FlowRecord],
    params: StepParams = StepParams(),
    size_bucket_bytes: int = 1,
    job_id: Optional[int] = None,
) -> PairEvidence:
    """Raw DP/PP type of one pair from its per-step distinct-size counts."""
    if not pair_flows:
        raise ValueError("classify_pair needs at least one flow")
    flows = sorted(pair_flows, key=FlowRecord.sort_key)
    pairs = {f.pair for f in flows}
    if len(pairs) != 1:
        raise ValueError(f"flows belong to {len(pairs)} different pairs")
    seg = divide_steps(flows, params)
    counts = tuple(
        len({_bucket(f.size, size_bucket_bytes) for f in flows[a:b]}) for a, b in seg.segments
    )
    mode = mode_of_counts(counts)
    raw = CommType.PP if mode == 1 else CommType.DP
    conf = Confidence.HIGH if len(counts) >= MIN_CONFIDENT_STEPS else Confidence.LOW
    return PairEvidence(
        pair=pairs.pop(),
        steps=seg,
        distinct_size_counts=counts,
        mode_of_counts=mode,
        raw_type=raw,
        refined_type=raw,
        confidence=conf,
        flow_count=len(flows),
        job_id=job_id,
    )


def dp_components(evidence: Iterable[PairEvidence], use_refined: bool = False) -> List[List[GpuAddr]]:
    """Connected components (iterative DFS) of the graph of DP-typed pairs.

    Each component is sorted; components are ordered by smallest member.
    """
    adj: Dict[GpuAddr, set] = {}
    for ev in evidence:
        t = ev.refined_type if use_refined else ev.raw_type
        if t is CommType.DP:
            adj.setdefault(ev.pair.u, set()).add(ev.pair.v)
            adj.setdefault(ev.pair.v, set()).add(ev.pair.u)
    seen = set()
    comps = []
    for root in sorted(adj):
        if root in seen:
            continue
        seen.add(root)
        stack, comp = [root], []
        while stack:
            node = stack.pop()
            comp.append(node)
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        comps.append(sorted(comp))
    return comps


def refine_transitive(evidence: Sequence[PairEvidence]) -> List[PairEvidence]:
    """Promote observed pairs whose endpoints share a raw-DP component to DP."""
    comp_of: Dict[GpuAddr, int] = {}
    for i, comp in enumerate(dp_components(evidence)):
        for g in comp:
            comp_of[g] = i
    out = []
    for ev in evidence:
        cu, cv = comp_of.get(ev.pair.u), comp_of.get(ev.pair.v)
        if ev.refined_type is CommType.PP and cu is not None and cu == cv:
            ev = replace(ev, refined_type=CommType.DP)
        out.append(ev)
    return out


def identify_job(
    job: JobCluster,
    flows: Iterable[FlowRecord],
    params: StepParams = StepParams(),
    size_bucket_bytes: int = 1,
    refine: bool = True,
) -> List[PairEvidence]:
    """Evidence for every pair of ``job`` with at least one flow, sorted by pair.

    A flow with exactly one endpoint inside the job raises ConsistencyError.
    """
    members = job.gpus
    mine = []
    for f in flows:
        a, b = f.src in members, f.dst in members
        if a and b:
            mine.append(f)
        elif a or b:
            raise ConsistencyError(f"pair {f.src}<->{f.dst} spans job {job.job_id} and another job")
    groups = group_by_pair(mine)
    evidence = [
        classify_pair(groups[p], params, size_bucket_bytes, job.job_id) for p in sorted(groups)
    ]
    return refine_transitive(evidence) if refine else evidence


def identify_jobs(
    jobs: Sequence[JobCluster],
    flows: Sequence[FlowRecord],
    params: StepParams = StepParams(),
    size_bucket_bytes: int = 1,
    refine: bool = True,
) -> List[PairEvidence]:
    """:func:`identify_job` over many jobs with a single pass to split flows."""
    job_of = {g: j.job_id for j in jobs for g in j.gpus}
    per_job: Dict[int, List[FlowRecord]] = {j.job_id: [] for j in jobs}
    for f in flows:
        ju, jv = job_of.get(f.src), job_of.get(f.dst)
        if ju is None and jv is None:
            continue
        if ju != jv:
            raise ConsistencyError(f"pair {f.src}<->{f.dst} spans jobs {ju} and {jv}")
        per_job[ju].append(f)
    out = []
    for j in jobs:
        out.extend(identify_job(j, per_job[j.job_id], params, size_bucket_bytes, refine))
    return out


def accuracy(evidence: Sequence[PairEvidence], truth: Mapping[CommPair, CommType], refined: bool = True) -> float:
    """Fraction of evidence pairs whose type matches ``truth`` (pairs absent from truth count as wrong)."""
    if not evidence:
        return 1.0
    hits = sum(
        1 for ev in evidence if truth.get(ev.pair) is (ev.refined_type if refined else ev.raw_type)
    )
    return hits / len(evidence)
