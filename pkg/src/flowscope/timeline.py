"""Per-GPU training timelines rebuilt from observed flows.

A step ends when a rank's gradient synchronisation ends, so each rank's DP
flows are pooled and split into steps with the same gap-based change-point
segmentation used for classification. Each step ends at the latest DP flow
end of its segment. PP transfers become send/receive events, and silences
between communication events longer than ``gap_min`` become compute gaps.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import changepoint
from .core import CommType, FlowRecord, FlowscopeError, GpuAddr, JobCluster
from .parallelism import ConsistencyError, PairEvidence, StepParams, dp_components, split_by_gaps

log = logging.getLogger(__name__)

DEFAULT_GAP_MIN_US = 100
ALIGN_TOLERANCE = 0.10


class EventKind(str, enum.Enum):
    PP_SEND = "PP_SEND"
    PP_RECV = "PP_RECV"
    DP_COMM = "DP_COMM"
    COMPUTE_GAP = "COMPUTE_GAP"


@dataclass(frozen=True)
class TimelineEvent:
    rank: GpuAddr
    kind: EventKind
    start: int
    end: int
    peer_or_group: str
    step_index: int
    size: int = 0

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"event must have start < end, got [{self.start}, {self.end})")


@dataclass(frozen=True)
class StepRecord:
    rank: GpuAddr
    step_index: int
    step_start: int
    step_end: int
    dp_span: Tuple[int, int]
    pp_event_count: int
    dp_event_count: int
    aligned_index: Optional[int] = None
    # the first step starts at the first observed event, so its duration is truncated
    partial: bool = False

    @property
    def duration(self) -> int:
        return self.step_end - self.step_start

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "step_index": self.step_index,
            "aligned_index": self.aligned_index,
            "step_start": self.step_start,
            "step_end": self.step_end,
            "dp_span": list(self.dp_span),
            "pp_event_count": self.pp_event_count,
            "dp_event_count": self.dp_event_count,
            "partial": self.partial,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "StepRecord":
        return cls(
            rank=obj["rank"],
            step_index=int(obj["step_index"]),
            step_start=int(obj["step_start"]),
            step_end=int(obj["step_end"]),
            dp_span=(int(obj["dp_span"][0]), int(obj["dp_span"][1])),
            pp_event_count=int(obj["pp_event_count"]),
            dp_event_count=int(obj["dp_event_count"]),
            aligned_index=obj.get("aligned_index"),
            partial=bool(obj.get("partial", False)),
        )


@dataclass
class RankTimeline:
    rank: GpuAddr
    events: List[TimelineEvent]
    steps: List[StepRecord]
    job_id: Optional[int] = None
    warnings: List[str] = field(default_factory=list)


def _dp_group_names(evidence: Sequence[PairEvidence]) -> Dict[GpuAddr, str]:
    names = {}
    for i, comp in enumerate(dp_components(evidence, use_refined=True)):
        for g in comp:
            names[g] = f"dp{i}"
    return names


def _step_of(boundaries: Sequence[int], t: int) -> int:
    """Index of the step whose span ``(end[k-1], end[k]]`` contains ``t``."""
    lo, hi = 0, len(boundaries)
    while lo < hi:
        mid = (lo + hi) // 2
        if boundaries[mid] < t:
            lo = mid + 1
        else:
            hi = mid
    return lo


def reconstruct_rank(
    rank: GpuAddr,
    evidence: Sequence[PairEvidence],
    flows: Iterable[FlowRecord],
    params: StepParams = StepParams(),
    gap_min: int = DEFAULT_GAP_MIN_US,
    group_names: Optional[Mapping[GpuAddr, str]] = None,
) -> RankTimeline:
    """Events and steps of one rank. ``flows`` may contain other ranks' flows."""
    types = {ev.pair: ev.refined_type for ev in evidence}
    if group_names is None:
        group_names = _dp_group_names(evidence)
    group = group_names.get(rank, f"dp:{rank}")
    dp, pp = [], []
    for f in flows:
        if f.src != rank and f.dst != rank:
            continue
        t = types.get(f.pair)
        if t is CommType.DP:
            dp.append(f)
        elif t is CommType.PP:
            pp.append(f)
    dp.sort(key=FlowRecord.sort_key)
    pp.sort(key=FlowRecord.sort_key)
    warnings = []

    if not dp:
        msg = f"rank {rank} has no DP flows; step structure unavailable"
        log.warning(msg)
        warnings.append(msg)
        events = [_pp_event(rank, f, -1) for f in pp]
        events += _compute_gaps(rank, events, gap_min)
        events.sort(key=_event_key)
        return RankTimeline(rank, events, [], warnings=warnings)

    starts = sorted({f.start for f in dp})
    new_steps = [starts[i] for i in split_by_gaps(starts, params)]
    # DP flows per segment, cut where a new step's first start appears
    segments: List[List[FlowRecord]] = [[]]
    cut_iter = iter(new_steps)
    nxt = next(cut_iter, None)
    for f in dp:
        while nxt is not None and f.start >= nxt:
            segments.append([])
            nxt = next(cut_iter, None)
        segments[-1].append(f)
    segments = [s for s in segments if s]
    ends = []
    for seg in segments:
        end = max(f.end for f in seg)
        # segment ends must increase; a long flow straddling a cut keeps the later segment's end
        ends.append(max(end, ends[-1] + 1) if ends else end)

    first_event = min(dp[0].start, pp[0].start if pp else dp[0].start)
    events: List[TimelineEvent] = []
    steps: List[StepRecord] = []
    for k, seg in enumerate(segments):
        for f in seg:
            events.append(
                TimelineEvent(rank, EventKind.DP_COMM, f.start, f.end, group, k, f.size)
            )
    for f in pp:
        events.append(_pp_event(rank, f, _step_of(ends, f.start)))

    events += _compute_gaps(rank, events, gap_min)
    events.sort(key=_event_key)

    pp_counts = [0] * (len(segments) + 1)
    for e in events:
        if e.kind in (EventKind.PP_SEND, EventKind.PP_RECV):
            pp_counts[e.step_index] += 1
    prev_end = first_event
    for k, seg in enumerate(segments):
        steps.append(
            StepRecord(
                rank=rank,
                step_index=k,
                step_start=prev_end,
                step_end=ends[k],
                dp_span=(seg[0].start, ends[k]),
                pp_event_count=pp_counts[k],
                dp_event_count=len(seg),
                partial=(k == 0),
            )
        )
        prev_end = ends[k]
    return RankTimeline(rank, events, steps, warnings=warnings)


def _event_key(e: TimelineEvent):
    return (e.start, e.end, e.kind.value, e.peer_or_group)


def _pp_event(rank: GpuAddr, f: FlowRecord, step: int) -> TimelineEvent:
    if f.src == rank:
        return TimelineEvent(rank, EventKind.PP_SEND, f.start, f.end, f.dst, step, f.size)
    return TimelineEvent(rank, EventKind.PP_RECV, f.start, f.end, f.src, step, f.size)


def _compute_gaps(rank, events: Sequence[TimelineEvent], gap_min: int) -> List[TimelineEvent]:
    """Silences longer than ``gap_min`` between communication events of the same step."""
    gaps = []
    ordered = sorted(events, key=_event_key)
    busy_until = None
    prev_step = None
    for e in ordered:
        if busy_until is not None and e.step_index == prev_step and e.start - busy_until > gap_min:
            gaps.append(
                TimelineEvent(rank, EventKind.COMPUTE_GAP, busy_until, e.start, "", e.step_index)
            )
        if busy_until is None or e.step_index != prev_step:
            busy_until = e.end
        else:
            busy_until = max(busy_until, e.end)
        prev_step = e.step_index
    return gaps


def align_steps(timelines: Mapping[GpuAddr, RankTimeline], tolerance: float = ALIGN_TOLERANCE) -> Dict[GpuAddr, RankTimeline]:
    """Give steps of different ranks a shared index when their ends lie close together.

    Step ends are swept in time order; a new aligned index opens whenever an
    end lies ``tolerance`` x (median step duration) or more past the first end
    of the current index.
    """
    full = [s.duration for tl in timelines.values() for s in tl.steps if not s.partial]
    if not full:
        full = [s.duration for tl in timelines.values() for s in tl.steps]
    if not full:
        return dict(timelines)
    tol = tolerance * statistics.median(full)
    ends = sorted((s.step_end, r, s.step_index) for r, tl in timelines.items() for s in tl.steps)
    aligned: Dict[Tuple[GpuAddr, int], int] = {}
    idx, anchor = -1, None
    for end, r, k in ends:
        if anchor is None or end - anchor >= tol:
            idx += 1
            anchor = end
        aligned[(r, k)] = idx
    out = {}
    for r, tl in timelines.items():
        steps = [replace(s, aligned_index=aligned[(r, s.step_index)]) for s in tl.steps]
        out[r] = RankTimeline(r, tl.events, steps, tl.job_id, tl.warnings)
    return out


def reconstruct_job(
    job: JobCluster,
    evidence: Sequence[PairEvidence],
    flows: Sequence[FlowRecord],
    params: StepParams = StepParams(),
    gap_min: int = DEFAULT_GAP_MIN_US,
    tolerance: float = ALIGN_TOLERANCE,
) -> Dict[GpuAddr, RankTimeline]:
    """Timelines of every rank of ``job`` that appears in ``evidence``, with aligned step indices."""
    mine = [ev for ev in evidence if ev.pair.u in job.gpus and ev.pair.v in job.gpus]
    ranks = sorted({g for ev in mine for g in ev.pair})
    if len(ranks) < 2:
        raise ConsistencyError(f"job {job.job_id} has {len(ranks)} communicating rank(s); a job needs at least two")
    by_rank: Dict[GpuAddr, List[FlowRecord]] = {r: [] for r in ranks}
    for f in flows:
        if f.src in by_rank and f.dst in job.gpus:
            by_rank[f.src].append(f)
        if f.dst in by_rank and f.src in job.gpus:
            by_rank[f.dst].append(f)
    names = _dp_group_names(mine)
    timelines = {}
    for r in ranks:
        tl = reconstruct_rank(r, mine, by_rank[r], params, gap_min, names)
        tl.job_id = job.job_id
        timelines[r] = tl
    return align_steps(timelines, tolerance)


def trace_events(timelines: Mapping[GpuAddr, RankTimeline]) -> List[dict]:
    """Trace Event Format duration events, one process per rank."""
    if not timelines or not any(tl.events for tl in timelines.values()):
        raise FlowscopeError("nothing to export")
    out = []
    for pid, rank in enumerate(sorted(timelines), start=1):
        tl = timelines[rank]
        out.append({"name": "process_name", "ph": "M", "pid": pid, "tid": 0, "args": {"name": rank}})
        for e in tl.events:
            tid = {"DP_COMM": 1, "PP_SEND": 2, "PP_RECV": 2, "COMPUTE_GAP": 3}[e.kind.value]
            out.append(
                {
                    "name": e.kind.value,
                    "ph": "X",
                    "ts": e.start,
                    "dur": e.end - e.start,
                    "pid": pid,
                    "tid": tid,
                    "args": {"peer_or_group": e.peer_or_group, "step": e.step_index, "size": e.size},
                }
            )
    return out


def export_trace(timelines: Mapping[GpuAddr, RankTimeline], path: str) -> int:
    """Write a trace file; returns the number of duration events written."""
    events = trace_events(timelines)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(events, handle, separators=(",", ":"))
        handle.write("\n")
    return sum(1 for e in events if e["ph"] == "X")


def steps_to_json(timelines: Mapping[GpuAddr, RankTimeline]) -> List[dict]:
    out = []
    for r in sorted(timelines):
        tl = timelines[r]
        out.extend(dict(s.to_json(), job_id=tl.job_id) for s in tl.steps)
    return out


class StreamingStepTracker:
    """Online step-boundary detection over one rank's DP flow start times.

    Feed DP start times in non-decreasing order; ``push`` returns True when
    the pushed start opens a new step. Flags agree with the batch
    segmentation of the same starts.
    """

    def __init__(self, params: StepParams = StepParams()):
        self._state = changepoint.new_state(params.threshold, params.hazard, noise_scale=params.noise_scale)
        self._last: Optional[int] = None
        self._segment_logs: List[float] = []
        self.count = 0

    def push(self, start: int) -> bool:
        if self._last is not None and start <= self._last:
            if start == self._last:
                return False
            raise ValueError("start times must be pushed in increasing order")
        prev, self._last = self._last, start
        self.count += 1
        if prev is None:
            return False
        log_gap = math.log(start - prev)
        _, flagged = changepoint.detect_streaming(self._state, start - prev)
        rise = False
        if flagged:
            rise = log_gap > math.fsum(self._segment_logs) / len(self._segment_logs)
            self._segment_logs = []
        self._segment_logs.append(log_gap)
        return rise
