import json

import numpy as np
import pytest

from flowscope.core import FlowscopeError, JobCluster
from flowscope.ingest import make_dataset
from flowscope.parallelism import ConsistencyError, classify_pair, identify_jobs, split_by_gaps
from flowscope.recognition import recognize_jobs
from flowscope.simulator import JobSpec, NoiseSpec, generate
from flowscope.timeline import (
    EventKind,
    StepRecord,
    StreamingStepTracker,
    TimelineEvent,
    export_trace,
    reconstruct_job,
    reconstruct_rank,
    steps_to_json,
    trace_events,
)

from conftest import flow
from oracles import boundary_match

MS = 1000


def _dp_bursts(n=3, per=6, gap=400 * MS):
    flows, t = [], 0
    for _ in range(n):
        for i in range(per):
            flows.append(flow(t, "a", "b", size=(3, 2, 1)[i % 3], dur=50))
            t += MS
        t += gap
    return flows


def _pp(start, size=7):
    return flow(start, "a", "c", size=size, dur=20)


def _evidence(dp, pp):
    return [classify_pair(dp), classify_pair(pp)]


def test_three_bursts_three_steps():
    dp = _dp_bursts()
    pp = [_pp(i * 100 * MS + 3 * MS) for i in range(12)]
    tl = reconstruct_rank("a", _evidence(dp, pp), dp + pp)
    assert len(tl.steps) == 3
    burst_ends = [max(f.end for f in dp[k * 6 : (k + 1) * 6]) for k in range(3)]
    assert [s.step_end for s in tl.steps] == burst_ends
    assert [s.dp_span[1] for s in tl.steps] == burst_ends
    assert tl.steps[0].partial and not tl.steps[1].partial


def test_uniform_dp_traffic_one_step():
    dp = [flow(i * MS, "a", "b", size=(3, 2, 1)[i % 3], dur=50) for i in range(30)]
    pp = [_pp(i * MS + 500) for i in range(4)]
    tl = reconstruct_rank("a", _evidence(dp, pp), dp + pp)
    assert len(tl.steps) == 1
    assert tl.steps[0].step_start == 0 and tl.steps[0].step_end == dp[-1].end


def test_pp_after_step_end_goes_to_next_step():
    dp = _dp_bursts()
    pp = [_pp(i * 100 * MS + 3 * MS) for i in range(12)]
    first = reconstruct_rank("a", _evidence(dp, pp), dp + pp)
    end0 = first.steps[0].step_end
    probe = _pp(end0 + 10)
    tl = reconstruct_rank("a", _evidence(dp, pp + [probe]), dp + pp + [probe])
    hits = [e for e in tl.events if e.kind is EventKind.PP_SEND and e.start == end0 + 10]
    assert [e.step_index for e in hits] == [1]


def test_invariants_on_hand_example():
    dp = _dp_bursts(n=5)
    pp = [_pp(i * 50 * MS + 7 * MS) for i in range(40)]
    tl = reconstruct_rank("a", _evidence(dp, pp), dp + pp)
    for s, nxt in zip(tl.steps, tl.steps[1:]):
        assert s.step_end == nxt.step_start
    assert sum(s.dp_event_count for s in tl.steps) == len(dp)
    starts = [e.start for e in tl.events]
    assert starts == sorted(starts)
    assert all(e.start < e.end for e in tl.events)
    gaps = [e for e in tl.events if e.kind is EventKind.COMPUTE_GAP]
    assert gaps and all(e.end - e.start > 100 for e in gaps)


def test_rank_without_dp_warns(caplog):
    pp = [_pp(i * MS) for i in range(5)]
    tl = reconstruct_rank("a", [classify_pair(pp)], pp)
    assert tl.steps == []
    assert tl.warnings and "no DP flows" in tl.warnings[0]
    assert all(e.step_index == -1 for e in tl.events)


def test_event_requires_positive_duration():
    with pytest.raises(ValueError):
        TimelineEvent("a", EventKind.DP_COMM, 5, 5, "dp0", 0)


def test_export_counts(tmp_path):
    dp = [flow(0, "a", "b", dur=5), flow(10, "a", "b", size=2, dur=5), flow(20, "a", "b", size=3, dur=5)]
    ev = [classify_pair(dp)]
    tls = {r: reconstruct_rank(r, ev, dp, gap_min=10**6) for r in ("a", "b")}
    path = tmp_path / "trace.json"
    assert export_trace(tls, str(path)) == 6
    loaded = json.loads(path.read_text())
    assert sum(1 for e in loaded if e["ph"] == "X") == 6
    assert {e["pid"] for e in loaded} == {1, 2}


def test_export_nothing():
    with pytest.raises(FlowscopeError, match="nothing to export"):
        trace_events({})


def test_single_rank_job_is_inconsistent():
    dp = _dp_bursts()
    job = JobCluster(0, frozenset({"a"}), frozenset({"m1"}))
    with pytest.raises(ConsistencyError):
        reconstruct_job(job, [classify_pair(dp)], dp)


def test_step_record_json_round_trip():
    s = StepRecord("a", 2, 100, 900, (500, 900), 4, 6, aligned_index=3, partial=False)
    assert StepRecord.from_json(s.to_json()) == s


def _simulate(spec, noise, seed):
    ds, topo, truth = generate([spec], noise, seed=seed)
    rec = recognize_jobs(ds.flows, topo)
    ev = identify_jobs(rec.jobs, ds.flows)
    return ds, truth, rec.jobs[0], ev


def test_job_steps_aligned_zero_noise():
    spec = JobSpec(machines=4, tp=8, pp=2, dp=2, steps=20, step_compute_time=300_000)
    ds, truth, job, ev = _simulate(spec, NoiseSpec.zero(), 2)
    tls = reconstruct_job(job, ev, ds.flows)
    assert len(tls) == 32
    assert {len(tl.steps) for tl in tls.values()} == {20}
    for k in range(20):
        assert len({tl.steps[k].aligned_index for tl in tls.values()}) == 1
    matched, total, errors = boundary_match(tls, truth, ds.flows)
    assert matched == total
    assert max(errors) == 0.0
    out = steps_to_json(tls)
    assert len(out) == 32 * 20 and all(s["job_id"] == job.job_id for s in out)


def test_rank_with_heavy_drop_recovers_boundaries():
    spec = JobSpec(machines=8, tp=8, pp=2, dp=4, steps=40, step_compute_time=300_000)
    ds, truth, job, ev = _simulate(spec, NoiseSpec.zero(), 5)
    victim = sorted(truth.step_boundaries)[0]
    rng = np.random.default_rng(9)
    kept = [f for f in ds.flows if victim not in (f.src, f.dst) or rng.random() >= 0.3]
    assert len(kept) < len(ds.flows)
    tls = reconstruct_job(job, ev, make_dataset(kept).flows)
    matched, total, _ = boundary_match({victim: tls[victim]}, truth, kept)
    assert matched / total >= 0.95


def test_streaming_tracker_agrees_with_batch():
    spec = JobSpec(machines=8, tp=8, pp=2, dp=4, steps=30, step_compute_time=300_000)
    ds, truth, job, ev = _simulate(spec, NoiseSpec.default(), 8)
    rank = sorted(truth.step_boundaries)[3]
    dp_pairs = {e.pair for e in ev if e.refined_type.value == "DP"}
    starts = sorted({f.start for f in ds.flows if rank in (f.src, f.dst) and f.pair in dp_pairs})
    batch = [starts[i] for i in split_by_gaps(starts)]
    tracker = StreamingStepTracker()
    online = [s for s in starts if tracker.push(s)]
    assert online == batch
    assert len(batch) == 29
