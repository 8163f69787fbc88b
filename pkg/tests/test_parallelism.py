import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowscope.core import CommPair, CommType, JobCluster, canonical_pair
from flowscope.parallelism import (
    Confidence,
    ConsistencyError,
    PairEvidence,
    accuracy,
    classify_pair,
    divide_steps,
    dp_components,
    identify_job,
    identify_jobs,
    mode_of_counts,
    refine_transitive,
)
from flowscope.simulator import JobSpec, NoiseSpec, generate
from flowscope.recognition import recognize_jobs

from conftest import flow

MS = 1000


def gap_threshold_segments(starts, factor=10):
    """Reference split: a new segment wherever a gap exceeds ``factor`` times the median gap."""
    gaps = sorted(b - a for a, b in zip(starts, starts[1:]))
    median = gaps[len(gaps) // 2] if len(gaps) % 2 else (gaps[len(gaps) // 2 - 1] + gaps[len(gaps) // 2]) / 2
    return 1 + sum(1 for a, b in zip(starts, starts[1:]) if b - a > factor * median)


def bursts(n_bursts, per_burst, intra, inter, sizes=(1024,)):
    out, t = [], 0
    for _ in range(n_bursts):
        for i in range(per_burst):
            out.append(flow(t, "a", "b", size=sizes[i % len(sizes)]))
            t += intra
        t += inter - intra
    return out


def test_uniform_flows_one_segment():
    flows = [flow(i * MS, "a", "b") for i in range(10)]
    assert len(divide_steps(flows)) == 1


def test_three_bursts_agree_with_gap_oracle():
    flows = bursts(3, 8, 1 * MS, 500 * MS)
    oracle = gap_threshold_segments([f.start for f in flows])
    assert oracle == 3
    seg = divide_steps(flows)
    assert len(seg) == oracle
    assert seg.change_points == (8, 16)


def test_two_flows_fallback():
    assert len(divide_steps([flow(0, "a", "b"), flow(10 * MS, "a", "b")])) == 1


def test_simultaneous_flows_form_one_observation():
    flows = []
    for k in range(4):
        base = k * 400 * MS
        for i in range(5):
            flows.append(flow(base + i * MS, "a", "b"))
            flows.append(flow(base + i * MS, "b", "a"))
    seg = divide_steps(flows)
    assert len(seg) == 4
    ordered = sorted(flows, key=lambda f: f.sort_key())
    assert [ordered[c].start for c in seg.change_points] == [400 * MS, 800 * MS, 1200 * MS]


def test_fixed_size_pair_is_pp():
    ev = classify_pair(bursts(4, 8, MS, 400 * MS, sizes=(524288,)))
    assert ev.distinct_size_counts == (1, 1, 1, 1)
    assert ev.raw_type is CommType.PP
    assert ev.confidence is Confidence.HIGH


def test_varying_sizes_pair_is_dp():
    ev = classify_pair(bursts(4, 6, MS, 400 * MS, sizes=(4 << 20, 2 << 20, 1 << 20)))
    assert ev.distinct_size_counts == (3, 3, 3, 3)
    assert ev.mode_of_counts == 3
    assert ev.raw_type is CommType.DP


def test_short_window_low_confidence():
    ev = classify_pair(bursts(2, 6, MS, 400 * MS, sizes=(4, 2, 1)))
    assert ev.confidence is Confidence.LOW
    assert ev.raw_type is CommType.DP


def test_mode_examples():
    counts = [4] * 9 + [1]
    assert mode_of_counts(counts) == Counter(counts).most_common(1)[0][0] == 4
    assert mode_of_counts([1, 1, 3, 3]) == 3
    assert mode_of_counts([2]) == 2
    with pytest.raises(ValueError):
        mode_of_counts([])


@given(st.lists(st.integers(1, 6), min_size=1, max_size=40))
def test_mode_matches_exhaustive_count(counts):
    freq = {c: counts.count(c) for c in set(counts)}
    best = max(freq.values())
    assert mode_of_counts(counts) == max(c for c in freq if freq[c] == best)


@given(st.permutations(bursts(3, 6, MS, 300 * MS, sizes=(5, 7, 9))))
@settings(max_examples=30, deadline=None)
def test_classify_is_order_invariant(flows):
    ref = classify_pair(bursts(3, 6, MS, 300 * MS, sizes=(5, 7, 9)))
    assert classify_pair(list(flows)) == ref


def _ev(u, v, t):
    from flowscope.changepoint import Segmentation

    return PairEvidence(
        pair=canonical_pair(u, v),
        steps=Segmentation(1),
        distinct_size_counts=(3 if t == "DP" else 1,),
        mode_of_counts=3 if t == "DP" else 1,
        raw_type=CommType(t),
        refined_type=CommType(t),
        confidence=Confidence.LOW,
        flow_count=1,
    )


def test_refinement_transitivity_example():
    ev = [_ev("a", "b", "DP"), _ev("b", "c", "DP"), _ev("a", "c", "PP")]
    out = {e.pair: e for e in refine_transitive(ev)}
    assert out[CommPair("a", "c")].refined_type is CommType.DP
    assert out[CommPair("a", "c")].raw_type is CommType.PP


def test_pipeline_chain_untouched():
    ev = [_ev("a", "b", "PP"), _ev("b", "c", "PP"), _ev("c", "d", "PP")]
    assert refine_transitive(ev) == ev


def test_pp_between_components_untouched():
    ev = [_ev("a", "b", "DP"), _ev("c", "d", "DP"), _ev("b", "c", "PP")]
    out = {e.pair: e.refined_type for e in refine_transitive(ev)}
    assert out[CommPair("b", "c")] is CommType.PP


labelled_edges = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 12), st.sampled_from(["DP", "PP"])).filter(lambda e: e[0] != e[1]),
    max_size=40,
    unique_by=lambda e: (min(e[0], e[1]), max(e[0], e[1])),
)


def _evidence(edges):
    return [_ev(f"g{a:02d}", f"g{b:02d}", t) for a, b, t in edges]


@given(labelled_edges)
def test_refinement_monotone_idempotent_sound(edges):
    ev = _evidence(edges)
    once = refine_transitive(ev)
    assert refine_transitive(once) == once
    before = {e.pair for e in ev if e.refined_type is CommType.DP}
    after = {e.pair for e in once if e.refined_type is CommType.DP}
    assert before <= after
    comp_of = {g: i for i, c in enumerate(dp_components(ev)) for g in c}
    for e in once:
        cu, cv = comp_of.get(e.pair.u), comp_of.get(e.pair.v)
        if cu is not None and cu == cv:
            assert e.refined_type is CommType.DP


def test_single_dp_pair_job():
    flows = bursts(4, 6, MS, 400 * MS, sizes=(3, 2, 1))
    job = JobCluster(0, frozenset("ab"), frozenset({"m1", "m2"}))
    (ev,) = identify_job(job, flows)
    assert ev.raw_type is ev.refined_type is CommType.DP


def test_pair_spanning_jobs_is_inconsistent():
    j0 = JobCluster(0, frozenset("ab"), frozenset({"m1"}))
    j1 = JobCluster(1, frozenset("cd"), frozenset({"m2"}))
    with pytest.raises(ConsistencyError):
        identify_jobs([j0, j1], [flow(0, "a", "b"), flow(1, "b", "c")])
    with pytest.raises(ConsistencyError):
        identify_job(j0, [flow(1, "b", "c")])


def test_evidence_json_round_trip():
    ev = classify_pair(bursts(4, 6, MS, 400 * MS, sizes=(3, 2, 1)))
    assert PairEvidence.from_json(ev.to_json()) == ev


def test_simulated_job_zero_noise_exact():
    spec = JobSpec(machines=8, tp=8, pp=2, dp=4, steps=10, step_compute_time=500_000)
    ds, topo, truth = generate([spec], NoiseSpec.zero(), seed=4)
    rec = recognize_jobs(ds.flows, topo)
    ev = identify_jobs(rec.jobs, ds.flows, refine=False)
    assert accuracy(ev, truth.pair_types, refined=False) == 1.0
    for e in ev:
        if e.raw_type is CommType.DP:
            assert len(e.steps) == 10 and set(e.distinct_size_counts) == {3}
        else:
            assert set(e.distinct_size_counts) == {1}


def test_simulated_collapsed_dp_pairs_recovered():
    spec = JobSpec(machines=8, tp=8, pp=2, dp=4, steps=10, step_compute_time=500_000)
    noise = NoiseSpec(size_collapse_prob=0.9, lossy_ring_fraction=1.0)
    ds, topo, truth = generate([spec], noise, seed=4)
    rec = recognize_jobs(ds.flows, topo)
    raw = identify_jobs(rec.jobs, ds.flows, refine=False)
    refined = refine_transitive(raw)
    assert accuracy(raw, truth.pair_types, refined=False) < 1.0
    assert accuracy(refined, truth.pair_types) == 1.0
