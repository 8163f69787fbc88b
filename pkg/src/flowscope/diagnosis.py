"""Fail-slow detection over reconstructed timelines.

Three views, all using a k-sigma outlier rule:

* steps: per job, the duration of each aligned step (median over ranks);
* groups: per aligned step, the DP synchronisation span of each DP group;
* switches: per aligned step, the number of distinct DP pairs concurrently
  crossing each switch (against a fixed limit) and each switch's mean DP
  flow bandwidth (lower tail, since a degraded switch is slower).

The dispersion unit defaults to the mean absolute deviation
``(1/n) * sum |l_i - mean|``; the classical standard deviation is available.
"""

from __future__ import annotations

import bisect
import enum
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import CommType, FlowRecord, GpuAddr, JobCluster
from .parallelism import PairEvidence, dp_components
from .timeline import RankTimeline, StepRecord

log = logging.getLogger(__name__)

DEFAULT_K = 3.0
DEFAULT_DP_LIMIT = 8
DEFAULT_BUCKET_US = 10_000
# an outlier must also differ from the mean by this fraction of the mean
DEFAULT_MIN_REL_DEVIATION = 0.05


class SigmaEstimator(str, enum.Enum):
    MAD = "mad"
    STD = "std"


class AlertLevel(str, enum.Enum):
    STEP = "STEP"
    GROUP = "GROUP"
    SWITCH_COUNT = "SWITCH_COUNT"
    SWITCH_BANDWIDTH = "SWITCH_BANDWIDTH"


@dataclass(frozen=True)
class Alert:
    """One finding. ``metric_value`` lies beyond ``threshold`` in the alert's direction:
    above it for durations and counts, below it for bandwidth."""

    level: AlertLevel
    subject: str
    step_index: Optional[int]
    metric_value: float
    unit: str
    baseline_mean: float
    baseline_sigma: float
    threshold: float
    timestamp: int
    job_id: Optional[int] = None
    members: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.baseline_sigma < 0:
            raise ValueError("baseline_sigma must be non-negative")
        if self.level is AlertLevel.SWITCH_BANDWIDTH:
            if not self.metric_value < self.threshold:
                raise ValueError("bandwidth alerts need metric below threshold")
        elif not self.metric_value > self.threshold:
            raise ValueError("alerts need metric above threshold")

    def to_json(self) -> dict:
        return {
            "level": self.level.value,
            "subject": self.subject,
            "job_id": self.job_id,
            "step_index": self.step_index,
            "metric_value": self.metric_value,
            "unit": self.unit,
            "baseline_mean": self.baseline_mean,
            "baseline_sigma": self.baseline_sigma,
            "threshold": self.threshold,
            "timestamp": self.timestamp,
            "members": list(self.members),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Alert":
        return cls(
            AlertLevel(obj["level"]),
            obj["subject"],
            obj["step_index"],
            float(obj["metric_value"]),
            obj["unit"],
            float(obj["baseline_mean"]),
            float(obj["baseline_sigma"]),
            float(obj["threshold"]),
            int(obj["timestamp"]),
            obj.get("job_id"),
            tuple(obj.get("members", ())),
        )

    def sort_key(self):
        return (self.job_id if self.job_id is not None else -1, self.level.value, self.step_index if self.step_index is not None else -1, self.subject)


@dataclass(frozen=True)
class SwitchStats:
    switch: str
    window: Tuple[int, int]
    step_index: Optional[int]
    distinct_dp_flow_count: int
    mean_dp_bandwidth: float
    flow_count: int = 0

    def to_json(self) -> dict:
        return {
            "switch": self.switch,
            "window": list(self.window),
            "step_index": self.step_index,
            "distinct_dp_flow_count": self.distinct_dp_flow_count,
            "mean_dp_bandwidth_gbps": self.mean_dp_bandwidth,
            "flow_count": self.flow_count,
        }


@dataclass(frozen=True)
class Baseline:
    mean: float
    sigma: float
    upper: float
    lower: float


@dataclass(frozen=True)
class DiagnosisParams:
    k: float = DEFAULT_K
    estimator: SigmaEstimator = SigmaEstimator.MAD
    dp_limit: int = DEFAULT_DP_LIMIT
    bucket_us: int = DEFAULT_BUCKET_US
    min_rel_deviation: float = DEFAULT_MIN_REL_DEVIATION


def baseline(series: Sequence[float], k: float = DEFAULT_K, estimator: SigmaEstimator = SigmaEstimator.MAD) -> Baseline:
    n = len(series)
    mean = math.fsum(series) / n
    if SigmaEstimator(estimator) is SigmaEstimator.MAD:
        sigma = math.fsum(abs(x - mean) for x in series) / n
    else:
        sigma = math.sqrt(math.fsum((x - mean) ** 2 for x in series) / n)
    return Baseline(mean, sigma, mean + k * sigma, mean - k * sigma)


def k_sigma_outliers(
    series: Sequence[float],
    k: float = DEFAULT_K,
    estimator: SigmaEstimator = SigmaEstimator.MAD,
    lower: bool = False,
) -> List[int]:
    """Indices with ``l_i > mean + k*sigma`` (or ``< mean - k*sigma`` when ``lower``)."""
    if len(series) < 2:
        log.warning("k-sigma needs at least two samples, got %d", len(series))
        return []
    b = baseline(series, k, estimator)
    if lower:
        return [i for i, x in enumerate(series) if x < b.lower]
    return [i for i, x in enumerate(series) if x > b.upper]


def _significant(x: float, mean: float, rel: float) -> bool:
    return abs(x - mean) > rel * abs(mean)


def _aligned_steps(timelines: Mapping[GpuAddr, RankTimeline]) -> Dict[int, List[StepRecord]]:
    out: Dict[int, List[StepRecord]] = {}
    for tl in timelines.values():
        for s in tl.steps:
            if s.aligned_index is not None:
                out.setdefault(s.aligned_index, []).append(s)
    return dict(sorted(out.items()))


def _job_label(job_id) -> str:
    return f"job{job_id}"


def diagnose_steps(
    timelines: Mapping[GpuAddr, RankTimeline], job_id: Optional[int] = None, params: DiagnosisParams = DiagnosisParams()
) -> List[Alert]:
    """STEP alerts for aligned steps whose median duration is an upper outlier."""
    series, idx, stamps = [], [], []
    for a, steps in _aligned_steps(timelines).items():
        full = [s for s in steps if not s.partial]
        if not full:
            continue
        series.append(float(statistics.median(s.duration for s in full)))
        idx.append(a)
        stamps.append(int(statistics.median_low(s.step_end for s in full)))
    if len(series) < 2:
        log.info("job %s: fewer than two complete steps, step diagnosis skipped", job_id)
        return []
    b = baseline(series, params.k, params.estimator)
    alerts = []
    for i in k_sigma_outliers(series, params.k, params.estimator):
        if _significant(series[i], b.mean, params.min_rel_deviation):
            alerts.append(
                Alert(AlertLevel.STEP, _job_label(job_id), idx[i], series[i], "us", b.mean, b.sigma, b.upper, stamps[i], job_id)
            )
    return alerts


def dp_groups(evidence: Sequence[PairEvidence]) -> List[List[GpuAddr]]:
    return dp_components(evidence, use_refined=True)


def diagnose_groups(
    timelines: Mapping[GpuAddr, RankTimeline],
    evidence: Sequence[PairEvidence],
    job_id: Optional[int] = None,
    params: DiagnosisParams = DiagnosisParams(),
) -> List[Alert]:
    """GROUP alerts: per aligned step, DP groups whose synchronisation span is an upper outlier."""
    groups = dp_groups(evidence)
    if len(groups) < 2:
        log.info("job %s: %d DP group(s), group diagnosis skipped", job_id, len(groups))
        return []
    group_of = {g: i for i, comp in enumerate(groups) for g in comp}
    alerts = []
    for a, steps in _aligned_steps(timelines).items():
        spans: Dict[int, List[int]] = {}
        for s in steps:
            gi = group_of.get(s.rank)
            if gi is None:
                continue
            lo_hi = spans.setdefault(gi, [s.dp_span[0], s.dp_span[1]])
            lo_hi[0] = min(lo_hi[0], s.dp_span[0])
            lo_hi[1] = max(lo_hi[1], s.dp_span[1])
        if len(spans) < 2:
            continue
        order = sorted(spans)
        series = [float(spans[g][1] - spans[g][0]) for g in order]
        b = baseline(series, params.k, params.estimator)
        for i in k_sigma_outliers(series, params.k, params.estimator):
            if not _significant(series[i], b.mean, params.min_rel_deviation):
                continue
            gi = order[i]
            alerts.append(
                Alert(
                    AlertLevel.GROUP,
                    f"{_job_label(job_id)}/dp{gi}",
                    a,
                    series[i],
                    "us",
                    b.mean,
                    b.sigma,
                    b.upper,
                    spans[gi][1],
                    job_id,
                    tuple(groups[gi]),
                )
            )
    return alerts


def step_windows(timelines: Mapping[GpuAddr, RankTimeline]) -> List[Tuple[int, int, int]]:
    """(aligned index, start, end) of each aligned step's DP synchronisation, over all ranks.

    DP spans of consecutive steps never interleave, unlike step spans of
    ranks that finish at different times, so switch statistics use these.
    """
    out = []
    for a, steps in _aligned_steps(timelines).items():
        out.append((a, min(s.dp_span[0] for s in steps), max(s.dp_span[1] for s in steps)))
    return out


def switch_stats(
    flows: Iterable[FlowRecord],
    window: Tuple[int, int],
    step_index: Optional[int] = None,
    bucket_us: int = DEFAULT_BUCKET_US,
) -> List[SwitchStats]:
    """Per-switch statistics of the DP ``flows`` starting inside the closed ``window``."""
    lo, hi = window
    per_switch: Dict[str, List[FlowRecord]] = {}
    for f in flows:
        if lo <= f.start <= hi:
            for sw in set(f.switches):
                per_switch.setdefault(sw, []).append(f)
    out = []
    for sw in sorted(per_switch):
        fl = per_switch[sw]
        buckets: Dict[int, set] = {}
        for f in fl:
            for b in range(f.start // bucket_us, (f.end - 1) // bucket_us + 1):
                buckets.setdefault(b, set()).add(f.pair)
        count = max(len(v) for v in buckets.values())
        bw = math.fsum(f.size * 8 / (f.duration * 1000.0) for f in fl) / len(fl)
        out.append(SwitchStats(sw, window, step_index, count, bw, len(fl)))
    return out


def diagnose_switches(
    flows: Iterable[FlowRecord],
    evidence: Sequence[PairEvidence],
    windows: Sequence[Tuple[int, int, int]],
    job_id: Optional[int] = None,
    params: DiagnosisParams = DiagnosisParams(),
) -> Tuple[List[SwitchStats], List[Alert]]:
    """Concurrency and bandwidth checks per switch for each aligned step window."""
    dp_pairs = {ev.pair for ev in evidence if ev.refined_type is CommType.DP}
    dp_flows = sorted((f for f in flows if f.pair in dp_pairs), key=FlowRecord.sort_key)
    stats_all: List[SwitchStats] = []
    alerts: List[Alert] = []
    starts = [f.start for f in dp_flows]
    for a, lo, hi in windows:
        i0 = bisect.bisect_left(starts, lo)
        i1 = bisect.bisect_right(starts, hi)
        stats = switch_stats(dp_flows[i0:i1], (lo, hi), a, params.bucket_us)
        stats_all.extend(stats)
        for st in stats:
            if st.distinct_dp_flow_count > params.dp_limit:
                alerts.append(
                    Alert(
                        AlertLevel.SWITCH_COUNT,
                        st.switch,
                        a,
                        float(st.distinct_dp_flow_count),
                        "pairs",
                        float(params.dp_limit),
                        0.0,
                        float(params.dp_limit),
                        hi,
                        job_id,
                    )
                )
        if len(stats) < 2:
            continue
        series = [st.mean_dp_bandwidth for st in stats]
        b = baseline(series, params.k, params.estimator)
        for i in k_sigma_outliers(series, params.k, params.estimator, lower=True):
            if _significant(series[i], b.mean, params.min_rel_deviation):
                alerts.append(
                    Alert(
                        AlertLevel.SWITCH_BANDWIDTH,
                        stats[i].switch,
                        a,
                        series[i],
                        "Gb/s",
                        b.mean,
                        b.sigma,
                        b.lower,
                        hi,
                        job_id,
                    )
                )
    return stats_all, alerts


@dataclass
class JobDiagnosis:
    job_id: int
    alerts: List[Alert] = field(default_factory=list)
    switch_stats: List[SwitchStats] = field(default_factory=list)


def diagnose_job(
    job: JobCluster,
    timelines: Mapping[GpuAddr, RankTimeline],
    evidence: Sequence[PairEvidence],
    flows: Sequence[FlowRecord],
    params: DiagnosisParams = DiagnosisParams(),
) -> JobDiagnosis:
    mine = [ev for ev in evidence if ev.pair.u in job.gpus]
    jf = [f for f in flows if f.src in job.gpus]
    alerts = diagnose_steps(timelines, job.job_id, params)
    alerts += diagnose_groups(timelines, mine, job.job_id, params)
    stats, sw_alerts = diagnose_switches(jf, mine, step_windows(timelines), job.job_id, params)
    alerts += sw_alerts
    alerts.sort(key=Alert.sort_key)
    return JobDiagnosis(job.job_id, alerts, stats)


def summary(alerts: Sequence[Alert]) -> dict:
    counts = {lvl.value: 0 for lvl in AlertLevel}
    for a in alerts:
        counts[a.level.value] += 1
    return {"total": len(alerts), "by_level": counts}


def alerts_to_jsonl(alerts: Sequence[Alert]) -> str:
    return "".join(json.dumps(a.to_json(), sort_keys=True) + "\n" for a in alerts)
