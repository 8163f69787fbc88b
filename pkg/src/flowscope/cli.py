"""Command-line entry point.

Every stage writes a JSON document carrying a ``meta`` block with the
config hash and the sha256 of each input file, so a later stage (or a
resumed pipeline) can tell whether an existing output still matches.

Exit codes: 0 success, 1 alerts found with ``--fail-on-alert``, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .core import CommPair, FlowscopeError, JobCluster
from .diagnosis import alerts_to_jsonl, diagnose_job, summary
from .ingest import (
    FlowDataset,
    IngestError,
    atomic_write,
    file_digest,
    filter_window,
    flows_to_jsonl,
    parse_flows,
    parse_topology,
    rejects_report,
    topology_to_json,
)
from .parallelism import PairEvidence, accuracy, identify_jobs, refine_transitive
from .recognition import recognize_jobs
from .simulator import GroundTruth, Scenario, SpecError
from .timeline import RankTimeline, StepRecord, reconstruct_job, steps_to_json, trace_events

log = logging.getLogger("flowscope")

EXIT_OK = 0
EXIT_ALERTS = 1
EXIT_USAGE = 2


class UsageError(FlowscopeError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _meta(stage: str, cfg: Optional[RunConfig], inputs: Mapping[str, str]) -> dict:
    return {
        "tool": "flowscope",
        "version": __version__,
        "stage": stage,
        "config_hash": cfg.digest() if cfg is not None else None,
        "inputs": {name: file_digest(path) for name, path in sorted(inputs.items())},
    }


def _read_json(path: str, what: str):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc.msg}") from exc


def _load_flows(path: str, cfg: RunConfig) -> FlowDataset:
    ds = parse_flows(path)
    if cfg.window_sec is not None and ds.flows:
        start = ds.flows[0].start
        ds = filter_window(ds, start, start + int(round(cfg.window_sec * 1_000_000)))
    return ds


def _load_jobs(path: str) -> List[JobCluster]:
    obj = _read_json(path, "job report")
    try:
        return [JobCluster.from_json(j) for j in obj["jobs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed job report {path}: {exc}") from exc


def _load_evidence(path: str) -> List[PairEvidence]:
    obj = _read_json(path, "evidence report")
    try:
        return [PairEvidence.from_json(p) for p in obj["pairs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed evidence report {path}: {exc}") from exc


def _load_steps(path: str) -> Dict[int, Dict[str, RankTimeline]]:
    obj = _read_json(path, "step report")
    out: Dict[int, Dict[str, RankTimeline]] = {}
    try:
        for s in obj["steps"]:
            rec = StepRecord.from_json(s)
            job = out.setdefault(int(s["job_id"]), {})
            tl = job.setdefault(rec.rank, RankTimeline(rec.rank, [], [], int(s["job_id"])))
            tl.steps.append(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed step report {path}: {exc}") from exc
    return out


def _jobs_from_evidence(evidence: Sequence[PairEvidence]) -> List[JobCluster]:
    gpus: Dict[int, set] = {}
    for ev in evidence:
        if ev.job_id is None:
            raise UsageError("evidence rows must carry job_id")
        gpus.setdefault(ev.job_id, set()).update(ev.pair)
    return [JobCluster(j, frozenset(g), frozenset()) for j, g in sorted(gpus.items())]


# stage implementations: pure functions from loaded inputs to documents


def stage_recognize(ds: FlowDataset, topo, cfg: RunConfig, inputs) -> dict:
    rec = recognize_jobs(ds.flows, topo)
    doc = rec.to_json()
    doc["meta"] = _meta("recognize", cfg, inputs)
    doc["flow_count"] = len(ds.flows)
    doc["rejects"] = rejects_report(ds)
    return doc


def stage_identify(ds: FlowDataset, jobs: List[JobCluster], cfg: RunConfig, inputs, truth: Optional[GroundTruth] = None) -> dict:
    raw = identify_jobs(jobs, ds.flows, cfg.step_params, cfg.size_bucket_bytes, refine=False)
    refined = refine_transitive(raw)
    evidence = refined if cfg.refine else raw
    doc = {
        "meta": _meta("identify", cfg, inputs),
        "refined": cfg.refine,
        "pairs": [ev.to_json() for ev in evidence],
    }
    if truth is not None:
        acc_raw = accuracy(raw, truth.pair_types, refined=False)
        acc_ref = accuracy(refined, truth.pair_types, refined=True)
        doc["accuracy"] = {
            "pairs": len(evidence),
            "without_refinement": acc_raw,
            "with_refinement": acc_ref,
            "refinement_gap": acc_ref - acc_raw,
            "reported": acc_ref if cfg.refine else acc_raw,
        }
    return doc


def stage_reconstruct(ds: FlowDataset, evidence: List[PairEvidence], cfg: RunConfig, inputs) -> Tuple[dict, list]:
    if not evidence:
        raise UsageError("evidence is empty; nothing to reconstruct")
    timelines: Dict[str, RankTimeline] = {}
    warnings: List[str] = []
    for job in _jobs_from_evidence(evidence):
        tls = reconstruct_job(
            job, evidence, ds.flows, cfg.step_params, cfg.gap_min_us, cfg.align_tolerance
        )
        for tl in tls.values():
            warnings.extend(tl.warnings)
        timelines.update(tls)
    doc = {
        "meta": _meta("reconstruct", cfg, inputs),
        "steps": steps_to_json(timelines),
        "warnings": warnings,
        "ranks": len(timelines),
    }
    return doc, trace_events(timelines)


def stage_diagnose(ds: FlowDataset, evidence: List[PairEvidence], steps: Dict[int, Dict[str, RankTimeline]], cfg: RunConfig, inputs) -> Tuple[str, dict, dict]:
    params = cfg.diagnosis_params
    alerts = []
    stats = []
    for job in _jobs_from_evidence(evidence):
        tls = steps.get(job.job_id, {})
        d = diagnose_job(job, tls, evidence, ds.flows, params)
        alerts.extend(d.alerts)
        stats.extend(dict(s.to_json(), job_id=job.job_id) for s in d.switch_stats)
    summ = summary(alerts)
    summ["meta"] = _meta("diagnose", cfg, inputs)
    return alerts_to_jsonl(alerts), summ, {"meta": summ["meta"], "switch_stats": stats}


# subcommands


def cmd_generate(args, cfg: RunConfig) -> int:
    path = args.spec
    if path.lower().endswith(".toml"):
        import tomli

        try:
            with open(path, "rb") as handle:
                obj = tomli.load(handle)
        except OSError as exc:
            raise UsageError(f"cannot read spec {path}: {exc.strerror or exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise UsageError(f"spec {path} is not valid TOML: {exc}") from exc
    else:
        obj = _read_json(path, "spec")
    if not isinstance(obj, dict):
        raise UsageError("spec must be an object with a 'jobs' list")
    scenario = Scenario.from_json(obj, seed=args.seed)
    ds, topo, truth = scenario.run()
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write(os.path.join(args.out_dir, "flows.jsonl"), flows_to_jsonl(ds.flows))
    atomic_write(os.path.join(args.out_dir, "topology.json"), topology_to_json(topo))
    gt = truth.to_json()
    gt["meta"] = {"tool": "flowscope", "version": __version__, "stage": "generate", "seed": scenario.seed, "inputs": {"spec": file_digest(path)}}
    atomic_write(os.path.join(args.out_dir, "ground_truth.json"), dumps(gt))
    log.info("generated %d flows over %d addresses", len(ds.flows), len(topo))
    return EXIT_OK


def cmd_recognize(args, cfg: RunConfig) -> int:
    ds = _load_flows(args.flows, cfg)
    topo = parse_topology(args.topology)
    doc = stage_recognize(ds, topo, cfg, {"flows": args.flows, "topology": args.topology})
    atomic_write(args.out, dumps(doc))
    log.info("recognized %d job(s)", len(doc["jobs"]))
    return EXIT_OK


def _truth(path: Optional[str]) -> Optional[GroundTruth]:
    if path is None:
        return None
    try:
        return GroundTruth.from_json(_read_json(path, "ground truth"))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed ground truth {path}: {exc}") from exc


def cmd_identify(args, cfg: RunConfig) -> int:
    ds = _load_flows(args.flows, cfg)
    jobs = _load_jobs(args.jobs)
    inputs = {"flows": args.flows, "jobs": args.jobs}
    doc = stage_identify(ds, jobs, cfg, inputs, _truth(args.ground_truth))
    atomic_write(args.out, dumps(doc))
    if "accuracy" in doc:
        acc = doc["accuracy"]
        print(
            f"accuracy with refinement {acc['with_refinement']:.4f}, "
            f"without {acc['without_refinement']:.4f}, gap {acc['refinement_gap']:.4f}"
        )
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    ds = _load_flows(args.flows, cfg)
    evidence = _load_evidence(args.evidence)
    doc, trace = stage_reconstruct(ds, evidence, cfg, {"flows": args.flows, "evidence": args.evidence})
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write(os.path.join(args.out_dir, "steps.json"), dumps(doc))
    atomic_write(os.path.join(args.out_dir, "trace.json"), json.dumps(trace, separators=(",", ":")) + "\n")
    for w in doc["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_diagnose(args, cfg: RunConfig) -> int:
    ds = _load_flows(args.flows, cfg)
    evidence = _load_evidence(args.evidence)
    steps = _load_steps(args.steps)
    inputs = {"flows": args.flows, "evidence": args.evidence, "steps": args.steps}
    alerts, summ, stats = stage_diagnose(ds, evidence, steps, cfg, inputs)
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write(os.path.join(args.out_dir, "alerts.jsonl"), alerts)
    atomic_write(os.path.join(args.out_dir, "summary.json"), dumps(summ))
    atomic_write(os.path.join(args.out_dir, "switch_stats.json"), dumps(stats))
    print(f"{summ['total']} alert(s): " + ", ".join(f"{k}={v}" for k, v in summ["by_level"].items()))
    if args.fail_on_alert and summ["total"]:
        return EXIT_ALERTS
    return EXIT_OK


def _cached(path: str, stage: str, cfg: RunConfig, inputs: Mapping[str, str]) -> bool:
    """True if ``path`` holds a stage output produced from these inputs and config."""
    if not os.path.exists(path):
        return False
    try:
        with open(path, encoding="utf-8") as handle:
            meta = json.load(handle).get("meta", {})
    except (OSError, json.JSONDecodeError, AttributeError):
        return False
    return meta == _meta(stage, cfg, inputs)


def cmd_pipeline(args, cfg: RunConfig) -> int:
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    for p in (args.flows, args.topology):
        if not os.path.exists(p):
            raise UsageError(f"missing input {p}")
    paths = {name: os.path.join(out, name) for name in ("jobs.json", "evidence.json", "steps.json", "trace.json", "alerts.jsonl", "summary.json", "switch_stats.json")}
    ds_cache: Dict[str, FlowDataset] = {}

    def flows() -> FlowDataset:
        if "ds" not in ds_cache:
            ds_cache["ds"] = _load_flows(args.flows, cfg)
        return ds_cache["ds"]

    inputs = {"flows": args.flows, "topology": args.topology}
    if _cached(paths["jobs.json"], "recognize", cfg, inputs):
        log.info("reusing %s", paths["jobs.json"])
    else:
        atomic_write(paths["jobs.json"], dumps(stage_recognize(flows(), parse_topology(args.topology), cfg, inputs)))

    inputs = {"flows": args.flows, "jobs": paths["jobs.json"]}
    if _cached(paths["evidence.json"], "identify", cfg, inputs):
        log.info("reusing %s", paths["evidence.json"])
    else:
        doc = stage_identify(flows(), _load_jobs(paths["jobs.json"]), cfg, inputs, _truth(args.ground_truth))
        atomic_write(paths["evidence.json"], dumps(doc))
    evidence = _load_evidence(paths["evidence.json"])

    inputs = {"flows": args.flows, "evidence": paths["evidence.json"]}
    if _cached(paths["steps.json"], "reconstruct", cfg, inputs) and os.path.exists(paths["trace.json"]):
        log.info("reusing %s", paths["steps.json"])
    elif evidence:
        doc, trace = stage_reconstruct(flows(), evidence, cfg, inputs)
        atomic_write(paths["trace.json"], json.dumps(trace, separators=(",", ":")) + "\n")
        atomic_write(paths["steps.json"], dumps(doc))
    else:
        atomic_write(paths["steps.json"], dumps({"meta": _meta("reconstruct", cfg, inputs), "steps": [], "warnings": ["no communication pairs"], "ranks": 0}))

    inputs = {"flows": args.flows, "evidence": paths["evidence.json"], "steps": paths["steps.json"]}
    if _cached(paths["summary.json"], "diagnose", cfg, inputs) and os.path.exists(paths["alerts.jsonl"]):
        log.info("reusing %s", paths["summary.json"])
        with open(paths["summary.json"], encoding="utf-8") as handle:
            summ = json.load(handle)
    else:
        alerts, summ, stats = stage_diagnose(flows(), evidence, _load_steps(paths["steps.json"]), cfg, inputs)
        atomic_write(paths["alerts.jsonl"], alerts)
        atomic_write(paths["switch_stats.json"], dumps(stats))
        atomic_write(paths["summary.json"], dumps(summ))
    print(f"{summ['total']} alert(s): " + ", ".join(f"{k}={v}" for k, v in summ["by_level"].items()))
    if args.fail_on_alert and summ["total"]:
        return EXIT_ALERTS
    return EXIT_OK


def _add_analysis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--config", help="TOML config file (default: $FLOWSCOPE_CONFIG)")
    p.add_argument("--window-sec", type=float, help="analyse only the first N seconds of flows")
    p.add_argument("--bocd-threshold", type=float, help="change-point probability threshold (default 0.95)")
    p.add_argument("--bocd-hazard", type=float, help="constant change-point hazard (default 1/50)")
    p.add_argument("--k-sigma", type=float, help="outlier multiplier k (default 3)")
    p.add_argument("--sigma-estimator", choices=["mad", "std"], help="dispersion unit for k-sigma")
    p.add_argument("--dp-limit", type=int, help="concurrent DP pairs per switch before alerting (default 8)")
    p.add_argument("--gap-min-us", type=int, help="shortest silence reported as compute (default 100)")
    p.add_argument("--size-bucket-bytes", type=int, help="flow-size granularity for distinct-size counts (default 1)")
    p.add_argument("--no-refine", action="store_true", help="skip transitive DP refinement")
    p.add_argument("--seed", type=int, help="seed recorded in the config (simulation uses it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowscope", description="Training-job diagnosis from mirrored network flows.")
    parser.add_argument("--version", action="version", version=f"flowscope {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate flows with ground truth")
    p.add_argument("--spec", required=True, help="scenario file (TOML or JSON)")
    p.add_argument("--out-dir", required=True)
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("recognize", help="recognize training jobs")
    p.add_argument("--flows", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--out", required=True)
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("identify", help="classify DP/PP communication pairs")
    p.add_argument("--flows", required=True)
    p.add_argument("--jobs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ground-truth", help="report accuracy against this ground truth")
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("reconstruct", help="rebuild per-rank timelines")
    p.add_argument("--flows", required=True)
    p.add_argument("--evidence", required=True)
    p.add_argument("--out-dir", required=True)
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("diagnose", help="flag slow steps, groups and switches")
    p.add_argument("--flows", required=True)
    p.add_argument("--evidence", required=True)
    p.add_argument("--steps", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fail-on-alert", action="store_true", help="exit 1 when any alert is raised")
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pipeline", help="run every stage, reusing matching cached outputs")
    p.add_argument("--flows", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ground-truth")
    p.add_argument("--fail-on-alert", action="store_true")
    _add_analysis_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        window_sec=args.window_sec,
        bocd_threshold=args.bocd_threshold,
        bocd_hazard=args.bocd_hazard,
        k_sigma=args.k_sigma,
        sigma_estimator=args.sigma_estimator,
        dp_limit=args.dp_limit,
        gap_min_us=args.gap_min_us,
        size_bucket_bytes=args.size_bucket_bytes,
        refine=False if args.no_refine else None,
        seed=args.seed,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (FlowscopeError, ConfigError, SpecError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
