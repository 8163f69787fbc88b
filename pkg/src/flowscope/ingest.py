"""Reading and writing flow records and topology files.

Two flow formats are supported:

* CSV with the exact header ``start_time_us,src,dst,switches,size_bytes,duration_us``
  where ``switches`` is a ``;``-joined list in one quoted column.
* JSONL with one object per line, keys ``t``, ``src``, ``dst``, ``sw`` (array),
  ``size``, ``dur``.

Invalid rows are collected in a rejects report instead of aborting the run,
unless more than half of the rows are bad, which usually means the wrong
format was supplied.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

from .core import (
    FlowRecord,
    FlowscopeError,
    InvalidFlowError,
    Topology,
    make_flow,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("start_time_us", "src", "dst", "switches", "size_bytes", "duration_us")
JSONL_KEYS = ("t", "src", "dst", "sw", "size", "dur")
MAX_REJECT_FRACTION = 0.5


class IngestError(FlowscopeError):
    """The input cannot be read as a whole (missing file, wrong header, too many bad rows)."""


class FlowFormat(str, enum.Enum):
    CSV = "csv"
    JSONL = "jsonl"

    @classmethod
    def from_path(cls, path: str) -> "FlowFormat":
        lower = str(path).lower()
        if lower.endswith(".csv"):
            return cls.CSV
        if lower.endswith((".jsonl", ".ndjson")):
            return cls.JSONL
        raise IngestError(f"cannot infer flow format from file name {path!r}; use .csv or .jsonl")


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    detail: str = ""

    def to_json(self) -> dict:
        return {"line": self.line, "reason": self.reason, "detail": self.detail}


@dataclass(frozen=True)
class FlowDataset:
    flows: Tuple[FlowRecord, ...]
    source_path: str = ""
    rejects: Tuple[Reject, ...] = ()
    rows_read: int = 0

    @property
    def time_window(self) -> Optional[Tuple[int, int]]:
        """``(min start, max end)`` or None for an empty dataset."""
        if not self.flows:
            return None
        return self.flows[0].start, max(f.end for f in self.flows)

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self):
        return iter(self.flows)


def sort_flows(flows: Iterable[FlowRecord]) -> Tuple[FlowRecord, ...]:
    """Sort by (start, src, dst); remaining fields break ties so the order is total."""
    return tuple(sorted(flows, key=FlowRecord.sort_key))


def make_dataset(flows: Iterable[FlowRecord], source_path: str = "") -> FlowDataset:
    flows = sort_flows(flows)
    return FlowDataset(flows, source_path, (), len(flows))


def merge_datasets(datasets: Sequence[FlowDataset]) -> FlowDataset:
    flows = [f for ds in datasets for f in ds.flows]
    rejects = tuple(r for ds in datasets for r in ds.rejects)
    return FlowDataset(
        sort_flows(flows),
        ",".join(ds.source_path for ds in datasets),
        rejects,
        sum(ds.rows_read for ds in datasets),
    )


def _strict_int(value, name: str) -> int:
    if isinstance(value, bool):
        raise InvalidFlowError("bad-field", f"{name} must be an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        text = value.strip()
        if text and (text.isdigit() or (text[0] in "+-" and text[1:].isdigit())):
            return int(text)
    raise InvalidFlowError("bad-field", f"{name}={value!r} is not an integer")


def _check_reject_rate(rows: int, rejects: List[Reject], path: str) -> None:
    if rows and len(rejects) > MAX_REJECT_FRACTION * rows:
        reasons = {}
        for r in rejects:
            reasons[r.reason] = reasons.get(r.reason, 0) + 1
        raise IngestError(
            f"{path}: {len(rejects)} of {rows} rows rejected (>{MAX_REJECT_FRACTION:.0%}); "
            f"wrong format? reasons: {reasons}"
        )


def _parse_csv(handle, path: str):
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise IngestError(
            f"{path}: header mismatch, expected {','.join(CSV_HEADER)!r}, got {','.join(header)!r}"
        )
    flows, rejects, rows = [], [], 0
    for row in reader:
        if not row:
            continue
        rows += 1
        line = reader.line_num
        if len(row) != len(CSV_HEADER):
            rejects.append(Reject(line, "column-count", f"expected {len(CSV_HEADER)}, got {len(row)}"))
            continue
        try:
            switches = [s.strip() for s in row[3].split(";")] if row[3].strip() else []
            flows.append(
                make_flow(
                    _strict_int(row[0], "start_time_us"),
                    row[1].strip(),
                    row[2].strip(),
                    switches,
                    _strict_int(row[4], "size_bytes"),
                    _strict_int(row[5], "duration_us"),
                )
            )
        except InvalidFlowError as exc:
            rejects.append(Reject(line, exc.reason, str(exc)))
    return flows, rejects, rows


def _parse_jsonl(handle, path: str):
    flows, rejects, rows = [], [], 0
    raw_decode = json.JSONDecoder().raw_decode
    strings: dict = {}
    switch_paths: dict = {}
    for line_no, text in enumerate(handle, start=1):
        if not text.strip():
            continue
        rows += 1
        try:
            body = text.strip()
            obj, end = raw_decode(body)
            if end != len(body):
                raise json.JSONDecodeError("Extra data", body, end)
        except json.JSONDecodeError as exc:
            rejects.append(Reject(line_no, "bad-json", exc.msg))
            continue
        if not isinstance(obj, dict):
            rejects.append(Reject(line_no, "bad-json", "line is not an object"))
            continue
        try:
            t, src, dst, sw, size, dur = obj["t"], obj["src"], obj["dst"], obj["sw"], obj["size"], obj["dur"]
        except KeyError:
            missing = [k for k in JSONL_KEYS if k not in obj]
            rejects.append(Reject(line_no, "missing-field", ",".join(missing)))
            continue
        try:
            # fast path for well-typed rows; FlowRecord still checks every invariant
            if (
                type(t) is int and type(size) is int and type(dur) is int
                and type(src) is str and type(dst) is str and type(sw) is list
            ):
                key = tuple(sw)
                switches = switch_paths.get(key)
                if switches is None:
                    if not all(isinstance(x, str) for x in key):
                        raise InvalidFlowError("bad-field", "sw must be an array of strings")
                    switches = switch_paths[key] = tuple(strings.setdefault(x, x) for x in key)
                flows.append(
                    FlowRecord(t, strings.setdefault(src, src), strings.setdefault(dst, dst), switches, size, dur)
                )
                continue
            if not isinstance(sw, list) or not all(isinstance(x, str) for x in sw):
                raise InvalidFlowError("bad-field", "sw must be an array of strings")
            if not isinstance(src, str) or not isinstance(dst, str):
                raise InvalidFlowError("bad-field", "src/dst must be strings")
            if isinstance(t, str) or isinstance(size, str) or isinstance(dur, str):
                raise InvalidFlowError("bad-field", "numeric fields must be JSON numbers")
            flows.append(
                make_flow(_strict_int(t, "t"), src, dst, sw, _strict_int(size, "size"), _strict_int(dur, "dur"))
            )
        except InvalidFlowError as exc:
            rejects.append(Reject(line_no, exc.reason, str(exc)))
    return flows, rejects, rows


def parse_flows(path: str, fmt: Optional[FlowFormat] = None) -> FlowDataset:
    """Parse a flow file. ``fmt`` defaults to the format implied by the extension."""
    path = str(path)
    fmt = FlowFormat(fmt) if fmt is not None else FlowFormat.from_path(path)
    try:
        handle = open(path, newline="" if fmt is FlowFormat.CSV else None, encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with handle:
        if fmt is FlowFormat.CSV:
            flows, rejects, rows = _parse_csv(handle, path)
        else:
            flows, rejects, rows = _parse_jsonl(handle, path)
    _check_reject_rate(rows, rejects, path)
    if rejects:
        log.warning("%s: rejected %d of %d rows", path, len(rejects), rows)
    return FlowDataset(sort_flows(flows), path, tuple(rejects), rows)


def _reject_duplicates(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise IngestError(f"duplicate key {key!r} in topology")
        obj[key] = value
    return obj


def parse_topology(path: str) -> Topology:
    """Load a ``{address: machine}`` JSON object."""
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return topology_from_json(text, source=str(path))


def topology_from_json(text: str, source: str = "<string>") -> Topology:
    try:
        obj = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise IngestError(f"{source}: not valid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise IngestError(f"{source}: topology must be a JSON object mapping address to machine")
    bad = [k for k, v in obj.items() if not isinstance(v, str) or not v or not k]
    if bad:
        raise IngestError(f"{source}: topology values must be non-empty machine ids (bad keys: {bad[:5]})")
    return Topology(dict(obj))


def filter_window(ds: FlowDataset, start: int, end: int) -> FlowDataset:
    """Keep flows whose start lies in the half-open window ``[start, end)``."""
    if not start < end:
        raise ValueError(f"window start must precede end, got [{start}, {end})")
    kept = tuple(f for f in ds.flows if start <= f.start < end)
    return FlowDataset(kept, ds.source_path, ds.rejects, ds.rows_read)


def flows_to_csv(flows: Iterable[FlowRecord]) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for f in flows:
        writer.writerow([f.start, f.src, f.dst, ";".join(f.switches), f.size, f.duration])
    return buf.getvalue()


def flow_to_jsonl(f: FlowRecord) -> str:
    return json.dumps(
        {"t": f.start, "src": f.src, "dst": f.dst, "sw": list(f.switches), "size": f.size, "dur": f.duration},
        separators=(",", ":"),
    )


def flows_to_jsonl(flows: Iterable[FlowRecord]) -> str:
    return "".join(flow_to_jsonl(f) + "\n" for f in flows)


def write_flows(flows: Iterable[FlowRecord], path: str, fmt: Optional[FlowFormat] = None) -> None:
    fmt = FlowFormat(fmt) if fmt is not None else FlowFormat.from_path(path)
    text = flows_to_csv(flows) if fmt is FlowFormat.CSV else flows_to_jsonl(flows)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)


def topology_to_json(topo: Topology) -> str:
    return json.dumps({a: topo.machine_of[a] for a in sorted(topo.machine_of)}, indent=1) + "\n"


def write_topology(topo: Topology, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(topology_to_json(topo))


def rejects_report(ds: FlowDataset) -> dict:
    # file name only, so reports do not depend on where the input lives
    return {
        "source": os.path.basename(ds.source_path),
        "rows": ds.rows_read,
        "accepted": len(ds.flows),
        "rejected": len(ds.rejects),
        "rejects": [r.to_json() for r in ds.rejects],
    }


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: str, text: str) -> None:
    """Write via a temp file and rename so a crashed run never leaves a half file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)
    os.replace(tmp, path)
