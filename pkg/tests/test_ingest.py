import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowscope.ingest import (
    FlowFormat,
    IngestError,
    filter_window,
    make_dataset,
    merge_datasets,
    parse_flows,
    parse_topology,
    topology_from_json,
    write_flows,
)

from conftest import flow

HEADER = "start_time_us,src,dst,switches,size_bytes,duration_us\n"


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_csv_row_maps_fields(tmp_path):
    path = _write(tmp_path, "f.csv", HEADER + '1700000000000000,10.0.1.1,10.0.2.1,"sw1;sw3",1048576,800\n')
    ds = parse_flows(path)
    (f,) = ds.flows
    assert f.start == 1700000000000000
    assert (f.src, f.dst) == ("10.0.1.1", "10.0.2.1")
    assert f.switches == ("sw1", "sw3")
    assert (f.size, f.duration) == (1048576, 800)
    assert ds.rejects == ()


def test_empty_csv_with_header(tmp_path):
    ds = parse_flows(_write(tmp_path, "f.csv", HEADER))
    assert len(ds) == 0 and ds.rejects == ()
    assert ds.time_window is None


def test_self_flow_rejected(tmp_path):
    text = HEADER + "1,a,b,s,1,1\n2,a,b,s,1,1\n3,c,c,s,1,1\n"
    ds = parse_flows(_write(tmp_path, "f.csv", text))
    assert len(ds) == 2
    assert [r.reason for r in ds.rejects] == ["self-flow"]
    assert ds.rejects[0].line == 4


def test_too_many_rejects_abort(tmp_path):
    text = HEADER + "1,a,a,s,1,1\n2,b,b,s,1,1\n3,a,b,s,1,1\n"
    with pytest.raises(IngestError, match="rejected"):
        parse_flows(_write(tmp_path, "f.csv", text))


def test_header_mismatch(tmp_path):
    with pytest.raises(IngestError, match="header"):
        parse_flows(_write(tmp_path, "f.csv", "t,src,dst\n1,a,b\n"))


def test_jsonl_rejects_and_types(tmp_path):
    rows = [
        {"t": 5, "src": "a", "dst": "b", "sw": ["s1"], "size": 10, "dur": 3},
        {"t": "5", "src": "a", "dst": "b", "sw": ["s1"], "size": 10, "dur": 3},
        {"t": 6, "src": "a", "dst": "b", "sw": ["s1"], "size": 10, "dur": 3},
        {"t": 7, "src": "a", "dst": "b", "sw": ["s1"], "size": 10, "dur": 3},
    ]
    text = "".join(json.dumps(r) + "\n" for r in rows) + "{not json\n"
    ds = parse_flows(_write(tmp_path, "f.jsonl", text))
    assert len(ds) == 3
    assert Counter(r.reason for r in ds.rejects) == {"bad-field": 1, "bad-json": 1}


def test_format_from_extension():
    assert FlowFormat.from_path("x.csv") is FlowFormat.CSV
    assert FlowFormat.from_path("x.jsonl") is FlowFormat.JSONL


def _valid_flows():
    addr = st.sampled_from(["10.0.0.1", "10.0.0.2", "10.0.1.1", "10.0.1.2"])
    pair = st.tuples(addr, addr).filter(lambda p: p[0] != p[1])
    one = st.builds(
        lambda t, p, n, size, dur: flow(t, p[0], p[1], size=size, dur=dur, sw=[f"sw{i}" for i in range(n)]),
        st.integers(0, 10**9),
        pair,
        st.integers(1, 3),
        st.integers(1, 10**9),
        st.integers(1, 10**6),
    )
    return st.lists(one, max_size=30)


@settings(max_examples=50, deadline=None)
@given(_valid_flows(), st.sampled_from(["csv", "jsonl"]))
def test_round_trip(tmp_path_factory, flows, ext):
    path = str(tmp_path_factory.mktemp("rt") / f"flows.{ext}")
    ds = make_dataset(flows)
    write_flows(ds.flows, path)
    back = parse_flows(path)
    assert back.flows == ds.flows
    assert back.rejects == ()


@given(_valid_flows(), st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9))
def test_window_union(flows, a, b, c):
    a, b, c = sorted((a, b, c))
    if not a < b < c:
        return
    ds = make_dataset(flows)
    left, right = filter_window(ds, a, b), filter_window(ds, b, c)
    whole = filter_window(ds, a, c)
    assert Counter(left.flows + right.flows) == Counter(whole.flows)


def test_window_boundaries():
    ds = make_dataset([flow(10, "a", "b"), flow(20, "a", "b"), flow(30, "a", "b")])
    assert filter_window(ds, 0, 100).flows == ds.flows
    assert filter_window(ds, 40, 50).flows == ()
    assert [f.start for f in filter_window(ds, 10, 30).flows] == [10, 20]
    with pytest.raises(ValueError):
        filter_window(ds, 5, 5)


def test_merge_datasets_sorted():
    d1 = make_dataset([flow(30, "a", "b")])
    d2 = make_dataset([flow(10, "a", "b")])
    assert [f.start for f in merge_datasets([d1, d2]).flows] == [10, 30]


def test_topology_parse(tmp_path):
    topo = parse_topology(_write(tmp_path, "t.json", '{"10.0.1.1":"m1","10.0.1.2":"m1"}'))
    assert len(topo) == 2
    assert topo.machines == frozenset({"m1"})
    eight = {f"10.0.{m}.{i}": f"m{m}" for m in (1, 2) for i in range(4)}
    assert len(topology_from_json(json.dumps(eight)).machines) == 2


def test_topology_duplicate_key(tmp_path):
    with pytest.raises(IngestError, match="duplicate"):
        parse_topology(_write(tmp_path, "t.json", '{"a":"m1","a":"m2"}'))


@pytest.mark.parametrize("text", ["[1,2]", '{"a": 3}', '{"a": ""}', "nope"])
def test_topology_schema_errors(text):
    with pytest.raises(IngestError):
        topology_from_json(text)
