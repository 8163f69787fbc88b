import pytest

from flowscope.core import FlowRecord, Topology


def flow(start, src, dst, size=1024, dur=10, sw=("sw0",)):
    return FlowRecord(start, src, dst, tuple(sw), size, dur)


@pytest.fixture
def two_machine_topo():
    m = {f"10.0.1.{i}": "m1" for i in range(1, 5)}
    m.update({f"10.0.2.{i}": "m2" for i in range(1, 5)})
    return Topology(m)
