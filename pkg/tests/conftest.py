import pytest

from logixscan.cip import CipType
from logixscan.client import PlcClient, PlcEndpoint
from logixscan.plcsim import FaultPlan, PlcSim, TagStore

# Verdict lines from the acceptance tests; shown after the run so they
# survive output capture.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def make_store(limit: int = 500) -> TagStore:
    store = TagStore(limit=limit)
    store.define("TEST", CipType.REAL, [0.0028152466])
    store.define("counts", CipType.DINT, [10, 20, 30, 40, 50])
    store.define("flag", CipType.BOOL, [True])
    return store


@pytest.fixture
def sim():
    with PlcSim(store=make_store()) as running:
        yield running


@pytest.fixture
def client(sim):
    c = PlcClient(PlcEndpoint("127.0.0.1", port=sim.port, request_timeout=2.0))
    c.connect()
    yield c
    c.close()


def connect_to(sim, **endpoint_kwargs) -> PlcClient:
    kwargs = {"request_timeout": 2.0}
    kwargs.update(endpoint_kwargs)
    c = PlcClient(PlcEndpoint("127.0.0.1", port=sim.port, **kwargs))
    c.connect()
    return c
