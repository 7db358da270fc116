"""Session client: lifecycle, round trips, error policy, paced reconnect."""

import socket
import threading
import time

import pytest

from logixscan import cip
from logixscan.cip import CipType, CipValue
from logixscan.client import (
    Phase,
    PlcClient,
    PlcConnectError,
    PlcEndpoint,
    PlcError,
    PlcTimeout,
    RequestTooLarge,
)
from logixscan.plcsim import FaultPlan, PlcSim, TagStore

from conftest import connect_to, make_store


def test_endpoint_validation():
    PlcEndpoint("h", buffer_limit=64)
    PlcEndpoint("h", buffer_limit=511)
    with pytest.raises(ValueError):
        PlcEndpoint("h", buffer_limit=63)
    with pytest.raises(ValueError):
        PlcEndpoint("h", buffer_limit=512)
    with pytest.raises(ValueError):
        PlcEndpoint("h", slot=17)
    with pytest.raises(ValueError):
        PlcEndpoint("h", request_timeout=0)


def test_connect_registers_session(client):
    assert client.phase is Phase.REGISTERED
    assert client.session_handle != 0


def test_connect_twice_rejected(client):
    with pytest.raises(PlcError):
        client.connect()


def test_connect_refused_port():
    # grab a port and close it so nothing listens there
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    c = PlcClient(PlcEndpoint("127.0.0.1", port=port, request_timeout=0.5))
    with pytest.raises(PlcConnectError):
        c.connect()
    assert c.phase is Phase.DISCONNECTED


def test_register_refused_by_fault_plan():
    with PlcSim(make_store(), FaultPlan(refuse_sessions=True)) as sim:
        c = PlcClient(PlcEndpoint("127.0.0.1", port=sim.port, request_timeout=1.0))
        with pytest.raises(PlcConnectError):
            c.connect()
        assert c.phase is Phase.DISCONNECTED


def test_read_tag(client):
    value = client.read_tag("TEST")
    assert value.type is CipType.REAL
    assert value.scalar == pytest.approx(0.00281524658203125, abs=1e-12)


def test_read_tag_slice(client):
    value = client.read_tag("counts[1]", count=3)
    assert value.elements == (20, 30, 40)


def test_write_tag(client):
    client.write_tag("counts[0]", CipValue(CipType.DINT, (-1,)))
    assert client.read_tag("counts[0]").scalar == -1


def test_cip_status_error_does_not_disconnect(client):
    with pytest.raises(cip.CipStatusError) as info:
        client.read_tag("missing")
    assert info.value.general == cip.STATUS_PATH_UNKNOWN
    # application-level errors keep the session; only transport faults drop it
    assert client.phase is Phase.REGISTERED
    assert client.read_tag("TEST").type is CipType.REAL


def test_identity_name(client):
    assert client.read_identity_name() == "1756-ENET/A "


def test_request_too_large_guard(client):
    big = cip.build_write_request(
        cip.Epath((cip.Symbol("counts"),)), CipValue(CipType.DINT, tuple(range(130)))
    )
    with pytest.raises(RequestTooLarge):
        client.round_trip_unconnected(big)
    assert client.phase is Phase.REGISTERED  # guard fires before anything is sent


def test_timeout_disconnects(sim):
    sim.faults.latency_s = 1.0
    c = connect_to(sim, request_timeout=0.2)
    with pytest.raises(PlcTimeout):
        c.read_tag("TEST")
    assert c.phase is Phase.DISCONNECTED
    assert c.consecutive_errors == 1
    sim.faults.latency_s = 0.0
    c.close()


def test_peer_close_disconnects():
    with PlcSim(make_store(), FaultPlan(drop_after=1)) as sim:
        c = connect_to(sim)
        with pytest.raises(PlcError):
            c.read_tag("TEST")
        assert c.phase is Phase.DISCONNECTED
        c.close()


def test_ensure_connected_pacing():
    # endpoint that can never connect: pacing must hold attempts to one per period
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    c = PlcClient(PlcEndpoint(
        "127.0.0.1", port=port, request_timeout=0.2, reconnect_period=5.0
    ))
    assert c.ensure_connected(now=100.0) is False
    assert c.reconnect_attempts == 1
    for now in (100.1, 101.0, 104.9):
        assert c.ensure_connected(now=now) is False
    assert c.reconnect_attempts == 1  # still inside the pacing window
    assert c.ensure_connected(now=105.0) is False
    assert c.reconnect_attempts == 2


def test_ensure_connected_noop_when_up(client):
    attempts = client.reconnect_attempts
    assert client.ensure_connected() is True
    assert client.reconnect_attempts == attempts


def test_reconnect_gets_fresh_session(sim):
    c = connect_to(sim, reconnect_period=0.05)
    first = c.session_handle
    c.disconnect()
    assert c.phase is Phase.DISCONNECTED
    time.sleep(0.06)
    assert c.ensure_connected() is True
    assert c.phase is Phase.REGISTERED
    assert c.session_handle != first
    c.close()


def test_open_connection_and_connected_round_trips(sim):
    c = connect_to(sim)
    grant = c.open_connection()
    assert c.phase is Phase.CONNECTED
    assert grant.o_to_t_id != 0

    value = c.read_tag("counts", count=5)
    # read_tag goes unconnected unless prefer_connected is set
    assert value.elements == (10, 20, 30, 40, 50)

    resp = c.round_trip_connected(cip.build_read_request(
        cip.Epath((cip.Symbol("TEST"),)), 1
    ))
    assert cip.parse_read_response(resp).type is CipType.REAL
    assert c.next_sequence == 2
    c.round_trip_connected(cip.build_read_request(cip.Epath((cip.Symbol("TEST"),)), 1))
    assert c.next_sequence == 3
    c.close()


def test_prefer_connected_path(sim):
    c = PlcClient(
        PlcEndpoint("127.0.0.1", port=sim.port, request_timeout=2.0),
        prefer_connected=True,
    )
    c.connect()
    assert c.read_tag("TEST").type is CipType.REAL  # opens on first use
    assert c.phase is Phase.CONNECTED
    assert c.next_sequence == 2
    c.close()


def test_sequence_number_wraps(sim):
    c = connect_to(sim)
    c.open_connection()
    c.next_sequence = 0xFFFF
    c.round_trip_connected(cip.build_read_request(cip.Epath((cip.Symbol("TEST"),)), 1))
    assert c.next_sequence == 0
    c.close()


def test_round_trip_measures_latency():
    with PlcSim(make_store(), FaultPlan(latency_s=0.05)) as sim:
        c = connect_to(sim)
        c.read_tag("TEST")
        assert c.last_transfer_s is not None
        assert c.last_transfer_s >= 0.05
        c.close()


def test_recovery_after_sim_restart():
    sim = PlcSim(make_store())
    sim.start()
    port = sim.port
    c = connect_to(sim, reconnect_period=0.1)
    assert c.read_tag("TEST").type is CipType.REAL
    sim.stop()

    with pytest.raises(PlcError):
        c.read_tag("TEST")
    assert c.phase is Phase.DISCONNECTED

    sim2 = PlcSim(make_store(), port=port)
    sim2.start()
    try:
        deadline = time.monotonic() + 2.0
        while not c.ensure_connected():
            assert time.monotonic() < deadline, "did not reconnect in time"
            time.sleep(0.02)
        assert c.read_tag("TEST").type is CipType.REAL
        c.close()
    finally:
        sim2.stop()
