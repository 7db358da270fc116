"""TCP session client for one PLC endpoint.

Owns the socket and the encapsulation session, performs single-outstanding
request/reply round trips (unconnected by default, connected after an
explicit open), and implements the disconnect-on-error plus paced-reconnect
policy.  All traffic for one endpoint is expected to flow through one
owning thread; the class itself does no locking.
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import time
from dataclasses import dataclass
from typing import NoReturn

from . import cip, encap
from .cip import CipRequest, CipResponse, CipValue, ConnectionGrant
from .tags import TagRef, parse_tag, to_epath

log = logging.getLogger(__name__)

DEFAULT_BUFFER_LIMIT = 500
MIN_BUFFER_LIMIT = 64
MAX_BUFFER_LIMIT = 511
MAX_SLOT = 16


class PlcError(Exception):
    """Transport, session, or protocol failure talking to the PLC."""


class PlcConnectError(PlcError):
    """Could not establish TCP, register a session, or open a connection."""


class PlcTimeout(PlcError):
    """No reply within request_timeout."""


class PlcProtocolError(PlcError):
    """The peer answered with something the codec rejects."""


class RequestTooLarge(PlcError):
    """Encoded request would exceed the endpoint's buffer limit."""


@dataclass(frozen=True)
class PlcEndpoint:
    host: str
    port: int = encap.DEFAULT_PORT
    slot: int = 0
    buffer_limit: int = DEFAULT_BUFFER_LIMIT
    request_timeout: float = 3.0
    reconnect_period: float = 5.0

    def __post_init__(self):
        if not MIN_BUFFER_LIMIT <= self.buffer_limit <= MAX_BUFFER_LIMIT:
            raise ValueError(
                f"buffer_limit {self.buffer_limit} outside "
                f"[{MIN_BUFFER_LIMIT}, {MAX_BUFFER_LIMIT}]"
            )
        if not 0 <= self.slot <= MAX_SLOT:
            raise ValueError(f"slot {self.slot} outside [0, {MAX_SLOT}]")
        if self.request_timeout <= 0 or self.reconnect_period <= 0:
            raise ValueError("timeouts must be positive")


class Phase(enum.Enum):
    DISCONNECTED = "disconnected"
    REGISTERED = "registered"
    CONNECTED = "connected"


class PlcClient:
    """Session to one PLC.  Not thread-safe; owned by a single worker."""

    def __init__(self, endpoint: PlcEndpoint, prefer_connected: bool = False):
        self.endpoint = endpoint
        self.prefer_connected = prefer_connected
        self.phase = Phase.DISCONNECTED
        self.session_handle = 0
        self.grant: ConnectionGrant | None = None
        self.next_sequence = 1
        self.consecutive_errors = 0
        self.reconnect_attempts = 0
        self.last_transfer_s: float | None = None
        self._sock: socket.socket | None = None
        self._context_counter = 0
        self._last_connect_attempt: float | None = None

    # -- lifecycle ---------------------------------------------------------

    def connect(self) -> None:
        if self.phase is not Phase.DISCONNECTED:
            raise PlcError(f"connect() while {self.phase.value}")
        try:
            sock = socket.create_connection(
                (self.endpoint.host, self.endpoint.port),
                timeout=self.endpoint.request_timeout,
            )
        except OSError as exc:
            raise PlcConnectError(f"{self.endpoint.host}: {exc}") from exc
        sock.settimeout(self.endpoint.request_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        try:
            context = self._next_context()
            header, payload = self._exchange(
                encap.build_register_session(context), context,
                expect=encap.CMD_REGISTER_SESSION,
            )
        except PlcTimeout:
            raise
        except PlcError as exc:
            raise PlcConnectError(f"register failed: {exc}") from exc
        if len(payload) >= 2 and struct.unpack_from("<H", payload)[0] != encap.PROTOCOL_VERSION:
            self._drop_socket()
            raise PlcConnectError("protocol version mismatch in register reply")
        if header.session_handle == 0:
            self._drop_socket()
            raise PlcConnectError("server assigned session handle 0")
        self.session_handle = header.session_handle
        self.phase = Phase.REGISTERED
        self.next_sequence = 1
        self.grant = None
        log.debug("registered session 0x%08X with %s", self.session_handle, self.endpoint.host)

    def disconnect(self) -> None:
        """Drop the session without waiting for the peer."""
        if self._sock is not None and self.phase is not Phase.DISCONNECTED:
            try:
                self._sock.sendall(encap.build_unregister_session(self.session_handle))
            except OSError:
                pass
        self._drop_socket()

    close = disconnect

    def _drop_socket(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self.phase = Phase.DISCONNECTED
        self.session_handle = 0
        self.grant = None

    def ensure_connected(self, now: float | None = None) -> bool:
        """Reconnect when down, at most once per reconnect_period."""
        if self.phase is not Phase.DISCONNECTED:
            return True
        if now is None:
            now = time.monotonic()
        if (
            self._last_connect_attempt is not None
            and now - self._last_connect_attempt < self.endpoint.reconnect_period
        ):
            return False
        self._last_connect_attempt = now
        self.reconnect_attempts += 1
        try:
            self.connect()
            if self.prefer_connected:
                self.open_connection()
        except PlcError as exc:
            log.debug("reconnect attempt %d failed: %s", self.reconnect_attempts, exc)
            self._drop_socket()
            return False
        self.consecutive_errors = 0
        return True

    # -- round trips -------------------------------------------------------

    def round_trip_unconnected(self, inner: CipRequest) -> CipResponse:
        """Send one routed request, return the unwrapped inner reply."""
        self._require_session()
        wrapped = cip.wrap_unconnected_send(inner, self.endpoint.slot)
        wire = cip.encode_request(wrapped)
        if len(wire) > self.endpoint.buffer_limit:
            raise RequestTooLarge(
                f"request of {len(wire)} bytes exceeds limit {self.endpoint.buffer_limit}"
            )
        context = self._next_context()
        packet = encap.build_rr_data(self.session_handle, wire, context)
        started = time.monotonic()
        header, payload = self._exchange(packet, context, expect=encap.CMD_SEND_RR_DATA)
        self.last_transfer_s = time.monotonic() - started
        try:
            reply_bytes = encap.parse_rr_data(payload)
            resp = cip.decode_response(reply_bytes)
        except (encap.EncapError, cip.CipError) as exc:
            self._fail(f"malformed reply: {exc}")
        self.consecutive_errors = 0
        return resp

    def open_connection(self) -> ConnectionGrant:
        self._require_session()
        params = cip.ForwardOpenParams(
            slot=self.endpoint.slot,
            t_to_o_id=(self.session_handle ^ 0x5A5A0000) & 0xFFFFFFFF or 1,
            serial=(self.session_handle + self._context_counter) & 0xFFFF or 1,
        )
        request = cip.build_forward_open(params)
        context = self._next_context()
        packet = encap.build_rr_data(self.session_handle, cip.encode_request(request), context)
        header, payload = self._exchange(packet, context, expect=encap.CMD_SEND_RR_DATA)
        try:
            resp = cip.decode_response(encap.parse_rr_data(payload))
            grant = cip.parse_forward_open_reply(resp)
        except cip.CipStatusError as exc:
            raise PlcConnectError(f"connection refused: {exc}") from exc
        except (encap.EncapError, cip.CipError) as exc:
            self._fail(f"malformed Forward_Open reply: {exc}")
        self.grant = grant
        self.next_sequence = 1
        self.phase = Phase.CONNECTED
        return grant

    def round_trip_connected(self, inner: CipRequest) -> CipResponse:
        """Send one bare request over the open connection."""
        if self.phase is not Phase.CONNECTED or self.grant is None:
            raise PlcError("no open connection")
        wire = cip.encode_request(inner)
        if len(wire) > self.endpoint.buffer_limit:
            raise RequestTooLarge(
                f"request of {len(wire)} bytes exceeds limit {self.endpoint.buffer_limit}"
            )
        sequence = self.next_sequence
        self.next_sequence = (self.next_sequence + 1) & 0xFFFF
        context = self._next_context()
        packet = encap.build_unit_data(
            self.session_handle, self.grant.o_to_t_id, sequence, wire, context
        )
        started = time.monotonic()
        header, payload = self._exchange(packet, context, expect=encap.CMD_SEND_UNIT_DATA)
        self.last_transfer_s = time.monotonic() - started
        try:
            conn_id, seq, reply_bytes = encap.parse_unit_data(payload)
            resp = cip.decode_response(reply_bytes)
        except (encap.EncapError, cip.CipError) as exc:
            self._fail(f"malformed connected reply: {exc}")
        if conn_id != self.grant.t_to_o_id:
            self._fail(f"reply on unknown connection 0x{conn_id:08X}")
        if seq != sequence:
            self._fail(f"sequence mismatch: sent {sequence}, got {seq}")
        self.consecutive_errors = 0
        return resp

    def round_trip(self, inner: CipRequest) -> CipResponse:
        """Connected when preferred and open, otherwise unconnected."""
        if self.prefer_connected:
            if self.phase is Phase.REGISTERED:
                self.open_connection()
            return self.round_trip_connected(inner)
        return self.round_trip_unconnected(inner)

    # -- tag conveniences ---------------------------------------------------

    def read_tag(self, ref: TagRef | str, count: int = 1) -> CipValue:
        if isinstance(ref, str):
            ref = parse_tag(ref)
        resp = self.round_trip(cip.build_read_request(to_epath(ref), count))
        return cip.parse_read_response(resp)

    def write_tag(self, ref: TagRef | str, value: CipValue) -> None:
        if isinstance(ref, str):
            ref = parse_tag(ref)
        resp = self.round_trip(cip.build_write_request(to_epath(ref), value))
        cip.parse_write_response(resp)

    def read_identity_name(self) -> str:
        request = cip.build_get_attribute_single(
            cip.CLASS_IDENTITY, 1, cip.ATTR_PRODUCT_NAME
        )
        return cip.parse_short_string(self.round_trip_unconnected(request))

    # -- plumbing ------------------------------------------------------------

    def _require_session(self) -> None:
        if self.phase is Phase.DISCONNECTED or self._sock is None:
            raise PlcError("not connected")

    def _next_context(self) -> bytes:
        self._context_counter += 1
        return struct.pack("<Q", self._context_counter)

    def _fail(self, message: str) -> NoReturn:
        self._drop_socket()
        self.consecutive_errors += 1
        raise PlcProtocolError(message)

    def _exchange(self, packet: bytes, context: bytes, expect: int | None = None):
        """One request/reply exchange; any transport fault tears the session down."""
        sock = self._sock
        if sock is None:
            raise PlcError("not connected")
        try:
            sock.sendall(packet)
            raw = self._recv_exact(sock, encap.HEADER_SIZE)
            header = encap.decode_header(raw)
            payload = self._recv_exact(sock, header.payload_length)
        except socket.timeout:
            self._drop_socket()
            self.consecutive_errors += 1
            raise PlcTimeout(
                f"no reply within {self.endpoint.request_timeout} s"
            ) from None
        except OSError as exc:
            self._drop_socket()
            self.consecutive_errors += 1
            raise PlcError(f"transport error: {exc}") from exc
        except encap.EncapError as exc:
            self._drop_socket()
            self.consecutive_errors += 1
            raise PlcProtocolError(f"bad frame: {exc}") from exc
        if header.status != encap.STATUS_OK:
            self._drop_socket()
            self.consecutive_errors += 1
            raise PlcProtocolError(f"encapsulation status 0x{header.status:08X}")
        if expect is not None and header.command != expect:
            self._drop_socket()
            self.consecutive_errors += 1
            raise PlcProtocolError(
                f"expected command 0x{expect:04X}, got 0x{header.command:04X}"
            )
        if header.sender_context != context:
            log.warning(
                "sender context mismatch: sent %s, got %s",
                context.hex(), header.sender_context.hex(),
            )
        return header, payload

    @staticmethod
    def _recv_exact(sock: socket.socket, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise OSError("connection closed by peer")
            buf += chunk
        return bytes(buf)
