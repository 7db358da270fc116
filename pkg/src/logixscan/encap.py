"""EtherNet/IP encapsulation layer.

The 24-byte encapsulation header frames everything on the TCP stream;
session registration and the Common Packet Format (CPF) carriers for
unconnected (SendRRData) and connected (SendUnitData) CIP payloads live
here.  All functions are pure byte-sequence transforms; every multi-byte
integer on the wire is little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

DEFAULT_PORT = 0xAF12  # 44818

HEADER_SIZE = 24
MAX_PAYLOAD = 0xFFFF

CMD_REGISTER_SESSION = 0x0065
CMD_UNREGISTER_SESSION = 0x0066
CMD_SEND_RR_DATA = 0x006F
CMD_SEND_UNIT_DATA = 0x0070

ITEM_NULL_ADDRESS = 0x0000
ITEM_CONNECTED_ADDRESS = 0x00A1
ITEM_CONNECTED_DATA = 0x00B1
ITEM_UNCONNECTED_DATA = 0x00B2

PROTOCOL_VERSION = 1

# encapsulation status codes we emit or expect
STATUS_OK = 0x0000
STATUS_INVALID_COMMAND = 0x0001
STATUS_NO_RESOURCES = 0x0002
STATUS_INVALID_SESSION = 0x0064
STATUS_INVALID_LENGTH = 0x0065
STATUS_UNSUPPORTED_VERSION = 0x0069

_HEADER = struct.Struct("<HHII8sI")
_CPF_PREFIX = struct.Struct("<IHH")  # interface handle, timeout, item count
_ITEM_HEADER = struct.Struct("<HH")

ZERO_CONTEXT = b"\x00" * 8


class EncapError(Exception):
    """Malformed or unexpected encapsulation traffic."""

    def __init__(self, message: str, status: int = 0):
        super().__init__(message)
        self.status = status


@dataclass
class EncapsHeader:
    """The fixed 24-byte frame header."""

    command: int
    payload_length: int = 0
    session_handle: int = 0
    status: int = 0
    sender_context: bytes = ZERO_CONTEXT
    options: int = 0


@dataclass
class CpfItem:
    item_type: int
    data: bytes = b""


def encode_packet(header: EncapsHeader, payload: bytes = b"") -> bytes:
    """Frame a payload; the header's payload_length is rewritten to match."""
    if len(payload) > MAX_PAYLOAD:
        raise EncapError(f"payload of {len(payload)} bytes exceeds 16-bit length field")
    if len(header.sender_context) != 8:
        raise EncapError("sender_context must be exactly 8 bytes")
    return _HEADER.pack(
        header.command,
        len(payload),
        header.session_handle,
        header.status,
        header.sender_context,
        header.options,
    ) + payload


def decode_header(data: bytes) -> EncapsHeader:
    """Parse a bare 24-byte header (payload read separately by the caller)."""
    if len(data) < HEADER_SIZE:
        raise EncapError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
    command, length, session, status, context, options = _HEADER.unpack_from(data)
    return EncapsHeader(command, length, session, status, context, options)


def decode_packet(data: bytes) -> tuple[EncapsHeader, bytes]:
    """Split one framed packet into (header, payload).

    Strict: the buffer must contain exactly the declared payload, no more.
    """
    if len(data) < HEADER_SIZE:
        raise EncapError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
    command, length, session, status, context, options = _HEADER.unpack_from(data)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise EncapError(f"payload truncated: have {len(data) - HEADER_SIZE}, declared {length}")
    if len(data) > end:
        raise EncapError(f"{len(data) - end} trailing bytes after declared payload")
    header = EncapsHeader(command, length, session, status, context, options)
    return header, data[HEADER_SIZE:end]


def build_register_session(sender_context: bytes = ZERO_CONTEXT) -> bytes:
    """RegisterSession request: protocol version 1, options 0."""
    payload = struct.pack("<HH", PROTOCOL_VERSION, 0)
    return encode_packet(EncapsHeader(CMD_REGISTER_SESSION, sender_context=sender_context), payload)


def parse_register_reply(data: bytes) -> int:
    """Return the server-assigned session handle from a RegisterSession reply."""
    header, payload = decode_packet(data)
    if header.command != CMD_REGISTER_SESSION:
        raise EncapError(f"expected RegisterSession reply, got command 0x{header.command:04X}")
    if header.status != 0:
        raise EncapError(f"session refused with status 0x{header.status:04X}", header.status)
    if len(payload) >= 2:
        (version,) = struct.unpack_from("<H", payload)
        if version != PROTOCOL_VERSION:
            raise EncapError(f"protocol version mismatch: {version}")
    if header.session_handle == 0:
        raise EncapError("server assigned session handle 0")
    return header.session_handle


def build_unregister_session(session_handle: int) -> bytes:
    return encode_packet(EncapsHeader(CMD_UNREGISTER_SESSION, session_handle=session_handle))


def encode_cpf(items: list[CpfItem]) -> bytes:
    """Interface handle 0 + timeout 0 + item table."""
    out = bytearray(_CPF_PREFIX.pack(0, 0, len(items)))
    for item in items:
        out += _ITEM_HEADER.pack(item.item_type, len(item.data))
        out += item.data
    return bytes(out)


def decode_cpf(data: bytes) -> list[CpfItem]:
    if len(data) < _CPF_PREFIX.size:
        raise EncapError("CPF prefix truncated")
    _handle, _timeout, count = _CPF_PREFIX.unpack_from(data)
    offset = _CPF_PREFIX.size
    items: list[CpfItem] = []
    for _ in range(count):
        if len(data) < offset + _ITEM_HEADER.size:
            raise EncapError(f"CPF truncated: {len(items)} of {count} items")
        item_type, length = _ITEM_HEADER.unpack_from(data, offset)
        offset += _ITEM_HEADER.size
        if len(data) < offset + length:
            raise EncapError("CPF item data truncated")
        items.append(CpfItem(item_type, data[offset:offset + length]))
        offset += length
    if offset != len(data):
        raise EncapError(f"{len(data) - offset} trailing bytes after CPF items")
    return items


def build_rr_data(
    session_handle: int,
    cip: bytes,
    sender_context: bytes = ZERO_CONTEXT,
    status: int = 0,
) -> bytes:
    """SendRRData packet carrying an unconnected CIP message."""
    payload = encode_cpf([
        CpfItem(ITEM_NULL_ADDRESS),
        CpfItem(ITEM_UNCONNECTED_DATA, cip),
    ])
    header = EncapsHeader(
        CMD_SEND_RR_DATA,
        session_handle=session_handle,
        status=status,
        sender_context=sender_context,
    )
    return encode_packet(header, payload)


def parse_rr_data(payload: bytes) -> bytes:
    """Extract the CIP bytes from a SendRRData payload."""
    items = decode_cpf(payload)
    if len(items) != 2:
        raise EncapError(f"unconnected carrier needs 2 CPF items, got {len(items)}")
    if items[0].item_type != ITEM_NULL_ADDRESS or items[1].item_type != ITEM_UNCONNECTED_DATA:
        raise EncapError(
            "unconnected carrier item types 0x%04X/0x%04X"
            % (items[0].item_type, items[1].item_type)
        )
    return items[1].data


def build_unit_data(
    session_handle: int,
    connection_id: int,
    sequence: int,
    cip: bytes,
    sender_context: bytes = ZERO_CONTEXT,
) -> bytes:
    """SendUnitData packet: connected carrier with a 16-bit sequence prefix."""
    payload = encode_cpf([
        CpfItem(ITEM_CONNECTED_ADDRESS, struct.pack("<I", connection_id)),
        CpfItem(ITEM_CONNECTED_DATA, struct.pack("<H", sequence & 0xFFFF) + cip),
    ])
    header = EncapsHeader(
        CMD_SEND_UNIT_DATA,
        session_handle=session_handle,
        sender_context=sender_context,
    )
    return encode_packet(header, payload)


def parse_unit_data(payload: bytes) -> tuple[int, int, bytes]:
    """Return (connection_id, sequence, cip bytes) from a SendUnitData payload."""
    items = decode_cpf(payload)
    if len(items) != 2:
        raise EncapError(f"connected carrier needs 2 CPF items, got {len(items)}")
    addr, data = items
    if addr.item_type != ITEM_CONNECTED_ADDRESS or data.item_type != ITEM_CONNECTED_DATA:
        raise EncapError(
            "connected carrier item types 0x%04X/0x%04X" % (addr.item_type, data.item_type)
        )
    if len(addr.data) != 4:
        raise EncapError("connected address item must carry a 32-bit connection id")
    if len(data.data) < 2:
        raise EncapError("connected data item missing sequence prefix")
    (connection_id,) = struct.unpack("<I", addr.data)
    (sequence,) = struct.unpack_from("<H", data.data)
    return connection_id, sequence, data.data[2:]
