"""Encapsulation framing: header layout, session packets, CPF items."""

import random

import pytest

from logixscan import encap
from logixscan.encap import CpfItem, EncapError, EncapsHeader


def decode_header_by_hand(data: bytes) -> dict:
    """Independent decoder: plain byte arithmetic, no struct."""
    u16 = lambda off: data[off] | data[off + 1] << 8
    u32 = lambda off: u16(off) | u16(off + 2) << 16
    return {
        "command": u16(0),
        "payload_length": u16(2),
        "session_handle": u32(4),
        "status": u32(8),
        "sender_context": data[12:20],
        "options": u32(20),
    }


def test_header_layout_against_hand_decoder():
    header = EncapsHeader(
        command=0x006F,
        session_handle=0xDEADBEEF,
        status=0x00000065,
        sender_context=b"ctx-8byt",
        options=0x01020304,
    )
    packet = encap.encode_packet(header, b"\x11\x22\x33")
    assert len(packet) == encap.HEADER_SIZE + 3
    fields = decode_header_by_hand(packet)
    assert fields["command"] == 0x006F
    assert fields["payload_length"] == 3
    assert fields["session_handle"] == 0xDEADBEEF
    assert fields["status"] == 0x65
    assert fields["sender_context"] == b"ctx-8byt"
    assert fields["options"] == 0x01020304


def test_register_session_golden_bytes():
    packet = encap.build_register_session()
    # 24-byte header + 4-byte payload: version 1, options 0
    assert len(packet) == 28
    assert packet[0:2] == b"\x65\x00"
    assert packet[2:4] == b"\x04\x00"
    assert packet[24:28] == b"\x01\x00\x00\x00"


def test_register_reply_roundtrip():
    reply = encap.encode_packet(
        EncapsHeader(encap.CMD_REGISTER_SESSION, session_handle=0x1234),
        b"\x01\x00\x00\x00",
    )
    assert encap.parse_register_reply(reply) == 0x1234


def test_register_reply_rejects_zero_handle_and_bad_status():
    ok_payload = b"\x01\x00\x00\x00"
    zero = encap.encode_packet(EncapsHeader(encap.CMD_REGISTER_SESSION), ok_payload)
    with pytest.raises(EncapError):
        encap.parse_register_reply(zero)
    refused = encap.encode_packet(
        EncapsHeader(encap.CMD_REGISTER_SESSION, session_handle=1, status=0x0002),
        ok_payload,
    )
    with pytest.raises(EncapError) as err:
        encap.parse_register_reply(refused)
    assert "0x0002" in str(err.value)


def test_decode_packet_strictness():
    packet = encap.encode_packet(EncapsHeader(0x006F, session_handle=1), b"abcd")
    with pytest.raises(EncapError):
        encap.decode_packet(packet[:-1])  # payload truncated
    with pytest.raises(EncapError):
        encap.decode_packet(packet + b"\x00")  # trailing bytes
    with pytest.raises(EncapError):
        encap.decode_packet(packet[:10])  # header truncated


def test_payload_too_large_rejected():
    with pytest.raises(EncapError):
        encap.encode_packet(EncapsHeader(0x006F), b"\x00" * 0x10000)


def test_context_must_be_eight_bytes():
    with pytest.raises(EncapError):
        encap.encode_packet(EncapsHeader(0x006F, sender_context=b"short"))


def test_cpf_roundtrip_and_prefix():
    items = [
        CpfItem(encap.ITEM_NULL_ADDRESS),
        CpfItem(encap.ITEM_UNCONNECTED_DATA, b"\x0e\x02\x20\x01\x24\x01"),
    ]
    body = encap.encode_cpf(items)
    # interface handle 0 (4 bytes) + timeout 0 (2) + item count 2 (2)
    assert body[:8] == b"\x00\x00\x00\x00\x00\x00\x02\x00"
    assert encap.decode_cpf(body) == items


def test_cpf_rejects_trailing_bytes():
    body = encap.encode_cpf([CpfItem(encap.ITEM_NULL_ADDRESS)])
    with pytest.raises(EncapError):
        encap.decode_cpf(body + b"\x00")


def test_rr_data_roundtrip():
    cip_bytes = b"\x4c\x03\x91\x04TEST\x01\x00"
    packet = encap.build_rr_data(0x99, cip_bytes, b"AAAABBBB")
    header, payload = encap.decode_packet(packet)
    assert header.command == encap.CMD_SEND_RR_DATA
    assert header.session_handle == 0x99
    assert encap.parse_rr_data(payload) == cip_bytes


def test_rr_data_rejects_wrong_items():
    items = [CpfItem(encap.ITEM_NULL_ADDRESS), CpfItem(encap.ITEM_CONNECTED_DATA, b"x")]
    with pytest.raises(EncapError):
        encap.parse_rr_data(encap.encode_cpf(items))


def test_unit_data_roundtrip_and_sequence_mask():
    packet = encap.build_unit_data(7, 0xABCD1234, 0x1FFFF, b"\x4c\x00", b"\x00" * 8)
    _header, payload = encap.decode_packet(packet)
    conn_id, seq, cip_bytes = encap.parse_unit_data(payload)
    assert conn_id == 0xABCD1234
    assert seq == 0xFFFF  # wrapped to 16 bits
    assert cip_bytes == b"\x4c\x00"


def test_unit_data_rejects_bad_address_item():
    items = [
        CpfItem(encap.ITEM_NULL_ADDRESS),
        CpfItem(encap.ITEM_CONNECTED_DATA, b"\x01\x00x"),
    ]
    with pytest.raises(EncapError):
        encap.parse_unit_data(encap.encode_cpf(items))


def test_fuzz_header_roundtrip():
    rng = random.Random(0xE1B)
    for _ in range(2000):
        header = EncapsHeader(
            command=rng.randrange(0x10000),
            session_handle=rng.randrange(2**32),
            status=rng.randrange(2**32),
            sender_context=bytes(rng.randrange(256) for _ in range(8)),
            options=rng.randrange(2**32),
        )
        payload = bytes(rng.randrange(256) for _ in range(rng.randrange(64)))
        decoded, decoded_payload = encap.decode_packet(encap.encode_packet(header, payload))
        assert decoded_payload == payload
        assert decoded.command == header.command
        assert decoded.session_handle == header.session_handle
        assert decoded.status == header.status
        assert decoded.sender_context == header.sender_context
        assert decoded.options == header.options


def test_fuzz_mutated_packets_never_crash():
    rng = random.Random(0xE1C)
    base = encap.build_rr_data(5, b"\x4c\x03\x91\x04TEST\x01\x00", b"\x00" * 8)
    for _ in range(2000):
        mutated = bytearray(base)
        for _ in range(rng.randrange(1, 6)):
            mutated[rng.randrange(len(mutated))] = rng.randrange(256)
        try:
            header, payload = encap.decode_packet(bytes(mutated))
            encap.parse_rr_data(payload)
        except EncapError:
            pass
