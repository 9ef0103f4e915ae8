"""Control-channel and ack framing shared by feeder, dbnode and controller.

Control channel (controller <-> dbnode): length-prefixed messages, each a
1-byte kind tag plus body.  Kind J carries a UTF-8 JSON object; kind R carries
a batch of framed records (the core record format, back to back).

Ack stream (dbnode/sink -> feeder): unframed sequence of little-endian u64
values, each the cumulative count of stream bytes the receiver has consumed.
"""

from __future__ import annotations

import json
import socket
import struct

MSG_JSON = 0x4A  # "J"
MSG_RECORDS = 0x52  # "R"

_LEN = struct.Struct("<I")
ACK = struct.Struct("<Q")
MAX_MSG = 64 << 20


class ProtocolError(ConnectionError):
    pass


def read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        d = sock.recv(n - got)
        if not d:
            raise ConnectionError("peer closed mid-message")
        chunks.append(d)
        got += len(d)
    return b"".join(chunks) if len(chunks) != 1 else chunks[0]


def send_json(sock: socket.socket, obj: dict) -> None:
    body = json.dumps(obj, separators=(",", ":")).encode()
    sock.sendall(_LEN.pack(len(body) + 1) + bytes((MSG_JSON,)) + body)


def send_records(sock: socket.socket, framed: bytes) -> None:
    sock.sendall(_LEN.pack(len(framed) + 1) + bytes((MSG_RECORDS,)) + framed)


def recv_message(sock: socket.socket) -> tuple[int, bytes]:
    """Return (kind, body). Raises ConnectionError on EOF or oversize."""
    raw = read_exact(sock, 4)
    (n,) = _LEN.unpack(raw)
    if n < 1 or n > MAX_MSG:
        raise ProtocolError(f"bad message length {n}")
    body = read_exact(sock, n)
    return body[0], body[1:]


def recv_json(sock: socket.socket) -> dict:
    kind, body = recv_message(sock)
    if kind != MSG_JSON:
        raise ProtocolError(f"expected JSON message, got kind {kind:#x}")
    return json.loads(body.decode())
