"""Record model and binary codec shared by every component.

Wire format (also the on-disk segment format): each log line is framed as a
fixed 64-byte header followed by the raw payload bytes, back to back.

Header layout, all integers little-endian:

    offset  size  field
    0       4     magic        b"LGS1"
    4       2     version      1
    6       2     flags        bit 0 = replayed-from-storage
    8       8     ingest_ts_ns nanoseconds since epoch, stamped at ingest
    16      4     type_id      log type (0 = unclassified)
    20      4     source_id    stable hash of (source addr, source port)
    24      4     payload_len  byte length of the payload that follows
    28      8     seq_no       per-feeder monotonically increasing counter
    36      16    source_addr  IPv6 (IPv4 as IPv4-mapped-IPv6)
    52      2     source_port
    54      10    reserved     must be zero

The stream is self-framing: payload_len alone is enough to re-split any
concatenation of framed records.
"""

from __future__ import annotations

import ipaddress
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional

MAGIC = b"LGS1"
VERSION = 1
HEADER_SIZE = 64
FLAG_REPLAYED = 0x0001

_HEADER = struct.Struct("<4sHHQIIIQ16sH10s")
assert _HEADER.size == HEADER_SIZE

# offsets used by hot paths that patch or peek single fields
OFF_FLAGS = 6
OFF_TS = 8
OFF_TYPE = 16
OFF_LEN = 24
OFF_SEQ = 28
_TS_TYPE_SRC_LEN = struct.Struct("<QIII")  # ingest_ts_ns, type_id, source_id, payload_len at offset 8


class CodecError(ValueError):
    """Base class for header decode failures."""


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class NonzeroReserved(CodecError):
    pass


class TruncatedRecord(CodecError):
    """A framed stream ended mid-header or mid-payload."""


@dataclass(frozen=True)
class RecordHeader:
    ingest_ts_ns: int
    type_id: int
    source_id: int
    payload_len: int
    seq_no: int
    source_addr: bytes = bytes(16)
    source_port: int = 0
    flags: int = 0
    version: int = VERSION

    def encode(self) -> bytes:
        return encode_header(self)


@dataclass(frozen=True)
class LogRecord:
    header: RecordHeader
    payload: bytes

    def __post_init__(self):
        if b"\n" in self.payload:
            raise ValueError("payload must not contain a newline byte")
        if self.header.payload_len != len(self.payload):
            raise ValueError("header payload_len does not match payload")

    def encode(self) -> bytes:
        return self.header.encode() + self.payload


@dataclass(frozen=True)
class Interval:
    """Closed time interval in nanoseconds since epoch."""

    from_ts_ns: int
    to_ts_ns: int

    def __post_init__(self):
        if self.from_ts_ns > self.to_ts_ns:
            raise ValueError(f"interval start {self.from_ts_ns} > end {self.to_ts_ns}")

    def contains(self, ts_ns: int) -> bool:
        return self.from_ts_ns <= ts_ns <= self.to_ts_ns

    def overlaps(self, min_ts_ns: int, max_ts_ns: int) -> bool:
        return min_ts_ns <= self.to_ts_ns and max_ts_ns >= self.from_ts_ns


def encode_header(h: RecordHeader) -> bytes:
    """Encode a header to its exact 64-byte representation."""
    return _HEADER.pack(
        MAGIC,
        h.version,
        h.flags,
        h.ingest_ts_ns,
        h.type_id,
        h.source_id,
        h.payload_len,
        h.seq_no,
        h.source_addr,
        h.source_port,
        b"",
    )


def decode_header(b: bytes) -> RecordHeader:
    """Decode 64 header bytes, validating magic, version and reserved padding."""
    if len(b) < HEADER_SIZE:
        raise TruncatedRecord(f"need {HEADER_SIZE} header bytes, got {len(b)}")
    magic, version, flags, ts, type_id, source_id, payload_len, seq_no, addr, port, reserved = _HEADER.unpack_from(b)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported header version {version}")
    if reserved != bytes(10):
        raise NonzeroReserved("reserved header bytes are not zero")
    return RecordHeader(
        ingest_ts_ns=ts,
        type_id=type_id,
        source_id=source_id,
        payload_len=payload_len,
        seq_no=seq_no,
        source_addr=addr,
        source_port=port,
        flags=flags,
        version=version,
    )


def iter_frames(buf, *, offset: int = 0) -> Iterator[tuple[RecordHeader, bytes]]:
    """Split a concatenation of framed records into (header, payload) pairs.

    Raises TruncatedRecord if the buffer ends mid-frame.
    """
    view = memoryview(buf)
    end = len(view)
    pos = offset
    while pos < end:
        if end - pos < HEADER_SIZE:
            raise TruncatedRecord(f"{end - pos} trailing bytes at offset {pos}")
        header = decode_header(bytes(view[pos:pos + HEADER_SIZE]))
        plen = header.payload_len
        if end - pos - HEADER_SIZE < plen:
            raise TruncatedRecord(f"payload truncated at offset {pos}")
        yield header, bytes(view[pos + HEADER_SIZE:pos + HEADER_SIZE + plen])
        pos += HEADER_SIZE + plen


def frame_boundaries(buf, *, offset: int = 0) -> tuple[list[int], int]:
    """Return start offsets of whole frames in buf plus the end of the last whole frame.

    Cheap scan used by storage paths: only payload_len is read, no validation.
    """
    view = memoryview(buf)
    end = len(view)
    pos = offset
    starts = []
    while end - pos >= HEADER_SIZE:
        plen = int.from_bytes(view[pos + OFF_LEN:pos + OFF_LEN + 4], "little")
        if end - pos - HEADER_SIZE < plen:
            break
        starts.append(pos)
        pos += HEADER_SIZE + plen
    return starts, pos


def source_id_of(addr16: bytes, port: int) -> int:
    """Stable 32-bit identifier for a (source address, source port) pair."""
    return zlib.crc32(addr16 + port.to_bytes(2, "little")) & 0xFFFFFFFF


def pack_addr(host: str) -> bytes:
    """Normalize a textual IP to the 16-byte form stored in headers."""
    ip = ipaddress.ip_address(host)
    if ip.version == 4:
        return b"\x00" * 10 + b"\xff\xff" + ip.packed
    return ip.packed


def unpack_addr(addr16: bytes) -> str:
    ip = ipaddress.IPv6Address(addr16)
    v4 = ip.ipv4_mapped
    return str(v4) if v4 is not None else str(ip)


@dataclass(frozen=True)
class TypeRule:
    """One classification rule: match a listener port or a payload prefix."""

    type_id: int
    type_name: str
    port: Optional[int] = None
    prefix: Optional[bytes] = None

    def __post_init__(self):
        if (self.port is None) == (self.prefix is None):
            raise ValueError("rule must match on exactly one of port or prefix")
        if self.type_id == 0:
            raise ValueError("type_id 0 is reserved for unclassified records")


UNCLASSIFIED = 0


class TypeRegistry:
    """Ordered first-match-wins registry of log type rules.

    type_id 0 is reserved and means "unclassified" (no rule matched). When all
    rules are port rules, classification collapses to a dict lookup, which the
    feeder relies on to classify a whole datagram at once.
    """

    def __init__(self, rules: list[TypeRule]):
        ids = [r.type_id for r in rules]
        names = [r.type_name for r in rules]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate type_id in registry")
        if len(set(names)) != len(names):
            raise ValueError("duplicate type_name in registry")
        self.rules = list(rules)
        self._by_name = {r.type_name: r.type_id for r in rules}
        self._port_only = all(r.port is not None for r in rules)
        self._port_map = {}
        for r in rules:
            if r.port is not None and r.port not in self._port_map:
                self._port_map[r.port] = r.type_id

    @classmethod
    def from_config(cls, entries: list[dict]) -> "TypeRegistry":
        rules = []
        for e in entries:
            match = e.get("match", {})
            prefix = match.get("prefix")
            rules.append(TypeRule(
                type_id=int(e["id"]),
                type_name=e["name"],
                port=match.get("port"),
                prefix=prefix.encode() if isinstance(prefix, str) else prefix,
            ))
        return cls(rules)

    @property
    def port_only(self) -> bool:
        return self._port_only

    def classify(self, listener_port: int, payload: bytes) -> int:
        """First matching rule's type_id, 0 when nothing matches."""
        for r in self.rules:
            if r.port is not None:
                if r.port == listener_port:
                    return r.type_id
            elif payload.startswith(r.prefix):
                return r.type_id
        return UNCLASSIFIED

    def classify_port(self, listener_port: int) -> int:
        """Port-only fast path; valid when port_only is true."""
        return self._port_map.get(listener_port, UNCLASSIFIED)

    def id_of(self, type_name: str) -> Optional[int]:
        if type_name == "*":
            return UNCLASSIFIED  # wildcard sentinel in queries
        return self._by_name.get(type_name)

    def name_of(self, type_id: int) -> str:
        for r in self.rules:
            if r.type_id == type_id:
                return r.type_name
        return "unclassified" if type_id == UNCLASSIFIED else f"type_{type_id}"


def classify_type(registry: TypeRegistry, listener_port: int, payload: bytes) -> int:
    return registry.classify(listener_port, payload)
