import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logcentral import records
from logcentral.records import (
    BadMagic,
    HEADER_SIZE,
    Interval,
    LogRecord,
    NonzeroReserved,
    RecordHeader,
    TruncatedRecord,
    TypeRegistry,
    TypeRule,
    UnsupportedVersion,
    classify_type,
    decode_header,
    encode_header,
    iter_frames,
)

# Produced by an independent one-off encoder (field-by-field int.to_bytes
# assembly, no struct) for header {ts=1, type=2, len=3, seq=4, rest zero}.
GOLDEN_HEX = (
    "4c4753310100000001000000000000000200000000000000030000000400000000000000"
    "00000000000000000000000000000000000000000000000000000000"
)


def test_zero_case_layout():
    h = RecordHeader(ingest_ts_ns=0, type_id=0, source_id=0, payload_len=0, seq_no=0)
    b = encode_header(h)
    assert b == b"LGS1" + b"\x01\x00" + bytes(58)


def test_golden_vector():
    h = RecordHeader(ingest_ts_ns=1, type_id=2, source_id=0, payload_len=3, seq_no=4)
    assert encode_header(h).hex() == GOLDEN_HEX


def test_encode_is_64_bytes():
    h = RecordHeader(ingest_ts_ns=2**63, type_id=2**32 - 1, source_id=1, payload_len=9, seq_no=2**64 - 1)
    assert len(encode_header(h)) == HEADER_SIZE


header_strategy = st.builds(
    RecordHeader,
    ingest_ts_ns=st.integers(0, 2**64 - 1),
    type_id=st.integers(0, 2**32 - 1),
    source_id=st.integers(0, 2**32 - 1),
    payload_len=st.integers(0, 2**32 - 1),
    seq_no=st.integers(0, 2**64 - 1),
    source_addr=st.binary(min_size=16, max_size=16),
    source_port=st.integers(0, 2**16 - 1),
    flags=st.integers(0, 2**16 - 1),
)


@given(header_strategy)
def test_roundtrip_property(h):
    assert decode_header(encode_header(h)) == h


def test_decode_bad_magic():
    with pytest.raises(BadMagic):
        decode_header(b"XXXX" + bytes(60))


def test_decode_unsupported_version():
    b = bytearray(encode_header(RecordHeader(0, 0, 0, 0, 0)))
    b[4:6] = (9).to_bytes(2, "little")
    with pytest.raises(UnsupportedVersion):
        decode_header(bytes(b))


def test_decode_nonzero_reserved():
    b = bytearray(encode_header(RecordHeader(0, 0, 0, 0, 0)))
    b[60] = 0xAA
    with pytest.raises(NonzeroReserved):
        decode_header(bytes(b))


def test_decode_short_buffer():
    with pytest.raises(TruncatedRecord):
        decode_header(b"LGS1")


@given(st.lists(st.binary(max_size=200).filter(lambda p: b"\n" not in p), max_size=20))
@settings(max_examples=50)
def test_framing_resplit_property(payloads):
    recs = [
        LogRecord(RecordHeader(ingest_ts_ns=i, type_id=0, source_id=0, payload_len=len(p), seq_no=i), p)
        for i, p in enumerate(payloads)
    ]
    blob = b"".join(r.encode() for r in recs)
    out = list(iter_frames(blob))
    assert [p for _, p in out] == payloads
    assert [h.seq_no for h, _ in out] == list(range(len(payloads)))


def test_framing_truncation_detected():
    rec = LogRecord(RecordHeader(1, 1, 1, 5, 1), b"hello")
    blob = rec.encode()
    with pytest.raises(TruncatedRecord):
        list(iter_frames(blob[:-1]))
    with pytest.raises(TruncatedRecord):
        list(iter_frames(blob + b"LGS1"))


def test_log_record_rejects_newline():
    with pytest.raises(ValueError):
        LogRecord(RecordHeader(0, 0, 0, 3, 0), b"a\nb")


def test_log_record_length_checked():
    with pytest.raises(ValueError):
        LogRecord(RecordHeader(0, 0, 0, 4, 0), b"abc")


def test_interval_validation_and_overlap():
    with pytest.raises(ValueError):
        Interval(10, 5)
    iv = Interval(5, 15)
    assert iv.contains(5) and iv.contains(15) and not iv.contains(16)
    assert iv.overlaps(0, 5) and iv.overlaps(15, 30) and not iv.overlaps(16, 30)


def test_classify_port_rule():
    reg = TypeRegistry([TypeRule(type_id=7, type_name="syslog", port=5140)])
    assert classify_type(reg, 5140, b"anything") == 7
    assert classify_type(reg, 5999, b"anything") == 0


def test_classify_order_wins():
    reg = TypeRegistry([
        TypeRule(type_id=1, type_name="apache", prefix=b"apache:"),
        TypeRule(type_id=2, type_name="other", port=5141),
    ])
    assert classify_type(reg, 5141, b"apache:GET /") == 1
    assert classify_type(reg, 5141, b"nginx:GET /") == 2


def test_classify_no_rules_default():
    reg = TypeRegistry([])
    assert classify_type(reg, 514, b"x") == 0


def test_classify_deterministic_total():
    reg = TypeRegistry([
        TypeRule(type_id=3, type_name="a", prefix=b"a"),
        TypeRule(type_id=4, type_name="b", port=1),
    ])
    for port in (0, 1, 2):
        for payload in (b"", b"a", b"b", bytes(range(256)).replace(b"\n", b"")):
            assert reg.classify(port, payload) == reg.classify(port, payload)


def test_registry_rejects_duplicates():
    with pytest.raises(ValueError):
        TypeRegistry([TypeRule(1, "x", port=1), TypeRule(1, "y", port=2)])
    with pytest.raises(ValueError):
        TypeRegistry([TypeRule(1, "x", port=1), TypeRule(2, "x", port=2)])
    with pytest.raises(ValueError):
        TypeRule(0, "zero", port=1)


def test_registry_from_config_and_names():
    reg = TypeRegistry.from_config([
        {"id": 1, "name": "apache_access", "match": {"port": 5140}},
        {"id": 2, "name": "app", "match": {"prefix": "app:"}},
    ])
    assert reg.id_of("apache_access") == 1
    assert reg.id_of("*") == 0
    assert reg.id_of("nope") is None
    assert reg.name_of(2) == "app"
    assert reg.classify(5140, b"x") == 1
    assert reg.classify(9, b"app:x") == 2


def test_addr_pack_roundtrip():
    a4 = records.pack_addr("10.0.0.1")
    assert len(a4) == 16 and records.unpack_addr(a4) == "10.0.0.1"
    a6 = records.pack_addr("2001:db8::1")
    assert records.unpack_addr(a6) == "2001:db8::1"


def test_source_id_stable():
    a = records.pack_addr("10.0.0.1")
    assert records.source_id_of(a, 514) == records.source_id_of(a, 514)
    assert records.source_id_of(a, 514) != records.source_id_of(a, 515)
