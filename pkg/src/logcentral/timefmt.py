"""Nanosecond ISO-8601 UTC timestamps used in summary documents."""

from __future__ import annotations

from datetime import datetime, timezone

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def iso_ns(ts_ns: int) -> str:
    """1970-01-01T00:00:00.000000000Z style, nine fractional digits."""
    secs, ns = divmod(ts_ns, 1_000_000_000)
    dt = datetime.fromtimestamp(secs, tz=timezone.utc)
    return f"{dt.strftime('%Y-%m-%dT%H:%M:%S')}.{ns:09d}Z"


def parse_iso_ns(s: str) -> int:
    if not s.endswith("Z"):
        raise ValueError(f"timestamp {s!r} must be UTC (Z suffix)")
    body = s[:-1]
    frac = "0"
    if "." in body:
        body, frac = body.split(".", 1)
    dt = datetime.strptime(body, "%Y-%m-%dT%H:%M:%S").replace(tzinfo=timezone.utc)
    ns = int(frac.ljust(9, "0")[:9])
    return int((dt - _EPOCH).total_seconds()) * 1_000_000_000 + ns
