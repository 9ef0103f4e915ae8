"""Client side of the dbnode control channel."""

from __future__ import annotations

import json
import socket

from ..netproto import MSG_RECORDS, recv_json, recv_message, send_json
from ..records import Interval


class NodeClient:
    def __init__(self, endpoint: tuple[str, int], timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _connect(self) -> socket.socket:
        s = socket.create_connection(self.endpoint, timeout=self.timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return s

    def ping(self) -> dict:
        with self._connect() as s:
            send_json(s, {"op": "ping"})
            return recv_json(s)

    def stats(self) -> dict:
        with self._connect() as s:
            send_json(s, {"op": "stats"})
            return recv_json(s)

    def lookup(self, interval: Interval, type_id: int) -> list[dict]:
        with self._connect() as s:
            send_json(s, {"op": "lookup", "from_ts_ns": interval.from_ts_ns,
                          "to_ts_ns": interval.to_ts_ns, "type_id": type_id})
            resp = recv_json(s)
        if not resp.get("ok"):
            raise ConnectionError(f"lookup failed on {self.endpoint}: {resp}")
        return resp["segments"]

    def cancel(self, query_id: str) -> None:
        with self._connect() as s:
            send_json(s, {"op": "cancel", "query_id": query_id})
            recv_json(s)

    def scan(self, query_id: str, interval: Interval, type_id: int,
             on_progress=None, on_records=None, stream_records: bool = True) -> dict:
        """Run one scan to completion; returns the end-status document.

        on_progress(doc) fires for start/progress events; on_records(framed)
        for each record batch when stream_records is requested. The scan runs
        on this connection; cancellation goes through a separate connection.
        """
        with self._connect() as s:
            s.settimeout(None)  # scans are long; pacing is the node's business
            send_json(s, {"op": "scan", "query_id": query_id,
                          "from_ts_ns": interval.from_ts_ns, "to_ts_ns": interval.to_ts_ns,
                          "type_id": type_id, "stream_records": stream_records})
            while True:
                kind, body = recv_message(s)
                if kind == MSG_RECORDS:
                    if on_records is not None:
                        on_records(body)
                    continue
                doc = json.loads(body.decode())
                if doc.get("event") == "end":
                    return doc
                if on_progress is not None:
                    on_progress(doc)
