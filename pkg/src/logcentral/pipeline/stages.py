"""Stage execution: parsing, filtering, windowed aggregation, serialization."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from ..timefmt import iso_ns
from .spec import ParseStage, WindowStage


@dataclass(frozen=True)
class SummaryRecord:
    index_name: str
    ts_ns: int
    fields: dict

    def to_json_line(self) -> str:
        return serialize_record(self.fields, self.index_name, self.ts_ns)


def serialize_record(fields: dict, index_name: str, ts_ns: int) -> str:
    """One-line JSON document with the reserved envelope keys first."""
    doc = {"@ts": iso_ns(ts_ns), "@index": index_name}
    doc.update(fields)
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False)


class Parser:
    def __init__(self, stage: ParseStage):
        self.field_names = stage.field_names
        delims = stage.delimiters or " "
        self._single = delims if len(delims) == 1 else None
        self._re = None if self._single else re.compile("[" + re.escape(delims) + "]")

    def parse(self, payload_text: str) -> dict:
        """Bind split tokens to field names positionally; missing fields are empty."""
        if self._single is not None:
            tokens = payload_text.split(self._single)
        else:
            tokens = self._re.split(payload_text)
        names = self.field_names
        n = len(tokens)
        return {name: (tokens[i] if i < n else "") for i, name in enumerate(names)}


def parse_line(stage: ParseStage, payload: bytes) -> dict:
    return Parser(stage).parse(payload.decode("latin-1"))


def _as_number(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def apply_filter(predicate: dict, fields: dict) -> bool:
    """Evaluate a predicate tree over named fields.

    Comparison is numeric when both sides parse as numbers, lexicographic when
    neither does; ordering a number against a non-number is false (coercion
    failure convention).
    """
    if "and" in predicate:
        return all(apply_filter(p, fields) for p in predicate["and"])
    if "or" in predicate:
        return any(apply_filter(p, fields) for p in predicate["or"])
    left = fields.get(predicate["field"], "")
    right = predicate["value"]
    op = predicate["op"]
    ln, rn = _as_number(left), _as_number(right)
    if ln is not None and rn is not None:
        l, r = ln, rn
    elif ln is None and rn is None:
        l, r = str(left), str(right)
    else:
        return op == "!="  # mixed types are never equal and never ordered
    if op == "=":
        return l == r
    if op == "!=":
        return l != r
    if op == "<":
        return l < r
    return l > r


class TumblingWindows:
    """Epoch-aligned tumbling windows with per-group aggregate state.

    All open windows share the current window id (the watermark); a record in
    a later window closes them all. Records for windows before the watermark
    are late: counted and dropped.
    """

    def __init__(self, stage: WindowStage, index_name: str):
        self.stage = stage
        self.index_name = index_name
        self.width_ns = stage.width_ns
        self.group_by = stage.group_by
        self.watermark = None  # current open window id
        self.groups: dict = {}  # group value -> {"count": int, "sums": {f: [sum, n]}}
        self.ma_history: dict = {}  # group value -> {field: list of last k means}
        self.late_records = 0
        self._num_fields = sorted({a["field"] for a in stage.aggregates if a["op"] != "count"})
        self._ma_k = {a["field"]: int(a["k"]) for a in stage.aggregates
                      if a["op"] == "moving_average"}

    def update(self, fields: dict, ts_ns: int) -> list[SummaryRecord]:
        wid = ts_ns // self.width_ns
        out: list[SummaryRecord] = []
        if self.watermark is None:
            self.watermark = wid
        elif wid > self.watermark:
            out = self._close_all()
            self.watermark = wid
        elif wid < self.watermark:
            self.late_records += 1
            return out
        group = fields.get(self.group_by, "") if self.group_by else ""
        st = self.groups.get(group)
        if st is None:
            st = {"count": 0, "sums": {f: [0.0, 0] for f in self._num_fields}}
            self.groups[group] = st
        st["count"] += 1
        sums = st["sums"]
        for f in self._num_fields:
            v = _as_number(fields.get(f))
            if v is not None:  # unparseable numerics are skipped
                acc = sums[f]
                acc[0] += v
                acc[1] += 1
        return out

    def flush(self) -> list[SummaryRecord]:
        """Close every open window (stream end / replay end / shutdown)."""
        out = self._close_all()
        self.watermark = None
        return out

    def _close_all(self) -> list[SummaryRecord]:
        if self.watermark is None or not self.groups:
            self.groups = {}
            return []
        window_end_ns = (self.watermark + 1) * self.width_ns
        out = []
        for group in sorted(self.groups):
            st = self.groups[group]
            fields: dict = {}
            if self.group_by:
                fields[self.group_by] = group
            means = {}
            for f, (total, n) in st["sums"].items():
                means[f] = (total / n) if n else None
            hist = self.ma_history.setdefault(group, {f: [] for f in self._ma_k})
            for f, k in self._ma_k.items():
                if means.get(f) is not None:
                    h = hist[f]
                    h.append(means[f])
                    del h[:-k]
            for agg in self.stage.aggregates:
                op = agg["op"]
                if op == "count":
                    fields["count"] = st["count"]
                elif op == "sum":
                    f = agg["field"]
                    total, n = st["sums"][f]
                    fields[f"sum_{f}"] = total if n else None
                elif op == "mean":
                    f = agg["field"]
                    fields[f"mean_{f}"] = means[f]
                else:
                    f = agg["field"]
                    h = self.ma_history[group][f]
                    fields[f"moving_avg_{f}"] = (sum(h) / len(h)) if h else None
            out.append(SummaryRecord(self.index_name, window_end_ns, fields))
        self.groups = {}
        return out
