"""Pipeline spec model and validation.

A spec is one JSON object per log type:

    {
      "index": "apache_5xx_5m",
      "stages": [
        {"parse": {"delimiters": " ", "fields": ["ip","i1","i2","date","tz",
                                                  "method","path","proto","status","resp_us"]}},
        {"filter": {"field": "status", "op": "=", "value": "500"}},
        {"window": {"width_s": 300, "aggregates": [{"op": "count"}]}},
        {"serialize": {}}
      ]
    }

Rules enforced here: at most one window stage, the last stage is serialize or
external, and every referenced field is introduced by an earlier parse stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

VALID_OPS = ("=", "!=", "<", ">")
VALID_AGGS = ("count", "sum", "mean", "moving_average")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ParseStage:
    delimiters: str
    field_names: tuple


@dataclass(frozen=True)
class FilterStage:
    predicate: dict  # {"field","op","value"} or {"and":[...]} / {"or":[...]}


@dataclass(frozen=True)
class WindowStage:
    width_s: float
    aggregates: tuple  # of dicts {"op", "field"?, "k"?}
    group_by: str | None = None

    @property
    def width_ns(self) -> int:
        return int(self.width_s * 1_000_000_000)


@dataclass(frozen=True)
class SerializeStage:
    pass


@dataclass(frozen=True)
class ExternalStage:
    command: str


@dataclass(frozen=True)
class PipelineSpec:
    type_name: str
    index_name: str
    stages: tuple

    @property
    def window(self) -> WindowStage | None:
        for s in self.stages:
            if isinstance(s, WindowStage):
                return s
        return None

    @property
    def parse(self) -> ParseStage | None:
        for s in self.stages:
            if isinstance(s, ParseStage):
                return s
        return None


def _predicate_fields(pred: dict):
    if "and" in pred or "or" in pred:
        for sub in pred.get("and", pred.get("or", [])):
            yield from _predicate_fields(sub)
    else:
        yield pred.get("field")


def _validate_predicate(pred: dict, where: str) -> None:
    if "and" in pred or "or" in pred:
        key = "and" if "and" in pred else "or"
        subs = pred[key]
        if not isinstance(subs, list) or not subs:
            raise SpecError(f"{where}: {key} needs a non-empty list")
        for sub in subs:
            _validate_predicate(sub, where)
        return
    if not {"field", "op", "value"} <= set(pred):
        raise SpecError(f"{where}: predicate needs field/op/value")
    if pred["op"] not in VALID_OPS:
        raise SpecError(f"{where}: bad op {pred['op']!r}, want one of {VALID_OPS}")


def parse_spec(type_name: str, doc: dict) -> PipelineSpec:
    index = doc.get("index", type_name)
    raw_stages = doc.get("stages")
    if not raw_stages:
        raise SpecError(f"{type_name}: spec needs at least one stage")
    stages = []
    defined: set = set()
    saw_window = False
    for i, raw in enumerate(raw_stages):
        if not isinstance(raw, dict) or len(raw) != 1:
            raise SpecError(f"{type_name}: stage {i} must be a single-key object")
        kind, body = next(iter(raw.items()))
        where = f"{type_name}: stage {i} ({kind})"
        if i > 0 and isinstance(stages[-1], (SerializeStage, ExternalStage)):
            raise SpecError(f"{where}: nothing may follow a terminal stage")
        if kind == "parse":
            names = tuple(body.get("fields", ()))
            if not names:
                raise SpecError(f"{where}: needs field names")
            stages.append(ParseStage(delimiters=body.get("delimiters", " "), field_names=names))
            defined.update(names)
        elif kind == "filter":
            pred = body
            _validate_predicate(pred, where)
            for f in _predicate_fields(pred):
                if f not in defined:
                    raise SpecError(f"{where}: field {f!r} not defined by a prior parse")
            stages.append(FilterStage(predicate=pred))
        elif kind == "window":
            if saw_window:
                raise SpecError(f"{where}: at most one window stage")
            saw_window = True
            aggs = body.get("aggregates", [])
            if not aggs:
                raise SpecError(f"{where}: needs at least one aggregate")
            for a in aggs:
                if a.get("op") not in VALID_AGGS:
                    raise SpecError(f"{where}: bad aggregate op {a.get('op')!r}")
                if a["op"] != "count":
                    if a.get("field") not in defined:
                        raise SpecError(f"{where}: aggregate field {a.get('field')!r}"
                                        " not defined by a prior parse")
                if a["op"] == "moving_average" and not int(a.get("k", 0)) >= 1:
                    raise SpecError(f"{where}: moving_average needs k >= 1")
            group_by = body.get("group_by")
            if group_by is not None and group_by not in defined:
                raise SpecError(f"{where}: group_by field {group_by!r} not defined")
            width = float(body.get("width_s", 0))
            if width <= 0:
                raise SpecError(f"{where}: width_s must be positive")
            stages.append(WindowStage(width_s=width, aggregates=tuple(dict(a) for a in aggs),
                                      group_by=group_by))
        elif kind == "serialize":
            stages.append(SerializeStage())
        elif kind == "external":
            cmd = body.get("command")
            if not cmd:
                raise SpecError(f"{where}: needs a command")
            stages.append(ExternalStage(command=cmd))
        else:
            raise SpecError(f"{where}: unknown stage kind")
    if not isinstance(stages[-1], (SerializeStage, ExternalStage)):
        raise SpecError(f"{type_name}: last stage must be serialize or external")
    return PipelineSpec(type_name=type_name, index_name=index, stages=tuple(stages))


def load_specs(doc: dict) -> dict[str, PipelineSpec]:
    """Parse a pipelines config section: {"specs": {type_name: spec, ...}}."""
    out = {}
    for type_name, spec_doc in doc.get("specs", {}).items():
        out[type_name] = parse_spec(type_name, spec_doc)
    return out
