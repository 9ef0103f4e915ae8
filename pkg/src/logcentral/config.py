"""Shared JSON config handling.

All CLIs read the same document shape: one JSON object with an optional
section per component plus shared top-level keys.

    {
      "types": [{"id": 1, "name": "apache_access", "match": {"port": 5140}}],
      "feeder":     {"listen_ports": [5140], "nodes": ["127.0.0.1:7401"], ...},
      "dbnode":     {"listen_port": 7401, "data_dir": "...", ...},
      "controller": {"listen_addr": "127.0.0.1:8080", "nodes": [...], ...},
      "receptor":   {"ingest_port": 7500, "http_addr": "...", ...},
      "pipelines":  {"specs": {"apache_access": {...}}}
    }

A component section may also be the whole document (no wrapper), which keeps
single-service config files short.
"""

from __future__ import annotations

import json
from pathlib import Path

from .records import TypeRegistry

SECTIONS = ("feeder", "dbnode", "controller", "receptor", "pipelines", "workbench")


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    return doc


def section(doc: dict, name: str) -> dict:
    """Return the named component section, or the whole doc when unsectioned."""
    if name in doc:
        sec = doc[name]
        if not isinstance(sec, dict):
            raise ValueError(f"config section {name!r} must be an object")
        return sec
    if any(s in doc for s in SECTIONS):
        return {}
    return doc


def registry_from(doc: dict, sec: dict) -> TypeRegistry:
    """Build the type registry from section-local type_rules or shared types."""
    entries = sec.get("type_rules", doc.get("types", []))
    return TypeRegistry.from_config(entries)


def parse_endpoint(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad endpoint {s!r}, want host:port")
    return host, int(port)


def write_config(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
