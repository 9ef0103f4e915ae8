"""CLI: dbnode --config <file>"""

import argparse
import logging
import signal
import threading

from ..config import load_config, registry_from, section
from ..pipeline.spec import load_specs
from .server import DbNode, DbNodeConfig


def specs_by_id(doc: dict, sec: dict):
    """Map pipeline specs (keyed by type name) onto type ids via the registry."""
    pipe_sec = doc.get("pipelines", {})
    if "pipeline_config_path" in sec:
        pipe_sec = load_config(sec["pipeline_config_path"])
        if "pipelines" in pipe_sec:
            pipe_sec = pipe_sec["pipelines"]
    specs = load_specs(pipe_sec)
    if not specs:
        return None
    registry = registry_from(doc, sec)
    out = {}
    for type_name, spec in specs.items():
        tid = registry.id_of(type_name)
        if tid is None or tid == 0:
            raise SystemExit(f"pipeline spec {type_name!r} has no registered type id")
        out[tid] = spec
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dbnode", description="flat-file log storage node")
    ap.add_argument("--config", required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    doc = load_config(args.config)
    sec = section(doc, "dbnode")
    node = DbNode(DbNodeConfig.from_dict(sec), specs_by_id(doc, sec))
    node.start()

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    node.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
