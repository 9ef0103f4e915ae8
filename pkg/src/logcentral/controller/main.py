"""CLI: controller --config <file>"""

import argparse
import logging
import signal
import threading

from ..config import load_config, registry_from, section
from .service import Controller, ControllerConfig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="controller", description="drill-down query controller")
    ap.add_argument("--config", required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    doc = load_config(args.config)
    sec = section(doc, "controller")
    ctl = Controller(ControllerConfig.from_dict(sec), registry_from(doc, sec))
    ctl.start()

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    ctl.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
