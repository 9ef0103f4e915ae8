"""CLI: feeder --config <file>"""

import argparse
import logging
import signal
import threading

from ..config import load_config, registry_from, section
from .service import Feeder, FeederConfig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="feeder", description="UDP log feeder / load balancer")
    ap.add_argument("--config", required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    doc = load_config(args.config)
    sec = section(doc, "feeder")
    feeder = Feeder(FeederConfig.from_dict(sec), registry_from(doc, sec))
    feeder.start()
    logging.getLogger("feeder").info(
        "listening on UDP %s, %d workers, %d nodes",
        feeder.config.listen_ports, feeder.config.header_workers, len(feeder.endpoints))

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    feeder.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
