import json
import logging
from pathlib import Path


def setup(out):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def dump(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, default=str) + "\n")
    print(json.dumps(payload, indent=2, default=str))
