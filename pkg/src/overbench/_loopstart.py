"""Child-process entry for ``--spawn``: one loop start, JSON over stdio."""

import json
import sys
from pathlib import Path

from .errors import OverbenchError
from .runner import RunConfig, run_loop_start


def main() -> int:
    request = json.load(sys.stdin)
    cfg = RunConfig.from_dict(request["config"])
    trace = request.get("trace_path")
    try:
        result = run_loop_start(cfg, request["loop_index"], Path(trace) if trace else None)
    except OverbenchError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stdout)
        return 1
    json.dump(result.to_dict(), sys.stdout, separators=(",", ":"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
