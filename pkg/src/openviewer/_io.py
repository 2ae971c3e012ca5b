"""Internal IO helpers: canonical JSON and atomic file writes.

Canonical form (sorted keys, fixed indentation, trailing newline, floats via
repr) makes identical in-memory state serialize to identical bytes, which
the determinism guarantees rely on.
"""

from __future__ import annotations

import json
import os
from pathlib import Path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def float_repr(x: float) -> str:
    """Shortest round-tripping decimal form of a float."""
    return repr(float(x))
