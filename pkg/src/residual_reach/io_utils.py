"""File helpers: atomic writes and JSON lines."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def write_atomic(path, data):
    """Write ``data`` (str or bytes) to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_jsonl(header: dict, records) -> str:
    lines = [json.dumps({"header": header}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    return "\n".join(lines) + "\n"


def loads_jsonl(text: str):
    """Return ``(header, records)``; the header line is optional."""
    header = {}
    records = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        obj = json.loads(line)
        if i == 0 and isinstance(obj, dict) and set(obj) == {"header"}:
            header = obj["header"]
        else:
            records.append(obj)
    return header, records
