"""
File helpers: versioned headers and atomic writes.
"""
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from .errors import TraceError

FORMAT_VERSION = 1
HEADER_PREFIX = "# chunkwise-"


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write text to a temp file next to path, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def header_line(kind: str, metadata: Dict[str, Any]) -> str:
    """Versioned first line of every columnar export."""
    payload = json.dumps(metadata, sort_keys=True, separators=(",", ":"))
    return f"{HEADER_PREFIX}{kind} v{FORMAT_VERSION} {payload}\n"


def parse_header(line: str, kind: str) -> Tuple[int, Dict[str, Any]]:
    """Parse a header written by header_line; returns (version, metadata)."""
    expected = f"{HEADER_PREFIX}{kind} v"
    if not line.startswith(expected):
        raise TraceError(f"not a chunkwise {kind} file (header {line[:40]!r})")
    rest = line[len(expected):].rstrip("\n")
    version_str, _, payload = rest.partition(" ")
    try:
        version = int(version_str)
        metadata = json.loads(payload) if payload else {}
    except (ValueError, json.JSONDecodeError) as e:
        raise TraceError(f"malformed {kind} header: {e}") from e
    if version > FORMAT_VERSION:
        raise TraceError(f"{kind} format v{version} is newer than supported v{FORMAT_VERSION}")
    return version, metadata
