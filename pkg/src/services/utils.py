import csv
import hashlib
import json
import logging
import logging.handlers
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(log_dir: Optional[str | Path] = None, level: int = logging.INFO):
    """Configure process-wide logging.

    Args:
        log_dir: Directory for the rotating ``app.log``; stream-only when None
        level: Root logging level
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                log_dir / "app.log", maxBytes=10 * 1024 * 1024, backupCount=5
            )
        )
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def utc_now() -> str:
    return datetime.now(tz=timezone.utc).isoformat()


def write_json_atomic(path: str | Path, data: Any):
    """Write JSON to ``path`` via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json_once(path: str | Path, data: Any):
    """Create ``path`` with JSON content; fails if it already exists."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def content_hash(paths: Iterable[str | Path], extra: Optional[Dict[str, Any]] = None) -> str:
    """Stable sha256 over file contents (in the given order) and a JSON blob."""
    digest = hashlib.sha256()
    for p in paths:
        digest.update(Path(p).read_bytes())
    if extra is not None:
        digest.update(json.dumps(extra, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


class CsvLog:
    """Append-only CSV writer with a fixed header."""

    def __init__(self, path: str | Path, fields: Sequence[str]):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.fields)

    def write(self, row: Dict[str, Any]):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row.get(k, "") for k in self.fields])
