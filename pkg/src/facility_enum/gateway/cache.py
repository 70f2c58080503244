"""Content-addressed answer cache so live runs can be replayed offline."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import asdict, dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

from .queries import ModelAnswer

CACHE_DIR_ENV = "FE_CACHE_DIR"


@dataclass(frozen=True)
class CacheKey:
    image_bytes_digest: str
    overlay_digest: str
    query: str  # canonical JSON of the query
    prompt_template_version: str
    backend_name: str

    @cached_property
    def digest(self) -> str:
        payload = json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                             sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


class MemoryCache:
    def __init__(self):
        self._data: dict[str, ModelAnswer] = {}
        self._lock = threading.Lock()

    def get(self, key: CacheKey) -> ModelAnswer | None:
        with self._lock:
            return self._data.get(key.digest)

    def put(self, key: CacheKey, answer: ModelAnswer, metadata: Mapping[str, Any] | None = None) -> bool:
        with self._lock:
            if key.digest in self._data:
                return False
            self._data[key.digest] = answer
            return True

    def __len__(self) -> int:
        return len(self._data)


class DiskCache:
    """One JSON file per key digest, sharded by the first two hex chars.

    Inserts are atomic and first-writer-wins: the entry is written to a
    temporary file and hard-linked into place, which fails if another
    writer got there first.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: CacheKey) -> Path:
        d = key.digest
        return self.root / d[:2] / f"{d}.json"

    def get(self, key: CacheKey) -> ModelAnswer | None:
        path = self._path(key)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            return None
        return ModelAnswer.from_dict(data["answer"])

    def put(self, key: CacheKey, answer: ModelAnswer, metadata: Mapping[str, Any] | None = None) -> bool:
        path = self._path(key)
        if path.exists():
            return False
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"key": asdict(key), "answer": answer.to_dict(), "request": dict(metadata or {})}
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(record, fh, sort_keys=True, indent=1)
            os.link(tmp, path)
            return True
        except FileExistsError:
            return False
        finally:
            os.unlink(tmp)

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json"))
