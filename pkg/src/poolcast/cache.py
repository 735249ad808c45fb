"""Content-addressed JSON cache for expensive reference quantities."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def _default(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"cannot hash {type(obj).__name__}")


def content_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=_default, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:20]


def load(cache_dir, name: str):
    if cache_dir is None:
        return None
    path = Path(cache_dir) / name
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def store(cache_dir, name: str, record: dict) -> None:
    if cache_dir is None:
        return
    path = Path(cache_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
