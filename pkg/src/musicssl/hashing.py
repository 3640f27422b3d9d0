"""Stable content hashes used to stamp artifacts with their producing config."""

import hashlib
import json


def config_hash(obj) -> str:
    """Short stable hash of a JSON-compatible config tree."""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def bytes_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
