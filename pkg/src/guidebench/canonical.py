"""Canonical serialization and hashing shared by all persisted artifacts.

Every digest in the system (corpus content digests, nucleus hashes, request
hashes, bundle hashes) is computed over the canonical JSON form produced
here, so that byte-identity of artifacts is a meaningful determinism check.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest(obj: Any) -> str:
    """sha256 over the canonical JSON form, prefixed with the algorithm name."""
    return "sha256:" + sha256_hex(canonical_json(obj))


def short_digest(obj: Any, n: int = 12) -> str:
    return sha256_hex(canonical_json(obj))[:n]
