"""Embedding providers used for semantic similarity.

Both entity fusion and relevance detection need a similarity score on a
normalized [0, 1] scale. The provider is pluggable: tests and offline runs
use the deterministic hashing provider or a static lookup over fixture
vectors; a deployment may substitute a model-backed provider implementing
the same two-method contract.
"""

from __future__ import annotations

import re
from typing import Protocol

import numpy as np


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...

    def similarity(self, a: str, b: str) -> float: ...


def cosine_unit_interval(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity mapped from [-1, 1] to [0, 1]."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    cos = float(np.dot(u, v) / (nu * nv))
    return (cos + 1.0) / 2.0


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbeddingProvider:
    """Deterministic character/word n-gram hashing embedder.

    Not a semantic model: it gives high similarity to texts sharing surface
    vocabulary, which is exactly what the offline pipeline and tests need to
    be reproducible with no model access.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _features(self, text: str) -> list[str]:
        tokens = _TOKEN_RE.findall(text.lower())
        feats = list(tokens)
        for tok in tokens:
            padded = f"#{tok}#"
            feats.extend(padded[i : i + 3] for i in range(len(padded) - 2))
        return feats

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for feat in self._features(text):
            h = hash_feature(feat)
            vec[h % self.dim] += 1.0 if (h >> 31) & 1 else -1.0
        return vec

    def similarity(self, a: str, b: str) -> float:
        return cosine_unit_interval(self.embed(a), self.embed(b))


def hash_feature(feat: str) -> int:
    """Stable 64-bit FNV-1a hash (Python's builtin hash is salted per run)."""
    h = 0xCBF29CE484222325
    for byte in feat.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class StaticEmbeddingProvider:
    """Lookup provider over precomputed fixture vectors.

    Unknown texts fall back to a zero vector (similarity 0), so fixtures
    must enumerate every text they intend to compare.
    """

    def __init__(self, vectors: dict[str, list[float] | np.ndarray]):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}

    def embed(self, text: str) -> np.ndarray:
        vec = self.vectors.get(text)
        if vec is None:
            dim = len(next(iter(self.vectors.values()))) if self.vectors else 8
            return np.zeros(dim, dtype=np.float64)
        return vec

    def similarity(self, a: str, b: str) -> float:
        return cosine_unit_interval(self.embed(a), self.embed(b))
