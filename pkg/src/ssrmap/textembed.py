"""Deterministic caption embeddings via signed feature hashing.

A stand-in for a learned text encoder: tokens are lowercased, hashed to
a bucket and a sign, accumulated with term-frequency weights, and the
result is L2-normalized.  The hash is keyed (blake2b) so it is stable
across processes and platforms.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")

__all__ = ["HashedBowEmbedder", "tokenize"]


def tokenize(caption: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(caption.lower())


@dataclass(frozen=True)
class HashedBowEmbedder:
    """Signed bag-of-words hasher. Pure; identical (seed, dim, text) in,
    identical vector out."""

    dim: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")

    def _token_slot(self, token: str) -> tuple[int, float]:
        key = self.seed.to_bytes(8, "little", signed=True)
        digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=10).digest()
        index = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return index, sign

    def embed_text(self, caption: str) -> np.ndarray:
        """Embed one caption; zero vector marks a degenerate (empty) caption."""
        vec = np.zeros(self.dim)
        for token in tokenize(caption):
            index, sign = self._token_slot(token)
            vec[index] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            return vec
        return vec / norm

    def embed_batch(self, captions: list[str]) -> np.ndarray:
        return np.stack([self.embed_text(c) for c in captions]) if captions else np.zeros((0, self.dim))

    @staticmethod
    def is_degenerate(vec: np.ndarray) -> bool:
        """True when an embedding carries no signal (the all-zero vector)."""
        return not np.any(np.asarray(vec))
