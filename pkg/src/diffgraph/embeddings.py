"""Text embedders and exact cosine retrieval."""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, LlmUnavailableError, ZeroVectorError

DEFAULT_D_NODE = 32

_SPLIT = re.compile(r"[^0-9a-z]+")


class Embedder(Protocol):
    d_node: int

    def embed(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not an ASCII letter or digit."""
    return [tok for tok in _SPLIT.split(text.lower()) if tok]


def hash_embed(text: str, d_node: int = DEFAULT_D_NODE) -> np.ndarray:
    """Bag-of-tokens embedding with FNV-1a (64-bit) bucket hashing.

    Returns a unit-norm float32 vector; text without tokens maps to e_0.
    """
    counts = np.zeros(d_node, dtype=np.float64)
    for tok in tokenize(text):
        counts[kernels.fnv1a64(tok.encode("utf-8")) % d_node] += 1.0
    norm = np.sqrt(np.dot(counts, counts))
    if norm == 0.0:
        counts[0] = 1.0
        norm = 1.0
    return (counts / norm).astype(np.float32)


@dataclass(frozen=True)
class HashEmbedder:
    d_node: int = DEFAULT_D_NODE

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.d_node)


@dataclass(frozen=True)
class HttpEmbedder:
    """Client for a remote embedder: POST {"text": ...} -> {"vector": [...]}."""

    url: str
    d_node: int = DEFAULT_D_NODE
    timeout: float = 30.0

    def embed(self, text: str) -> np.ndarray:
        body = json.dumps({"text": text}).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                vec = np.asarray(json.loads(resp.read())["vector"], dtype=np.float64)
        except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
            raise LlmUnavailableError(f"embedder at {self.url} failed: {exc}") from exc
        if vec.shape != (self.d_node,):
            raise DimensionMismatchError(
                f"remote embedder returned {vec.shape}, expected ({self.d_node},)"
            )
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            out = np.zeros(self.d_node, dtype=np.float32)
            out[0] = 1.0
            return out
        return (vec / norm).astype(np.float32)


def embedder_from_env(d_node: int = DEFAULT_D_NODE, value: str | None = None) -> Embedder:
    """Resolve ``DIFFGRAPH_EMBEDDER=stub|http:<url>``."""
    value = value if value is not None else os.environ.get("DIFFGRAPH_EMBEDDER", "stub")
    if value in ("", "stub"):
        return HashEmbedder(d_node)
    if value.startswith("http:"):
        rest = value[len("http:"):]
        return HttpEmbedder(value if rest.startswith("//") else rest, d_node)
    raise ValueError(f"unknown embedder backend {value!r}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cosine of shapes {a.shape} and {b.shape}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_k(
    query: np.ndarray,
    candidates: Iterable[tuple[str, np.ndarray]],
    k: int,
) -> list[tuple[str, float]]:
    """The ``k`` most similar candidates, descending; ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [(cid, cosine(query, vec)) for cid, vec in candidates]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def embed_all(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    if not texts:
        return np.zeros((0, embedder.d_node), dtype=np.float32)
    return np.stack([embedder.embed(t) for t in texts])
