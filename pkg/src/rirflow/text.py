"""Text conditioning: deterministic embeddings, pooling, encoder-quality
metrics, and heuristic acoustic classification of prompts.

The built-in embedder is a hashed bag-of-words over token positions: each
token hashes to one signed coordinate of a fixed-dimension vector. It is a
stand-in for externally computed encoder embeddings, which can be ingested
verbatim from a JSON-lines table instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_EMBED_DIM = 256

RT60_BUCKETS = ("short", "medium", "long")


@dataclass
class StructuredCaption:
    """The five acoustic scene fields a prompt is written from."""

    space_type: str
    size_class: str
    main_materials: list[str]
    soft_coverage: float
    rt60_bucket: str
    rt60_seconds: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.soft_coverage <= 100.0:
            raise ValueError(f"soft_coverage must be a percentage, got {self.soft_coverage}")
        if self.rt60_bucket not in RT60_BUCKETS:
            raise ValueError(f"rt60_bucket must be one of {RT60_BUCKETS}")

    def to_dict(self) -> dict:
        d = {
            "space_type": self.space_type,
            "size_class": self.size_class,
            "main_materials": list(self.main_materials),
            "soft_coverage": self.soft_coverage,
            "rt60_bucket": self.rt60_bucket,
        }
        if self.rt60_seconds is not None:
            d["rt60_seconds"] = self.rt60_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredCaption":
        return cls(
            space_type=d["space_type"],
            size_class=d["size_class"],
            main_materials=list(d["main_materials"]),
            soft_coverage=d["soft_coverage"],
            rt60_bucket=d["rt60_bucket"],
            rt60_seconds=d.get("rt60_seconds"),
        )


@dataclass
class EmbeddingSequence:
    """Per-token embedding matrix (n_tokens, dim) with its provider id."""

    vectors: np.ndarray
    provider_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("embedding sequence needs at least one token vector")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _tokenize(prompt: str) -> list[str]:
    cleaned = "".join(ch if ch.isalnum() or ch == "'" else " " for ch in prompt.lower())
    return cleaned.split()


def _token_slot(token: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return value % dim, 1.0 if (value >> 63) & 1 else -1.0


def embed_text(prompt: str, provider: str = "hashed_bow",
               dim: int = DEFAULT_EMBED_DIM,
               table: dict[str, np.ndarray] | None = None,
               prompt_id: str | None = None) -> EmbeddingSequence:
    """Embed a prompt into a per-token vector sequence.

    ``hashed_bow`` maps each token position to a signed one-hot at a stable
    hash slot, which is deterministic across processes. The ``file`` provider
    returns a vector sequence looked up verbatim from a preloaded table.
    """
    if provider == "file":
        if table is None:
            raise ValueError("file provider requires a loaded embedding table")
        key = prompt_id if prompt_id is not None else prompt
        if key not in table:
            raise KeyError(f"no embedding for prompt id {key!r}")
        return EmbeddingSequence(np.asarray(table[key]), provider_id="file")
    if provider != "hashed_bow":
        raise ValueError(f"unknown embedding provider {provider!r}")
    tokens = _tokenize(prompt)
    if not tokens:
        raise ValueError("cannot embed an empty prompt")
    vectors = np.zeros((len(tokens), dim))
    for i, token in enumerate(tokens):
        slot, sign = _token_slot(token, dim)
        vectors[i, slot] += sign
    return EmbeddingSequence(vectors, provider_id=f"hashed_bow:{dim}")


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """Load a JSON-lines table of {prompt_id, vectors: [[...]]} records."""
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            table[rec["prompt_id"]] = np.asarray(rec["vectors"], dtype=np.float64)
    return table


POOL_STRATEGIES = ("mean", "max", "first", "last")


def pool(seq: EmbeddingSequence, strategy: str) -> np.ndarray:
    """Collapse the token axis with one of the four pooling strategies."""
    v = seq.vectors
    if strategy == "mean":
        return v.mean(axis=0)
    if strategy == "max":
        return v.max(axis=0)
    if strategy == "first":
        return v[0].copy()
    if strategy == "last":
        return v[-1].copy()
    raise ValueError(f"unknown pooling strategy {strategy!r}")


def _stack(vectors) -> np.ndarray:
    arr = np.asarray(list(vectors), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a batch of equal-dimension vectors")
    return arr


def batch_diversity(raw) -> float:
    """Mean per-dimension population standard deviation across the batch."""
    arr = _stack(raw)
    if arr.shape[0] < 2:
        raise ValueError("batch_diversity needs at least 2 vectors")
    return float(arr.std(axis=0, ddof=0).mean())


def embedding_richness(raw) -> float:
    """Mean within-vector population standard deviation across dimensions."""
    arr = _stack(raw)
    if arr.shape[1] < 2:
        raise ValueError("embedding_richness needs dimension >= 2")
    return float(arr.std(axis=1, ddof=0).mean())


def semantic_separation(vectors, classes) -> float:
    """Within-class minus between-class mean cosine similarity.

    Vectors are L2-normalized here; self-pairs are excluded. Requires at
    least two classes with at least two members each.
    """
    arr = _stack(vectors)
    labels = np.asarray(list(classes))
    if len(labels) != arr.shape[0]:
        raise ValueError("one class label per vector required")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or np.any(counts < 2):
        raise ValueError("need >= 2 classes with >= 2 members each")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    normed = arr / np.maximum(norms, 1e-12)
    sims = normed @ normed.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    within = sims[same & off_diag]
    between = sims[~same]
    return float(within.mean() - between.mean())


_KEYWORDS_CACHE: dict[str, list[str]] | None = None


def _acoustic_keywords() -> dict[str, list[str]]:
    global _KEYWORDS_CACHE
    if _KEYWORDS_CACHE is None:
        raw = resources.files("rirflow.data").joinpath("acoustic_keywords.json").read_text("utf-8")
        _KEYWORDS_CACHE = json.loads(raw)
    return _KEYWORDS_CACHE


ACOUSTIC_CLASSES = ("small_dry", "medium", "large_reverberant")


def classify_acoustic_heuristic(prompt: str, detailed: bool = False):
    """Keyword-table classification of a prompt into a coarse acoustic class.

    Unmatched prompts fall back to ``medium``; ``detailed`` additionally
    reports whether anything matched.
    """
    if not prompt.strip():
        raise ValueError("cannot classify an empty prompt")
    text = " ".join(_tokenize(prompt))
    scores = {name: 0 for name in ACOUSTIC_CLASSES}
    for name, words in _acoustic_keywords().items():
        for word in words:
            if word in text:
                scores[name] += 1
    best = max(scores, key=lambda k: scores[k])
    matched = scores[best] > 0
    label = best if matched else "medium"
    if detailed:
        return label, matched
    return label
