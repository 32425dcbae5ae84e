"""Frozen encoder contract shared by the pretrained and mock backbones.

The text side is deliberately split into tokenize -> embedding lookup ->
encode-over-embeddings: prompt construction needs to splice a pseudo-word
vector into the token embedding space before the contextual encoder runs,
so the embedding-level entry point is the primitive and the string-level
``encode_text`` is derived from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class BackboneMeta:
    d: int              # joint-embedding dimension
    w: int              # token-embedding dimension
    context_len: int    # max token positions
    name: str

    def __post_init__(self):
        if self.d <= 0 or self.w <= 0:
            raise ShapeError(f"dimensions must be positive, got d={self.d}, w={self.w}")
        if self.context_len < 8:
            raise ShapeError(f"context_len must be >= 8, got {self.context_len}")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    modality: str  # "visual" | "textual"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ShapeError(f"feature vector must be 1-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("feature vector contains non-finite entries")
        if self.modality not in ("visual", "textual"):
            raise ShapeError(f"unknown modality '{self.modality}'")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class TokenEmbeddingSequence:
    """Occupied token-embedding rows of one prompt: (length, w)."""

    embeddings: np.ndarray
    length: int
    eot_index: int

    def __post_init__(self):
        e = np.asarray(self.embeddings)
        if e.ndim != 2:
            raise ShapeError(f"embeddings must be 2-d, got shape {e.shape}")
        if self.length != e.shape[0]:
            raise ShapeError(f"length {self.length} != embedding rows {e.shape[0]}")
        if not 0 <= self.eot_index < self.length:
            raise ShapeError(f"eot_index {self.eot_index} outside [0, {self.length})")
        object.__setattr__(self, "embeddings", e)


class TokenizerStats:
    """Operational counters, excluded from weight immutability contracts."""

    def __init__(self):
        self.truncations = 0


class Backbone:
    """Read-only encoder pair with an explicit token-embedding text path.

    Implementations populate ``meta`` and keep all weights immutable after
    construction; ``stats`` counts lossy tokenizer truncations.
    """

    meta: BackboneMeta
    stats: TokenizerStats
    sot_id: int
    eot_id: int

    def encode_image(self, image) -> FeatureVector:
        raise NotImplementedError

    def tokenize(self, text: str) -> list[int]:
        """Full token-id sequence: SOT + content + EOT, truncated to fit."""
        ids = [self.sot_id] + self.tokenize_content(text) + [self.eot_id]
        if len(ids) > self.meta.context_len:
            ids = ids[: self.meta.context_len - 1] + [self.eot_id]
            self.stats.truncations += 1
        return ids

    def tokenize_content(self, text: str) -> list[int]:
        """Content token ids only (no SOT/EOT, no truncation)."""
        raise NotImplementedError

    def embed_tokens(self, token_ids) -> TokenEmbeddingSequence:
        raise NotImplementedError

    def encode_token_embeddings(self, seq: TokenEmbeddingSequence) -> FeatureVector:
        feat, _ = self.encode_token_embeddings_with_cache(seq)
        return feat

    def encode_token_embeddings_with_cache(self, seq: TokenEmbeddingSequence):
        """Forward pass keeping the intermediates needed for an input gradient."""
        raise NotImplementedError

    def encode_token_embeddings_backward(self, cache, dfeat: np.ndarray) -> np.ndarray:
        """d(loss)/d(embedding rows) given d(loss)/d(feature). Shape (length, w)."""
        raise NotImplementedError

    def encode_text(self, text: str) -> FeatureVector:
        """Derived one-shot path; exactly the factorized composition."""
        return self.encode_token_embeddings(self.embed_tokens(self.tokenize(text)))

    def state_tensors(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def state_hash(self) -> str:
        from ..archive import hash_tensors

        return hash_tensors(self.state_tensors())

    def _check_seq(self, seq: TokenEmbeddingSequence) -> np.ndarray:
        e = np.asarray(seq.embeddings)
        if e.shape[1] != self.meta.w:
            raise ShapeError(f"embedding width {e.shape[1]} != backbone w {self.meta.w}")
        if seq.length > self.meta.context_len:
            raise ShapeError(f"sequence length {seq.length} exceeds context {self.meta.context_len}")
        return e
