"""Deterministic mock backbone for desk-scale runs and tests.

Visual path: 8x8 grayscale downsample -> fixed seeded random projection ->
tanh. Text path: seeded random embedding table, then a mean-pool over all
occupied rows -> fixed seeded random projection -> tanh "encoder". Cheap,
content-deterministic, sensitive to every token row, and linearly
informative about the synthetic cue patterns.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from ..errors import ImageDecodeError, VocabularyError
from .base import Backbone, BackboneMeta, FeatureVector, TokenEmbeddingSequence, TokenizerStats

MOCK_VOCAB_SIZE = 4096
_PAD_ID = 0
_SOT_ID = 1
_EOT_ID = 2
_FIRST_WORD_ID = 3

_PATCH_GRID = 8


def _word_id(word: str) -> int:
    digest = hashlib.md5(word.encode("utf-8")).digest()
    span = MOCK_VOCAB_SIZE - _FIRST_WORD_ID
    return _FIRST_WORD_ID + int.from_bytes(digest[:8], "little") % span


class MockBackbone(Backbone):
    def __init__(self, seed: int = 0, d: int = 32, w: int = 32, context_len: int = 77):
        self.seed = int(seed)
        self.meta = BackboneMeta(d=d, w=w, context_len=context_len, name=f"mock-{d}")
        self.stats = TokenizerStats()
        self.sot_id = _SOT_ID
        self.eot_id = _EOT_ID
        self.vocab_size = MOCK_VOCAB_SIZE

        n_pix = _PATCH_GRID * _PATCH_GRID
        vis_rng = np.random.default_rng([self.seed, 11])
        emb_rng = np.random.default_rng([self.seed, 22])
        txt_rng = np.random.default_rng([self.seed, 33])
        self._w_vis = (vis_rng.standard_normal((d, n_pix)) / np.sqrt(n_pix)).astype(np.float32)
        self._emb = emb_rng.standard_normal((MOCK_VOCAB_SIZE, w)).astype(np.float32)
        self._w_txt = (txt_rng.standard_normal((d, w)) / np.sqrt(w)).astype(np.float32)

    # -- visual ---------------------------------------------------------

    def encode_image(self, image) -> FeatureVector:
        arr = self._to_array(image)
        gray = arr.astype(np.float32).mean(axis=2)
        small = Image.fromarray(gray, mode="F").resize(
            (_PATCH_GRID, _PATCH_GRID), Image.BILINEAR
        )
        pixels = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0 - 0.5
        feat = np.tanh(self._w_vis.astype(np.float64) @ pixels)
        return FeatureVector(values=feat, modality="visual")

    @staticmethod
    def _to_array(image) -> np.ndarray:
        if isinstance(image, np.ndarray):
            if image.ndim == 2:
                image = np.repeat(image[:, :, None], 3, axis=2)
            if image.ndim != 3 or image.shape[2] != 3:
                raise ImageDecodeError(f"expected (H, W, 3) pixels, got shape {image.shape}")
            return image
        if isinstance(image, Image.Image):
            return np.asarray(image.convert("RGB"))
        raise ImageDecodeError(f"cannot interpret {type(image).__name__} as an image")

    # -- text -----------------------------------------------------------

    def tokenize_content(self, text: str) -> list[int]:
        words = [w for w in _split_words(text)]
        return [_word_id(w) for w in words]

    def embed_tokens(self, token_ids) -> TokenEmbeddingSequence:
        ids = list(token_ids)
        for tid in ids:
            if not 0 <= tid < self.vocab_size:
                raise VocabularyError(f"token id {tid} outside vocabulary [0, {self.vocab_size})")
        rows = self._emb[ids].astype(np.float64)
        eot = ids.index(self.eot_id) if self.eot_id in ids else len(ids) - 1
        return TokenEmbeddingSequence(embeddings=rows, length=len(ids), eot_index=eot)

    def encode_token_embeddings_with_cache(self, seq: TokenEmbeddingSequence):
        rows = self._check_seq(seq)
        pooled = rows.mean(axis=0)
        pre = self._w_txt.astype(rows.dtype) @ pooled
        feat = np.tanh(pre)
        cache = {"length": seq.length, "feat": feat}
        return FeatureVector(values=feat, modality="textual"), cache

    def encode_token_embeddings_backward(self, cache, dfeat: np.ndarray) -> np.ndarray:
        feat = cache["feat"]
        dpre = np.asarray(dfeat) * (1.0 - feat * feat)
        dpooled = self._w_txt.astype(dpre.dtype).T @ dpre
        length = cache["length"]
        return np.tile(dpooled / length, (length, 1))

    # -- state ----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {
            "mock.visual_projection": self._w_vis,
            "mock.token_embedding": self._emb,
            "mock.text_projection": self._w_txt,
        }


def _split_words(text: str):
    import re

    return re.findall(r"[^\W_]+", text.lower(), flags=re.UNICODE)
