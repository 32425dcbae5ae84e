"""Frozen encoder backbones: a deterministic mock and converted CLIP weights."""

from __future__ import annotations

from pathlib import Path

from ..archive import check_tensor_names, read_archive
from ..errors import CompatibilityError, WeightLoadError
from .base import Backbone, BackboneMeta, FeatureVector, TokenEmbeddingSequence, TokenizerStats
from .bpe import REFERENCE_MERGE_LIMIT, BpeTokenizer, load_merges
from .clip_model import VIT_L_14, ClipArchConfig, ClipBackbone, expected_tensor_names
from .mock import MockBackbone

VOCAB_ASSET = "bpe_vocab.txt.gz"


def load_pretrained(source) -> ClipBackbone:
    """Build a ClipBackbone from a converted weight archive directory."""
    source = Path(source)
    manifest, tensors = read_archive(source)
    if manifest.get("kind") != "backbone":
        raise CompatibilityError(f"archive at {source} has kind {manifest.get('kind')!r}, expected 'backbone'")
    meta = manifest.get("meta", {})
    try:
        config = ClipArchConfig(**{k: meta[k] for k in ClipArchConfig.__dataclass_fields__})
    except KeyError as exc:
        raise CompatibilityError(f"archive meta missing architecture field {exc}") from None
    check_tensor_names(manifest, set(expected_tensor_names(config)), f"backbone archive {source}")
    vocab_path = source / meta.get("vocab_file", VOCAB_ASSET)
    if not vocab_path.is_file():
        raise WeightLoadError(f"archive is missing its tokenizer vocab: {vocab_path}")
    merges = load_merges(vocab_path, limit=meta.get("merge_limit", REFERENCE_MERGE_LIMIT))
    tokenizer = BpeTokenizer(merges)
    return ClipBackbone(tensors, config, tokenizer, name=meta.get("name", "clip"))


def load_backbone(kind: str, source=None, seed: int = 0) -> Backbone:
    """Dispatch on config: kind 'mock' needs only a seed, 'pretrained' a path."""
    if kind == "mock":
        return MockBackbone(seed=seed)
    if kind == "pretrained":
        if source is None:
            raise WeightLoadError("backbone.kind 'pretrained' requires backbone.source")
        return load_pretrained(source)
    from ..errors import ConfigError
    raise ConfigError("backbone.kind", f"unknown backbone kind {kind!r} (expected 'mock' or 'pretrained')")


__all__ = [
    "Backbone",
    "BackboneMeta",
    "BpeTokenizer",
    "ClipArchConfig",
    "ClipBackbone",
    "FeatureVector",
    "MockBackbone",
    "TokenEmbeddingSequence",
    "TokenizerStats",
    "VIT_L_14",
    "VOCAB_ASSET",
    "expected_tensor_names",
    "load_backbone",
    "load_merges",
    "load_pretrained",
]
