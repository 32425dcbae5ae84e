"""Textual inversion: image -> pseudo-word token -> multimodal prompt.

The frozen network phi maps a visual feature to a vector living in the
token-embedding space; that vector is spliced into the prompt
"a photo of <pseudo>, {meme text}" at the embedding level before the
contextual text encoder runs. Training phi is out of scope: it is loaded
from a converted release archive or stubbed with a seeded linear map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .archive import read_archive
from .backbone.base import Backbone, FeatureVector, TokenEmbeddingSequence
from .errors import ArgumentError, CompatibilityError, ConfigError, ShapeError, WeightLoadError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass(frozen=True)
class PseudoToken:
    """The inverted image: one vector in the token-embedding space."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ShapeError(f"pseudo token must be 1-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("pseudo token contains non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PromptTemplate:
    prefix: str = "a photo of"
    separator: str = ", "

    def __post_init__(self):
        if not self.prefix.strip():
            raise ArgumentError("prompt prefix must be non-empty")


DEFAULT_TEMPLATE = PromptTemplate()


class PhiNetwork:
    """Frozen feed-forward map R^d -> R^w.

    Layers are (weight, bias) pairs applied as weight @ x + bias with the
    configured activation between layers (never after the last). Always
    frozen; the only gradient it ever produces is with respect to its
    input, needed when the phi-adaptation projection sits upstream.
    """

    def __init__(self, weights, biases, activation: str = "gelu", name: str = "phi"):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("phi needs matching non-empty weight/bias lists")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ShapeError(f"phi layer {i} input dim {weights[i].shape[1]} != previous output {weights[i - 1].shape[0]}")
        if activation not in ("gelu", "identity"):
            raise ConfigError("phi.activation", f"unknown activation {activation!r}")
        self.weights = [np.asarray(w) for w in weights]
        self.biases = [np.asarray(b) for b in biases]
        self.activation = activation
        self.name = name
        self.frozen = True

    @property
    def d(self) -> int:
        return self.weights[0].shape[1]

    @property
    def w(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        pres = []
        h = np.asarray(x)
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            h = wt @ h + b
            if i < len(self.weights) - 1:
                pres.append(h)
                h = _gelu(h) if self.activation == "gelu" else h
        if cache is not None:
            cache["pres"] = pres
        return h

    def input_backward(self, dout: np.ndarray, cache: dict) -> np.ndarray:
        dh = np.asarray(dout)
        pres = cache["pres"]
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                pre = pres[i]
                dh = dh * _gelu_grad(pre) if self.activation == "gelu" else dh
            dh = self.weights[i].T @ dh
        return dh

    __call__ = forward

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.{i}.weight"] = wt
            out[f"{self.name}.{i}.bias"] = b
        return out

    def state_hash(self) -> str:
        from .archive import hash_tensors

        return hash_tensors(self.state_tensors())

    @classmethod
    def stub(cls, d: int, w: int, seed: int = 0) -> "PhiNetwork":
        """Single linear layer: exact identity when d == w, seeded otherwise."""
        if d == w:
            weight = np.eye(w, dtype=np.float32)
        else:
            rng = np.random.default_rng([int(seed), 77])
            bound = 1.0 / np.sqrt(d)
            weight = rng.uniform(-bound, bound, size=(w, d)).astype(np.float32)
        return cls([weight], [np.zeros(w, dtype=np.float32)], activation="identity", name="phi")

    @classmethod
    def zero(cls, d: int, w: int) -> "PhiNetwork":
        return cls(
            [np.zeros((w, d), dtype=np.float32)],
            [np.zeros(w, dtype=np.float32)],
            activation="identity",
            name="phi",
        )


def load_phi_archive(source) -> PhiNetwork:
    source = Path(source)
    manifest, tensors = read_archive(source)
    if manifest.get("kind") != "phi":
        raise CompatibilityError(f"archive at {source} has kind {manifest.get('kind')!r}, expected 'phi'")
    meta = manifest.get("meta", {})
    name = meta.get("name", "phi")
    weights, biases = [], []
    while f"{name}.{len(weights)}.weight" in tensors:
        wkey, bkey = f"{name}.{len(weights)}.weight", f"{name}.{len(biases)}.bias"
        if bkey not in tensors:
            raise CompatibilityError(f"phi archive has {wkey} but no {bkey}")
        weights.append(tensors[wkey])
        biases.append(tensors[bkey])
    if not weights or len(tensors) != 2 * len(weights):
        raise CompatibilityError(f"phi archive tensor names do not form a dense layer stack: {sorted(tensors)}")
    return PhiNetwork(weights, biases, activation=meta.get("activation", "gelu"), name=name)


def load_phi(kind: str, source=None, d: int | None = None, w: int | None = None, seed: int = 0) -> PhiNetwork:
    if kind == "mock":
        if d is None or w is None:
            raise ConfigError("phi", "mock phi requires the backbone dimensions d and w")
        return PhiNetwork.stub(d, w, seed=seed)
    if kind == "pretrained":
        if source is None:
            raise WeightLoadError("phi.kind 'pretrained' requires phi.source")
        return load_phi_archive(source)
    raise ConfigError("phi.kind", f"unknown phi kind {kind!r} (expected 'mock' or 'pretrained')")


def invert(visual: FeatureVector, phi: PhiNetwork, cache: dict | None = None) -> PseudoToken:
    """v = phi(V_E(I)): pure in (visual, phi parameters)."""
    values = np.asarray(visual.values if isinstance(visual, FeatureVector) else visual)
    if values.shape != (phi.d,):
        raise ShapeError(f"visual feature length {values.shape} != phi input dim {phi.d}")
    return PseudoToken(values=phi.forward(values, cache=cache))


def pseudo_slot_index(template: PromptTemplate, backbone: Backbone) -> int:
    """Prompt position of the pseudo token: right after SOT + prefix."""
    prefix_ids = backbone.tokenize_content(template.prefix)
    if not prefix_ids:
        raise ArgumentError(f"template prefix {template.prefix!r} tokenizes to zero tokens")
    return 1 + len(prefix_ids)


def prompt_token_ids(
    meme_text: str,
    backbone: Backbone,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> tuple[list[int], list[int]]:
    """Token ids around the pseudo slot: ([SOT, prefix], [tail..., EOT]).

    Truncation applies to the meme-text tail only; SOT, prefix, the pseudo
    slot, and EOT always survive. Empty meme text drops the separator so
    the prompt ends "...of <pseudo>" with no dangling comma.
    """
    prefix_ids = backbone.tokenize_content(template.prefix)
    if not prefix_ids:
        raise ArgumentError(f"template prefix {template.prefix!r} tokenizes to zero tokens")
    head_ids = [backbone.sot_id] + prefix_ids
    tail_ids = backbone.tokenize_content(template.separator + meme_text) if meme_text else []
    budget = backbone.meta.context_len - len(head_ids) - 2  # pseudo slot + EOT
    if budget < 0:
        raise ShapeError(f"prompt prefix alone exceeds context length {backbone.meta.context_len}")
    if len(tail_ids) > budget:
        tail_ids = tail_ids[:budget]
        backbone.stats.truncations += 1
    return head_ids, tail_ids + [backbone.eot_id]


def assemble_prompt(pseudo_values, head_ids, tail_ids, backbone: Backbone) -> TokenEmbeddingSequence:
    """Splice the pseudo vector between precomputed id runs."""
    values = np.asarray(pseudo_values)
    if values.shape != (backbone.meta.w,):
        raise ShapeError(f"pseudo token shape {values.shape} != ({backbone.meta.w},)")
    head = backbone.embed_tokens(head_ids).embeddings
    tail = backbone.embed_tokens(tail_ids).embeddings
    rows = np.concatenate([head, values.astype(head.dtype)[None, :], tail], axis=0)
    return TokenEmbeddingSequence(
        embeddings=rows, length=rows.shape[0], eot_index=rows.shape[0] - 1
    )


def build_prompt(
    pseudo: PseudoToken,
    meme_text: str,
    backbone: Backbone,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> TokenEmbeddingSequence:
    """Assemble [SOT, prefix, <pseudo>, separator + text, EOT] embeddings."""
    if len(pseudo) != backbone.meta.w:
        raise ShapeError(f"pseudo token length {len(pseudo)} != token-embedding width {backbone.meta.w}")
    head_ids, tail_ids = prompt_token_ids(meme_text, backbone, template)
    return assemble_prompt(pseudo.values, head_ids, tail_ids, backbone)


def encode_multimodal_text(
    image,
    meme_text: str,
    backbone: Backbone,
    phi: PhiNetwork,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> FeatureVector:
    """Text features of the inversion prompt; carry both modalities."""
    pseudo = invert(backbone.encode_image(image), phi)
    seq = build_prompt(pseudo, meme_text, backbone, template)
    return backbone.encode_token_embeddings(seq)
