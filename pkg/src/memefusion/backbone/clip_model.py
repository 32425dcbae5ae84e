"""Pretrained dual-encoder backbone executed in numpy.

Supports the standard ViT CLIP layout (pre-norm transformer blocks,
QuickGELU activations, learned positional embeddings, projection to a
shared space). Weights come from a converted archive; tensors keep the
names used in the public release checkpoints so conversion is a copy.

Only the text tower needs gradients, and only with respect to its input
token embeddings (every weight stays frozen), so the backward pass is a
hand-written input-gradient chain rather than full backprop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ImageDecodeError, ShapeError
from .base import Backbone, BackboneMeta, FeatureVector, TokenizerStats

IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711])
LN_EPS = 1e-5


@dataclass(frozen=True)
class ClipArchConfig:
    embed_dim: int
    image_resolution: int
    vision_layers: int
    vision_width: int
    vision_patch_size: int
    context_length: int
    vocab_size: int
    text_width: int
    text_heads: int
    text_layers: int

    @property
    def vision_heads(self) -> int:
        return self.vision_width // 64

    @property
    def grid_size(self) -> int:
        return self.image_resolution // self.vision_patch_size

    def to_meta(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


VIT_L_14 = ClipArchConfig(
    embed_dim=768,
    image_resolution=224,
    vision_layers=24,
    vision_width=1024,
    vision_patch_size=14,
    context_length=77,
    vocab_size=49408,
    text_width=768,
    text_heads=12,
    text_layers=12,
)


def _block_names(prefix: str, layers: int):
    names = []
    for i in range(layers):
        b = f"{prefix}.resblocks.{i}"
        names += [
            f"{b}.ln_1.weight", f"{b}.ln_1.bias",
            f"{b}.attn.in_proj_weight", f"{b}.attn.in_proj_bias",
            f"{b}.attn.out_proj.weight", f"{b}.attn.out_proj.bias",
            f"{b}.ln_2.weight", f"{b}.ln_2.bias",
            f"{b}.mlp.c_fc.weight", f"{b}.mlp.c_fc.bias",
            f"{b}.mlp.c_proj.weight", f"{b}.mlp.c_proj.bias",
        ]
    return names


def expected_tensor_names(config: ClipArchConfig) -> list[str]:
    names = [
        "visual.class_embedding",
        "visual.positional_embedding",
        "visual.conv1.weight",
        "visual.ln_pre.weight", "visual.ln_pre.bias",
        "visual.ln_post.weight", "visual.ln_post.bias",
        "visual.proj",
        "positional_embedding",
        "token_embedding.weight",
        "ln_final.weight", "ln_final.bias",
        "text_projection",
    ]
    names += _block_names("visual.transformer", config.vision_layers)
    names += _block_names("transformer", config.text_layers)
    return sorted(names)


def layer_norm(x, weight, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * weight + bias, (xhat, inv)


def layer_norm_backward(dout, weight, cache):
    xhat, inv = cache
    dxhat = dout * weight
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def quick_gelu(x):
    return x * _sigmoid(1.702 * x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _quick_gelu_backward(dout, x):
    s = _sigmoid(1.702 * x)
    return dout * (s + 1.702 * x * s * (1.0 - s))


def _split_heads(x, heads):
    length, width = x.shape
    return x.reshape(length, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x):
    heads, length, dh = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * dh)


def attention(x, w, prefix, heads, mask=None, cache=None):
    """Multi-head self-attention over a (length, width) sequence."""
    qkv = x @ w[f"{prefix}.attn.in_proj_weight"].T + w[f"{prefix}.attn.in_proj_bias"]
    width = x.shape[1]
    q = _split_heads(qkv[:, :width], heads)
    k = _split_heads(qkv[:, width: 2 * width], heads)
    v = _split_heads(qkv[:, 2 * width:], heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("hld,hmd->hlm", q, k) * scale
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(np.einsum("hlm,hmd->hld", att, v))
    out = ctx @ w[f"{prefix}.attn.out_proj.weight"].T + w[f"{prefix}.attn.out_proj.bias"]
    if cache is not None:
        cache.update(q=q, k=k, v=v, att=att, scale=scale)
    return out


def attention_input_backward(dout, w, prefix, heads, cache):
    q, k, v, att, scale = cache["q"], cache["k"], cache["v"], cache["att"], cache["scale"]
    dctx = _split_heads(dout @ w[f"{prefix}.attn.out_proj.weight"], heads)
    datt = np.einsum("hld,hmd->hlm", dctx, v)
    dv = np.einsum("hlm,hld->hmd", att, dctx)
    # softmax backward along the key axis
    dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dq = np.einsum("hlm,hmd->hld", dscores, k) * scale
    dk = np.einsum("hlm,hld->hmd", dscores, q) * scale
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1)
    return dqkv @ w[f"{prefix}.attn.in_proj_weight"]


def _mlp(x, w, prefix, cache=None):
    pre = x @ w[f"{prefix}.mlp.c_fc.weight"].T + w[f"{prefix}.mlp.c_fc.bias"]
    hidden = quick_gelu(pre)
    out = hidden @ w[f"{prefix}.mlp.c_proj.weight"].T + w[f"{prefix}.mlp.c_proj.bias"]
    if cache is not None:
        cache["pre"] = pre
    return out


def _mlp_input_backward(dout, w, prefix, cache):
    dhidden = dout @ w[f"{prefix}.mlp.c_proj.weight"]
    dpre = _quick_gelu_backward(dhidden, cache["pre"])
    return dpre @ w[f"{prefix}.mlp.c_fc.weight"]


def transformer_block(x, w, prefix, heads, mask=None, cache=None):
    h1, c1 = layer_norm(x, w[f"{prefix}.ln_1.weight"], w[f"{prefix}.ln_1.bias"])
    att_cache = {} if cache is not None else None
    a = x + attention(h1, w, prefix, heads, mask=mask, cache=att_cache)
    h2, c2 = layer_norm(a, w[f"{prefix}.ln_2.weight"], w[f"{prefix}.ln_2.bias"])
    mlp_cache = {} if cache is not None else None
    y = a + _mlp(h2, w, prefix, cache=mlp_cache)
    if cache is not None:
        cache.update(ln1=c1, ln2=c2, attn=att_cache, mlp=mlp_cache)
    return y


def transformer_block_input_backward(dy, w, prefix, heads, cache):
    dmlp_in = _mlp_input_backward(dy, w, prefix, cache["mlp"])
    da = dy + layer_norm_backward(dmlp_in, w[f"{prefix}.ln_2.weight"], cache["ln2"])
    datt_in = attention_input_backward(da, w, prefix, heads, cache["attn"])
    return da + layer_norm_backward(datt_in, w[f"{prefix}.ln_1.weight"], cache["ln1"])


def causal_mask(length, dtype):
    mask = np.full((length, length), -np.inf, dtype=dtype)
    return np.triu(mask, k=1)


def vision_forward(pixels, w, config: ClipArchConfig):
    """Encode normalized (3, R, R) pixels into the shared space."""
    p = config.vision_patch_size
    g = config.grid_size
    if pixels.shape != (3, config.image_resolution, config.image_resolution):
        raise ShapeError(f"expected (3, {config.image_resolution}, {config.image_resolution}) pixels, got {pixels.shape}")
    # conv1 with stride == kernel == patch size is a matmul over patches
    patches = pixels.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
    kernel = w["visual.conv1.weight"].reshape(config.vision_width, 3 * p * p)
    x = patches @ kernel.T
    cls = w["visual.class_embedding"].reshape(1, config.vision_width)
    x = np.concatenate([cls.astype(x.dtype), x], axis=0)
    x = x + w["visual.positional_embedding"]
    x, _ = layer_norm(x, w["visual.ln_pre.weight"], w["visual.ln_pre.bias"])
    for i in range(config.vision_layers):
        x = transformer_block(x, w, f"visual.transformer.resblocks.{i}", config.vision_heads)
    pooled, _ = layer_norm(x[:1], w["visual.ln_post.weight"], w["visual.ln_post.bias"])
    return (pooled @ w["visual.proj"])[0]


def text_forward(embeddings, eot_index, w, config: ClipArchConfig, cache=None):
    """Encode (length, text_width) token embeddings; read out at EOT."""
    length = embeddings.shape[0]
    x = embeddings + w["positional_embedding"][:length]
    mask = causal_mask(length, x.dtype)
    block_caches = [] if cache is not None else None
    for i in range(config.text_layers):
        c = {} if cache is not None else None
        x = transformer_block(x, w, f"transformer.resblocks.{i}", config.text_heads, mask=mask, cache=c)
        if cache is not None:
            block_caches.append(c)
    final, ln_cache = layer_norm(x, w["ln_final.weight"], w["ln_final.bias"])
    feat = final[eot_index] @ w["text_projection"]
    if cache is not None:
        cache.update(blocks=block_caches, ln_final=ln_cache, length=length, eot_index=eot_index)
    return feat


def text_input_backward(dfeat, w, config: ClipArchConfig, cache):
    length = cache["length"]
    dfinal = np.zeros((length, config.text_width), dtype=dfeat.dtype)
    dfinal[cache["eot_index"]] = w["text_projection"] @ dfeat
    dx = layer_norm_backward(dfinal, w["ln_final.weight"], cache["ln_final"])
    for i in reversed(range(config.text_layers)):
        dx = transformer_block_input_backward(
            dx, w, f"transformer.resblocks.{i}", config.text_heads, cache["blocks"][i]
        )
    return dx


def preprocess_image(image, resolution: int):
    """Resize shorter side, center crop, scale to [0,1], channel normalize."""
    from PIL import Image

    if isinstance(image, np.ndarray):
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=-1)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ImageDecodeError(f"expected (H, W, 3) array, got {image.shape}")
        image = Image.fromarray(image.astype(np.uint8), mode="RGB")
    elif not isinstance(image, Image.Image):
        raise ImageDecodeError(f"cannot preprocess {type(image).__name__}")
    image = image.convert("RGB")
    width, height = image.size
    scale = resolution / min(width, height)
    new_size = (max(resolution, round(width * scale)), max(resolution, round(height * scale)))
    image = image.resize(new_size, Image.Resampling.BICUBIC)
    left = (image.size[0] - resolution) // 2
    top = (image.size[1] - resolution) // 2
    image = image.crop((left, top, left + resolution, top + resolution))
    arr = np.asarray(image, dtype=np.float64) / 255.0
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    return arr.transpose(2, 0, 1)


class ClipBackbone(Backbone):
    """Frozen pretrained encoders over a converted weight archive."""

    def __init__(self, tensors: dict, config: ClipArchConfig, tokenizer, name: str = "clip"):
        self.config = config
        self.tokenizer = tokenizer
        self.weights = tensors
        self._dtype = next(iter(tensors.values())).dtype if tensors else np.float32
        self.meta = BackboneMeta(
            d=config.embed_dim,
            w=config.text_width,
            context_len=config.context_length,
            name=name,
        )
        self.stats = TokenizerStats()
        if tokenizer is not None and len(tokenizer) != config.vocab_size:
            raise ShapeError(
                f"tokenizer vocab {len(tokenizer)} != model vocab {config.vocab_size}"
            )

    @property
    def sot_id(self) -> int:
        return self.tokenizer.sot_id

    @property
    def eot_id(self) -> int:
        return self.tokenizer.eot_id

    def tokenize_content(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def encode_image(self, image) -> FeatureVector:
        pixels = preprocess_image(image, self.config.image_resolution).astype(self._dtype)
        values = vision_forward(pixels, self.weights, self.config)
        return FeatureVector(values=values, modality="visual")

    def embed_tokens(self, token_ids):
        ids = np.asarray(token_ids, dtype=np.int64)
        table = self.weights["token_embedding.weight"]
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            from ..errors import VocabularyError
            raise VocabularyError(f"token id out of range for vocab {table.shape[0]}")
        embeddings = table[ids]
        eot_hits = np.nonzero(ids == self.eot_id)[0]
        eot_index = int(eot_hits[0]) if eot_hits.size else len(ids) - 1
        from .base import TokenEmbeddingSequence
        return TokenEmbeddingSequence(embeddings=embeddings, length=len(ids), eot_index=eot_index)

    def encode_token_embeddings_with_cache(self, seq):
        self._check_seq(seq)
        cache = {}
        feat = text_forward(seq.embeddings, seq.eot_index, self.weights, self.config, cache=cache)
        return FeatureVector(values=feat, modality="textual"), cache

    def encode_token_embeddings_backward(self, cache, dfeat):
        return text_input_backward(np.asarray(dfeat), self.weights, self.config, cache)

    def state_tensors(self) -> dict:
        return dict(self.weights)
