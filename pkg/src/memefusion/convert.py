"""Converters from public release checkpoints to weight archives.

Accepted source containers: ``.safetensors`` (parsed natively), ``.npz``,
and torch pickles (``.pt``/``.pth``/``.bin``, only when torch happens to be
installed; it is not a dependency). The dual-encoder converter also copies
the tokenizer's merge table into the archive, since the tokenizer is part
of the model contract.
"""

from __future__ import annotations

import gzip
import json
import re
import shutil
import struct
from pathlib import Path

import numpy as np

from .archive import write_archive
from .backbone import VOCAB_ASSET
from .backbone.bpe import REFERENCE_MERGE_LIMIT, load_merges
from .backbone.clip_model import ClipArchConfig, expected_tensor_names
from .errors import ArgumentError, CompatibilityError, CorruptionError, WeightLoadError

_SAFETENSORS_DTYPES = {
    "F64": np.float64,
    "F32": np.float32,
    "F16": np.float16,
    "BF16": None,  # widened manually below
    "I64": np.int64,
    "I32": np.int32,
}


def read_safetensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CorruptionError(f"{path}: too short to hold a safetensors header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CorruptionError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable safetensors header: {exc}") from exc
    buffer = raw[8 + header_len :]
    tensors = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        start, end = entry["data_offsets"]
        if end > len(buffer) or start > end:
            raise CorruptionError(f"{path}: tensor '{name}' offsets exceed the data buffer")
        dtype_tag = entry["dtype"]
        if dtype_tag == "BF16":
            u16 = np.frombuffer(buffer[start:end], dtype="<u2")
            widened = (u16.astype(np.uint32) << 16).view(np.float32)
            arr = widened.reshape(entry["shape"])
        else:
            dtype = _SAFETENSORS_DTYPES.get(dtype_tag)
            if dtype is None:
                raise CompatibilityError(f"{path}: unsupported safetensors dtype {dtype_tag}")
            arr = np.frombuffer(buffer[start:end], dtype=np.dtype(dtype).newbyteorder("<"))
            arr = arr.reshape(entry["shape"])
        tensors[name] = np.asarray(arr)
    return tensors


def read_source_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise WeightLoadError(f"weight source not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".safetensors":
        return read_safetensors(path)
    if suffix == ".npz":
        try:
            with np.load(path, allow_pickle=False) as npz:
                return {name: np.asarray(npz[name]) for name in npz.files}
        except (ValueError, OSError, KeyError) as exc:
            raise CorruptionError(f"cannot read npz archive {path}: {exc}") from exc
    if suffix in (".pt", ".pth", ".bin"):
        try:
            import torch
        except ImportError:
            raise ArgumentError(
                f"{path} is a torch pickle and torch is not installed; "
                "re-export the weights as .safetensors or .npz first") from None
        try:
            state = torch.load(path, map_location="cpu")
        except Exception as exc:
            raise CorruptionError(f"cannot unpickle torch checkpoint {path}: {exc}") from exc
        if hasattr(state, "state_dict"):
            state = state.state_dict()
        if "state_dict" in state and isinstance(state["state_dict"], dict):
            state = state["state_dict"]
        return {k: v.detach().cpu().numpy() for k, v in state.items()
                if hasattr(v, "detach")}
    raise ArgumentError(f"unsupported weight container {path.suffix!r} (use .safetensors/.npz/.pt)")


# Buffers the release checkpoints carry that the forward pass never reads.
_CLIP_IGNORED = re.compile(
    r"^(logit_scale|input_resolution|context_length|vocab_size"
    r"|.*\.attn\.in_proj\.(weight|bias)|.*num_batches_tracked)$"
)


def infer_clip_config(tensors: dict) -> ClipArchConfig:
    try:
        conv = tensors["visual.conv1.weight"]
        vis_pos = tensors["visual.positional_embedding"]
        token_emb = tensors["token_embedding.weight"]
        text_proj = tensors["text_projection"]
        txt_pos = tensors["positional_embedding"]
    except KeyError as exc:
        raise CompatibilityError(f"source is not a dual-encoder checkpoint; missing {exc}") from None

    def count_layers(prefix):
        pat = re.compile(re.escape(prefix) + r"\.resblocks\.(\d+)\.")
        idx = {int(m.group(1)) for k in tensors if (m := pat.match(k))}
        if not idx or idx != set(range(max(idx) + 1)):
            raise CompatibilityError(f"{prefix} resblocks are not a dense 0..n range: {sorted(idx)}")
        return max(idx) + 1

    patch = int(conv.shape[2])
    grid = int(round(np.sqrt(vis_pos.shape[0] - 1)))
    if grid * grid + 1 != vis_pos.shape[0]:
        raise CompatibilityError(
            f"visual positional embedding rows {vis_pos.shape[0]} are not grid^2 + 1")
    return ClipArchConfig(
        embed_dim=int(text_proj.shape[1]),
        image_resolution=grid * patch,
        vision_layers=count_layers("visual.transformer"),
        vision_width=int(conv.shape[0]),
        vision_patch_size=patch,
        context_length=int(txt_pos.shape[0]),
        vocab_size=int(token_emb.shape[0]),
        text_width=int(token_emb.shape[1]),
        text_heads=int(token_emb.shape[1]) // 64,
        text_layers=count_layers("transformer"),
    )


def _write_vocab_asset(vocab_path, out_dir: Path) -> None:
    vocab_path = Path(vocab_path)
    if not vocab_path.is_file():
        raise WeightLoadError(f"tokenizer vocab not found: {vocab_path}")
    target = out_dir / VOCAB_ASSET
    if vocab_path.suffix == ".gz":
        shutil.copyfile(vocab_path, target)
    else:
        data = vocab_path.read_bytes()
        # mtime pinned so converted archives are byte-stable
        with open(target, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(data)


def convert_clip(source, out_dir, vocab, name: str = "clip", merge_limit=REFERENCE_MERGE_LIMIT) -> Path:
    """Build a backbone archive from a release checkpoint + merge table."""
    raw = read_source_tensors(source)
    tensors = {k: v for k, v in raw.items() if not _CLIP_IGNORED.match(k)}
    config = infer_clip_config(tensors)
    expected = set(expected_tensor_names(config))
    present = set(tensors)
    if present != expected:
        missing = sorted(expected - present)[:8]
        unexpected = sorted(present - expected)[:8]
        raise CompatibilityError(
            f"source tensors do not form the expected architecture; "
            f"missing {missing}, unexpected {unexpected}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Validate the merge table before writing anything else.
    merges = load_merges(vocab, limit=merge_limit)
    vocab_size = 2 * 256 + len(merges) + 2
    if vocab_size != config.vocab_size:
        raise CompatibilityError(
            f"merge table yields vocab {vocab_size}, checkpoint expects {config.vocab_size}")
    meta = config.to_meta()
    meta.update(name=name, vocab_file=VOCAB_ASSET, merge_limit=merge_limit)
    write_archive(out_dir, tensors, kind="backbone", meta=meta)
    _write_vocab_asset(vocab, out_dir)
    return out_dir


_PHI_LAYER = re.compile(r"^(?:phi\.|model\.|layers\.|mlp\.)?(\d+)\.(weight|bias)$")


def convert_phi(source, out_dir, activation: str = "gelu", name: str = "phi") -> Path:
    """Build an inversion-network archive from a release checkpoint.

    Source layer indices may be sparse (torch Sequential counts activation
    and dropout entries); they are renumbered densely in order.
    """
    raw = read_source_tensors(source)
    by_index: dict[int, dict] = {}
    for key, value in raw.items():
        m = _PHI_LAYER.match(key)
        if m is None:
            raise CompatibilityError(f"unrecognized tensor name {key!r} in phi source")
        by_index.setdefault(int(m.group(1)), {})[m.group(2)] = value
    if not by_index:
        raise CompatibilityError("phi source holds no linear layers")
    tensors = {}
    for dense, idx in enumerate(sorted(by_index)):
        entry = by_index[idx]
        if set(entry) != {"weight", "bias"}:
            raise CompatibilityError(f"phi layer {idx} needs both weight and bias")
        if entry["weight"].ndim != 2 or entry["bias"].ndim != 1:
            raise CompatibilityError(f"phi layer {idx} has non-linear shapes")
        tensors[f"{name}.{dense}.weight"] = entry["weight"]
        tensors[f"{name}.{dense}.bias"] = entry["bias"]
    first = tensors[f"{name}.0.weight"]
    last = tensors[f"{name}.{len(by_index) - 1}.weight"]
    meta = {"name": name, "activation": activation,
            "d": int(first.shape[1]), "w": int(last.shape[0])}
    out_dir = Path(out_dir)
    write_archive(out_dir, tensors, kind="phi", meta=meta)
    return out_dir
