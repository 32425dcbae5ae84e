import json
import struct

import numpy as np
import pytest

from memefusion.archive import read_manifest
from memefusion.backbone import VOCAB_ASSET, load_backbone
from memefusion.backbone.clip_model import ClipArchConfig
from memefusion.convert import (
    convert_clip,
    convert_phi,
    infer_clip_config,
    read_safetensors,
    read_source_tensors,
)
from memefusion.errors import (
    ArgumentError,
    CompatibilityError,
    CorruptionError,
    WeightLoadError,
)
from memefusion.inversion import load_phi

from test_clip_numpy import tiny_weights

# heads are inferred as width // 64 from release checkpoints, so the
# smallest convertible architecture uses width 64 on both towers
CONVERT_TINY = ClipArchConfig(
    embed_dim=12,
    image_resolution=16,
    vision_layers=2,
    vision_width=64,
    vision_patch_size=8,
    context_length=16,
    vocab_size=518,
    text_width=64,
    text_heads=1,
    text_layers=2,
)

MERGE_TEXT = "#version: 0.2\nh e\nhe l\nl o</w>\nhel lo</w>\n"


def _safetensors_bytes(entries) -> bytes:
    """entries: list of (name, dtype_tag, array, raw_bytes)."""
    header = {}
    buffer = b""
    for name, tag, shape, raw in entries:
        header[name] = {"dtype": tag, "shape": shape,
                        "data_offsets": [len(buffer), len(buffer) + len(raw)]}
        buffer += raw
    blob = json.dumps(header).encode()
    return struct.pack("<Q", len(blob)) + blob + buffer


def test_read_safetensors_hand_written(tmp_path):
    f32 = np.array([[1.5, -2.0], [0.25, 3.0]], dtype="<f4")
    f16 = np.array([1.0, -0.5, 2.0], dtype="<f2")
    i64 = np.array([7, -3], dtype="<i8")
    path = tmp_path / "w.safetensors"
    path.write_bytes(_safetensors_bytes([
        ("a", "F32", [2, 2], f32.tobytes()),
        ("b", "F16", [3], f16.tobytes()),
        ("c", "I64", [2], i64.tobytes()),
    ]))
    tensors = read_safetensors(path)
    np.testing.assert_array_equal(tensors["a"], f32)
    np.testing.assert_array_equal(tensors["b"], f16)
    np.testing.assert_array_equal(tensors["c"], i64)


def test_read_safetensors_widens_bf16(tmp_path):
    values = np.array([1.0, -2.5, 0.15625, 3.0], dtype=np.float32)
    u16 = (values.view(np.uint32) >> 16).astype("<u2")
    path = tmp_path / "w.safetensors"
    path.write_bytes(_safetensors_bytes([("x", "BF16", [4], u16.tobytes())]))
    tensors = read_safetensors(path)
    assert tensors["x"].dtype == np.float32
    np.testing.assert_array_equal(tensors["x"], values)


def test_read_safetensors_skips_metadata_block(tmp_path):
    arr = np.zeros(2, dtype="<f4")
    header = {"__metadata__": {"format": "pt"},
              "x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}
    blob = json.dumps(header).encode()
    path = tmp_path / "w.safetensors"
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + arr.tobytes())
    assert set(read_safetensors(path)) == {"x"}


def test_read_safetensors_corruption(tmp_path):
    short = tmp_path / "short.safetensors"
    short.write_bytes(b"\x01\x02")
    with pytest.raises(CorruptionError):
        read_safetensors(short)

    overlong = tmp_path / "overlong.safetensors"
    overlong.write_bytes(struct.pack("<Q", 10_000) + b"{}")
    with pytest.raises(CorruptionError):
        read_safetensors(overlong)

    badjson = tmp_path / "badjson.safetensors"
    blob = b"not json at all!!"
    badjson.write_bytes(struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(CorruptionError):
        read_safetensors(badjson)

    truncated = tmp_path / "trunc.safetensors"
    header = {"x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}
    hb = json.dumps(header).encode()
    truncated.write_bytes(struct.pack("<Q", len(hb)) + hb + b"\x00" * 8)
    with pytest.raises(CorruptionError):
        read_safetensors(truncated)


def test_read_safetensors_unsupported_dtype(tmp_path):
    path = tmp_path / "w.safetensors"
    path.write_bytes(_safetensors_bytes([("x", "F8_E4M3", [2], b"\x00\x00")]))
    with pytest.raises(CompatibilityError):
        read_safetensors(path)


def test_read_source_tensors_dispatch(tmp_path):
    arrs = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    npz = tmp_path / "w.npz"
    np.savez(npz, **arrs)
    loaded = read_source_tensors(npz)
    np.testing.assert_array_equal(loaded["w"], arrs["w"])

    with pytest.raises(WeightLoadError):
        read_source_tensors(tmp_path / "missing.npz")

    odd = tmp_path / "w.onnx"
    odd.write_bytes(b"x")
    with pytest.raises(ArgumentError):
        read_source_tensors(odd)


def test_torch_pickle_without_torch(tmp_path):
    try:
        import torch  # noqa: F401
        pytest.skip("torch installed; the advisory error path is unreachable")
    except ImportError:
        pass
    pt = tmp_path / "w.pt"
    pt.write_bytes(b"PK\x03\x04")
    with pytest.raises(ArgumentError, match="re-export"):
        read_source_tensors(pt)


def _clip_npz(tmp_path, name="src.npz", drop=(), extra=None, mutate=None):
    weights = {k: v.astype(np.float32) for k, v in tiny_weights(CONVERT_TINY).items()}
    for key in drop:
        del weights[key]
    if extra:
        weights.update(extra)
    if mutate:
        mutate(weights)
    path = tmp_path / name
    np.savez(path, **weights)
    return path, weights


def test_infer_clip_config_from_shapes(tmp_path):
    _, weights = _clip_npz(tmp_path)
    assert infer_clip_config(weights) == CONVERT_TINY


def test_infer_clip_config_errors(tmp_path):
    with pytest.raises(CompatibilityError, match="missing"):
        infer_clip_config({"token_embedding.weight": np.zeros((4, 4))})

    def bad_grid(w):
        w["visual.positional_embedding"] = w["visual.positional_embedding"][:4]

    _, weights = _clip_npz(tmp_path, mutate=bad_grid)
    with pytest.raises(CompatibilityError, match="grid"):
        infer_clip_config(weights)

    def sparse_blocks(w):
        for key in list(w):
            if key.startswith("visual.transformer.resblocks.0."):
                del w[key]

    _, weights = _clip_npz(tmp_path, mutate=sparse_blocks)
    with pytest.raises(CompatibilityError, match="dense"):
        infer_clip_config(weights)


def _vocab_file(tmp_path, text=MERGE_TEXT):
    path = tmp_path / "merges.txt"
    path.write_text(text)
    return path


def test_convert_clip_round_trip(tmp_path):
    src, weights = _clip_npz(tmp_path, extra={
        # release-checkpoint buffers the forward pass never reads
        "logit_scale": np.array(4.6, dtype=np.float32),
        "input_resolution": np.array(16.0, dtype=np.float32),
        "context_length": np.array(16.0, dtype=np.float32),
        "vocab_size": np.array(518.0, dtype=np.float32),
    })
    vocab = _vocab_file(tmp_path)
    out = convert_clip(src, tmp_path / "archive", vocab, name="tiny")

    manifest = read_manifest(out)
    assert manifest["kind"] == "backbone"
    meta = manifest["meta"]
    assert meta["name"] == "tiny"
    assert meta["vocab_file"] == VOCAB_ASSET
    assert meta["embed_dim"] == 12 and meta["vocab_size"] == 518
    assert (out / VOCAB_ASSET).is_file()
    assert "logit_scale" not in manifest["tensors"]

    backbone = load_backbone("pretrained", out)
    assert backbone.meta.d == 12
    assert backbone.meta.context_len == 16
    feat = backbone.encode_text("hello")
    assert feat.values.shape == (12,)
    assert np.all(np.isfinite(feat.values))


def test_convert_clip_is_byte_deterministic(tmp_path):
    src, _ = _clip_npz(tmp_path)
    vocab = _vocab_file(tmp_path)
    a = convert_clip(src, tmp_path / "a", vocab)
    b = convert_clip(src, tmp_path / "b", vocab)
    for name in ("manifest.json", "tensors.bin", VOCAB_ASSET):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_convert_clip_validation(tmp_path):
    vocab = _vocab_file(tmp_path)

    src, _ = _clip_npz(tmp_path, "missing.npz", drop=("ln_final.bias",))
    with pytest.raises(CompatibilityError, match="missing"):
        convert_clip(src, tmp_path / "o1", vocab)

    src, _ = _clip_npz(tmp_path, "extra.npz",
                       extra={"surprise.weight": np.zeros(3, dtype=np.float32)})
    with pytest.raises(CompatibilityError, match="unexpected"):
        convert_clip(src, tmp_path / "o2", vocab)

    src, _ = _clip_npz(tmp_path, "ok.npz")
    short_vocab = tmp_path / "short.txt"
    short_vocab.write_text("#version: 0.2\nh e\nhe l\nl o</w>\n")
    with pytest.raises(CompatibilityError, match="vocab"):
        convert_clip(src, tmp_path / "o3", short_vocab)


def test_convert_phi_renumbers_sparse_layers(tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "phi.npz"
    # torch Sequential indices count activations: 0, 3, 6 -> dense 0, 1, 2
    np.savez(
        src,
        **{
            "0.weight": rng.normal(size=(8, 6)).astype(np.float32),
            "0.bias": rng.normal(size=8).astype(np.float32),
            "3.weight": rng.normal(size=(8, 8)).astype(np.float32),
            "3.bias": rng.normal(size=8).astype(np.float32),
            "6.weight": rng.normal(size=(4, 8)).astype(np.float32),
            "6.bias": rng.normal(size=4).astype(np.float32),
        },
    )
    out = convert_phi(src, tmp_path / "phi_archive")
    manifest = read_manifest(out)
    assert manifest["kind"] == "phi"
    assert manifest["meta"] == {"name": "phi", "activation": "gelu", "d": 6, "w": 4}
    assert sorted(manifest["tensors"]) == [
        "phi.0.bias", "phi.0.weight", "phi.1.bias", "phi.1.weight",
        "phi.2.bias", "phi.2.weight",
    ]

    phi = load_phi("pretrained", out)
    assert phi.d == 6 and phi.w == 4 and len(phi.weights) == 3
    x = np.random.default_rng(1).normal(size=6)
    assert np.all(np.isfinite(phi(x)))


def test_convert_phi_accepts_prefixed_names(tmp_path):
    src = tmp_path / "phi.npz"
    np.savez(src, **{
        "model.0.weight": np.zeros((4, 4), dtype=np.float32),
        "model.0.bias": np.zeros(4, dtype=np.float32),
    })
    out = convert_phi(src, tmp_path / "archive", activation="identity")
    manifest = read_manifest(out)
    assert manifest["meta"]["activation"] == "identity"
    assert sorted(manifest["tensors"]) == ["phi.0.bias", "phi.0.weight"]


def test_convert_phi_validation(tmp_path):
    bad_name = tmp_path / "bad_name.npz"
    np.savez(bad_name, **{"encoder.weight": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(CompatibilityError, match="unrecognized"):
        convert_phi(bad_name, tmp_path / "o1")

    no_bias = tmp_path / "no_bias.npz"
    np.savez(no_bias, **{"0.weight": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(CompatibilityError, match="weight and bias"):
        convert_phi(no_bias, tmp_path / "o2")

    bad_rank = tmp_path / "bad_rank.npz"
    np.savez(bad_rank, **{
        "0.weight": np.zeros((2, 2, 2), dtype=np.float32),
        "0.bias": np.zeros(2, dtype=np.float32),
    })
    with pytest.raises(CompatibilityError, match="shapes"):
        convert_phi(bad_rank, tmp_path / "o3")
