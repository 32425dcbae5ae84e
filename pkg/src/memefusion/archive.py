"""Tensor archive format: a directory holding ``manifest.json`` + ``tensors.bin``.

The same layout backs pretrained weight archives (backbone, inversion
network) and training checkpoints. ``tensors.bin`` is a flat blob of
little-endian 32-bit floats; the manifest records, for every tensor, its
shape, dtype tag, byte offset and sha256, plus a digest of the whole blob,
so that any corruption or truncation is detected before use.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CorruptionError, WeightLoadError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1

TENSOR_DTYPE = np.dtype("<f4")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Canonical byte representation: C-contiguous little-endian float32."""
    return np.ascontiguousarray(arr, dtype=TENSOR_DTYPE).tobytes()


def hash_tensors(tensors: dict[str, np.ndarray]) -> str:
    """Digest of a named tensor set, order-independent (names are sorted)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(tensor_bytes(tensors[name]))
    return h.hexdigest()


def write_archive(path, tensors: dict[str, np.ndarray], kind: str, meta: dict) -> Path:
    """Write tensors + metadata under ``path`` (created if needed).

    Tensors are laid out in sorted-name order; manifests produced from the
    same inputs are byte-identical.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        data = tensor_bytes(tensors[name])
        entries[name] = {
            "shape": list(np.asarray(tensors[name]).shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(data),
            "sha256": sha256_bytes(data),
        }
        chunks.append(data)
        offset += len(data)

    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": entries,
        "blob_sha256": sha256_bytes(blob),
    }

    (path / BLOB_NAME).write_bytes(blob)
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / MANIFEST_NAME
    if not mf.is_file():
        raise WeightLoadError(f"no {MANIFEST_NAME} in archive {path}")
    try:
        manifest = json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise WeightLoadError(
            f"archive {path} has format_version {manifest.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return manifest


def read_archive(path, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    """Load an archive; returns ``(manifest, tensors)``.

    With ``verify`` (the default), the blob digest and every per-tensor
    digest are checked; a mismatch raises :class:`CorruptionError`.
    """
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / BLOB_NAME
    if not blob_path.is_file():
        raise WeightLoadError(f"no {BLOB_NAME} in archive {path}")
    blob = blob_path.read_bytes()

    expected_size = sum(e["nbytes"] for e in manifest["tensors"].values())
    if len(blob) != expected_size:
        raise CorruptionError(
            f"archive {path}: blob is {len(blob)} bytes, manifest expects {expected_size}"
        )
    if verify and sha256_bytes(blob) != manifest["blob_sha256"]:
        raise CorruptionError(f"archive {path}: blob sha256 mismatch")

    tensors = {}
    for name, entry in manifest["tensors"].items():
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if verify and sha256_bytes(raw) != entry["sha256"]:
            raise CorruptionError(f"archive {path}: tensor '{name}' sha256 mismatch")
        arr = np.frombuffer(raw, dtype=TENSOR_DTYPE).reshape(entry["shape"]).copy()
        tensors[name] = arr
    return manifest, tensors


def check_tensor_names(manifest: dict, expected: set[str], archive_name: str) -> None:
    """Diff manifest tensor names against an expected set; raise on mismatch."""
    present = set(manifest["tensors"])
    missing = sorted(expected - present)
    unexpected = sorted(present - expected)
    if missing or unexpected:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing[:8])}" + ("..." if len(missing) > 8 else ""))
        if unexpected:
            parts.append(
                f"unexpected: {', '.join(unexpected[:8])}" + ("..." if len(unexpected) > 8 else "")
            )
        raise WeightLoadError(f"{archive_name}: manifest diff: {'; '.join(parts)}")
