"""Dataset ingestion and the synthetic confounder generator.

Real data ships as one JSON object per line with keys ``id``, ``img``,
``label``, ``text`` (the public HMC layout); the HarMeme loader adapts its
three-class release schema onto the same internal record. The synthetic
generator produces XOR-labeled image/text cue pairs for desk-scale runs:
each modality alone carries no information about the label, so any model
that separates the classes must fuse both.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ArgumentError,
    DatasetNotFoundError,
    ImageDecodeError,
    LabelSchemeError,
    ParseError,
)

log = logging.getLogger(__name__)

HMC_SPLITS = ("train", "dev_seen", "test_unseen")
HARMEME_SPLITS = ("train", "test")

# Published split cardinalities; mismatches warn because public re-releases
# of both datasets vary slightly.
EXPECTED_SIZES = {
    ("hmc", "train"): 8500,
    ("hmc", "dev_seen"): 500,
    ("hmc", "test_unseen"): 2000,
    ("harmeme", "train"): 3013,
    ("harmeme", "test"): 354,
}

# Disjoint word pools for the two text cues. Deliberately neutral vocabulary:
# the cue is *which pool* the caption draws from, not what the words mean.
TEXT_CUE_WORDS = (
    ("river", "meadow", "willow", "breeze", "pebble", "moss", "fern", "brook",
     "cloud", "petal", "dune", "tide"),
    ("gear", "piston", "circuit", "diode", "anvil", "girder", "rivet", "magnet",
     "crank", "socket", "lathe", "valve"),
)

SYNTH_IMAGE_SIZE = 224


@dataclass(frozen=True)
class SyntheticImage:
    """Procedural canvas descriptor; rendered to pixels on demand.

    ``image_cue`` selects the pattern class (0 = left/right split,
    1 = top/bottom split); ``noise_seed`` makes each sample unique.
    """

    image_cue: int
    noise_seed: int
    size: int = SYNTH_IMAGE_SIZE

    def render(self) -> np.ndarray:
        rng = np.random.default_rng(self.noise_seed)
        s = self.size
        bright = 200 + rng.integers(-20, 21)
        dark = 55 + rng.integers(-20, 21)
        canvas = np.full((s, s), dark, dtype=np.float64)
        if self.image_cue == 0:
            canvas[:, : s // 2] = bright
        else:
            canvas[: s // 2, :] = bright
        canvas += rng.normal(0.0, 8.0, size=(s, s))
        canvas = np.clip(canvas, 0, 255).astype(np.uint8)
        return np.repeat(canvas[:, :, None], 3, axis=2)


@dataclass(frozen=True)
class MemeRecord:
    """One image-text-label sample; the unit flowing through the pipeline."""

    id: str
    image_ref: Union[str, SyntheticImage]
    text: str
    label: Optional[int] = None


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    records: tuple[MemeRecord, ...]
    source: str  # "hmc" | "harmeme" | "synthetic"

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ArgumentError(f"duplicate record id '{rec.id}' in split '{self.name}'")
            seen.add(rec.id)
            if rec.label is not None and rec.label not in (0, 1):
                raise ArgumentError(f"record '{rec.id}': label {rec.label!r} not in {{0, 1}}")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


def load_image(record: MemeRecord, root=None) -> np.ndarray:
    """Resolve a record's image to an RGB uint8 array of shape (H, W, 3).

    Paths resolve relative to ``root`` when given. Decode failures raise
    :class:`ImageDecodeError` (deliberately deferred to this point rather
    than ingestion time).
    """
    if isinstance(record.image_ref, SyntheticImage):
        return record.image_ref.render()
    if isinstance(record.image_ref, np.ndarray):
        return record.image_ref
    if isinstance(record.image_ref, Image.Image):
        return np.asarray(record.image_ref.convert("RGB"))
    path = Path(record.image_ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError as exc:
        raise ImageDecodeError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def _coerce_label(value, path, line_no) -> int:
    if value in (0, 1):
        return int(value)
    if value in ("0", "1"):
        return int(value)
    raise ParseError(path, line_no, f"label {value!r} is not binary")


def _read_jsonl(path: Path):
    if not path.is_file():
        raise DatasetNotFoundError(f"record file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "record is not a JSON object")
            yield line_no, obj


def _check_size(source: str, split: str, n: int) -> None:
    expected = EXPECTED_SIZES.get((source, split))
    if expected is not None and n != expected:
        log.warning(
            "%s %s split has %d records, published size is %d", source, split, n, expected
        )


def load_hmc_split(root, split: str) -> DatasetSplit:
    """Load one HMC split from ``root/<split>.jsonl``.

    Records come back in file order. Labels are required for train and
    dev splits; test records may omit them (prediction-only input).
    """
    if split not in HMC_SPLITS:
        raise ArgumentError(f"unknown hmc split '{split}' (expected one of {HMC_SPLITS})")
    path = Path(root) / f"{split}.jsonl"
    records = []
    label_required = split in ("train", "dev_seen")
    for line_no, obj in _read_jsonl(path):
        for key in ("id", "img", "text"):
            if key not in obj:
                raise ParseError(path, line_no, f"missing key '{key}'")
        if obj["text"] is None:
            raise ParseError(path, line_no, "text must be a string, got null")
        label = obj.get("label")
        if label is None and label_required:
            raise ParseError(path, line_no, f"split '{split}' requires a label")
        if label is not None:
            label = _coerce_label(label, path, line_no)
        records.append(
            MemeRecord(id=str(obj["id"]), image_ref=str(obj["img"]), text=str(obj["text"]),
                       label=label)
        )
    _check_size("hmc", split, len(records))
    return DatasetSplit(name=split, records=tuple(records), source="hmc")


def merge_harmeme_label(raw: str) -> int:
    """Collapse the three-class harm scheme to binary: the two harmful
    intensities map to 1, "harmless" to 0."""
    if not isinstance(raw, str):
        raise LabelSchemeError(f"raw label must be a string, got {type(raw).__name__}")
    key = raw.strip().lower()
    if key in ("very harmful", "partially harmful"):
        return 1
    if key == "harmless":
        return 0
    raise LabelSchemeError(f"unknown HarMeme label {raw!r}")


def load_harmeme_split(root, split: str) -> DatasetSplit:
    """Load one HarMeme split from ``root/<split>.jsonl``.

    The release schema uses ``image`` for the file name and ``labels`` as a
    list whose first entry is the harm intensity; ``img``/``label`` (single
    string) are accepted too.
    """
    if split not in HARMEME_SPLITS:
        raise ArgumentError(f"unknown harmeme split '{split}' (expected one of {HARMEME_SPLITS})")
    path = Path(root) / f"{split}.jsonl"
    records = []
    for line_no, obj in _read_jsonl(path):
        img = obj.get("image", obj.get("img"))
        if img is None:
            raise ParseError(path, line_no, "missing key 'image'")
        if "text" not in obj or obj["text"] is None:
            raise ParseError(path, line_no, "missing key 'text'")
        raw = obj.get("labels", obj.get("label"))
        if isinstance(raw, list):
            if not raw:
                raise ParseError(path, line_no, "empty labels list")
            raw = raw[0]
        if raw is None:
            raise ParseError(path, line_no, "missing key 'labels'")
        records.append(
            MemeRecord(id=str(obj["id"]), image_ref=str(img), text=str(obj["text"]),
                       label=merge_harmeme_label(raw))
        )
    _check_size("harmeme", split, len(records))
    return DatasetSplit(name=split, records=tuple(records), source="harmeme")


def generate_synthetic_confounders(n: int, seed: int) -> DatasetSplit:
    """Generate ``n`` XOR-labeled records, bit-identical for a fixed (n, seed).

    Every (image_cue, text_cue) combination appears ``n//4`` or ``n//4 + 1``
    times, so the label is exactly balanced against each cue marginally. The
    emitted order is a seed-derived shuffle, which keeps any contiguous slice
    near-balanced (the partitioning below relies on this).
    """
    if n < 4:
        raise ArgumentError(f"need n >= 4 to cover all cue combinations, got {n}")
    rng = np.random.default_rng(seed)

    combos = []
    base, extra = divmod(n, 4)
    for idx, (img_cue, txt_cue) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        combos.extend([(img_cue, txt_cue)] * (base + (1 if idx < extra else 0)))

    order = rng.permutation(n)
    records = []
    for pos, combo_idx in enumerate(order):
        img_cue, txt_cue = combos[combo_idx]
        noise_seed = int(rng.integers(0, 2**31 - 1))
        words = rng.choice(TEXT_CUE_WORDS[txt_cue], size=int(rng.integers(4, 9)), replace=True)
        records.append(
            MemeRecord(
                id=f"synth-{pos:05d}",
                image_ref=SyntheticImage(image_cue=img_cue, noise_seed=noise_seed),
                text=" ".join(words),
                label=img_cue ^ txt_cue,
            )
        )
    return DatasetSplit(name="synthetic", records=tuple(records), source="synthetic")


def split_synthetic(full: DatasetSplit, train_frac: float = 0.7, holdout_frac: float = 0.1
                    ) -> dict[str, DatasetSplit]:
    """Deterministic 70/10/20 partition of a generated set, in emitted order."""
    n = len(full.records)
    n_train = int(round(n * train_frac))
    n_hold = int(round(n * holdout_frac))
    parts = {
        "train": full.records[:n_train],
        "holdout": full.records[n_train : n_train + n_hold],
        "test": full.records[n_train + n_hold :],
    }
    return {
        name: DatasetSplit(name=name, records=recs, source="synthetic")
        for name, recs in parts.items()
    }


def synthetic_cues(record: MemeRecord) -> tuple[int, int]:
    """Recover (image_cue, text_cue) from a synthetic record."""
    if not isinstance(record.image_ref, SyntheticImage):
        raise ArgumentError(f"record '{record.id}' is not synthetic")
    first_word = record.text.split()[0]
    txt_cue = 0 if first_word in TEXT_CUE_WORDS[0] else 1
    return record.image_ref.image_cue, txt_cue


def write_synthetic_dir(split: DatasetSplit, out_dir, extra_meta: dict | None = None) -> Path:
    """Materialize a synthetic split as ``synthetic.jsonl`` + rendered PNGs.

    The JSONL uses the standard record schema, so the directory round-trips
    through :func:`read_records_jsonl`. Output bytes are deterministic.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "synthetic.jsonl", "w", encoding="utf-8") as fh:
        for rec in split.records:
            rel = f"img/{rec.id}.png"
            if isinstance(rec.image_ref, SyntheticImage):
                Image.fromarray(rec.image_ref.render()).save(img_dir / f"{rec.id}.png")
            obj = {"id": rec.id, "img": rel, "label": rec.label, "text": rec.text}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    if extra_meta is not None:
        with open(out_dir / "generation.json", "w", encoding="utf-8") as fh:
            json.dump(extra_meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return out_dir


def read_records_jsonl(path) -> tuple[MemeRecord, ...]:
    """Read a standard-schema record file without split semantics."""
    records = []
    for line_no, obj in _read_jsonl(Path(path)):
        label = obj.get("label")
        if label is not None:
            label = _coerce_label(label, path, line_no)
        records.append(
            MemeRecord(id=str(obj["id"]), image_ref=str(obj["img"]), text=str(obj["text"]),
                       label=label)
        )
    return tuple(records)
