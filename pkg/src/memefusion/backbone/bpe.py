"""Byte-pair-encoding tokenizer compatible with the public CLIP vocabulary.

The merge table ships inside the pretrained weight archive (the converter
copies the release's gzipped vocab file). The implementation is generic
over any merge table so it can be unit-tested on a small hand-built one.

Cleaning note: the reference pipeline additionally repairs mojibake with
ftfy before unescaping; that package is unavailable here, so cleaning is
html-unescape + whitespace collapse + lowercase (identical for well-formed
input). The word-split pattern uses stdlib re equivalents of the \\p{L} and
\\p{N} classes; exact for ASCII and normal text.
"""

from __future__ import annotations

import gzip
import html
import re
from pathlib import Path

from ..errors import VocabularyError, WeightLoadError

# The reference vocab file carries far more merge lines than the model uses;
# this cap reproduces the published 49408-entry vocabulary.
REFERENCE_MERGE_LIMIT = 48894

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"

_WORD_PATTERN = re.compile(
    r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d"
    r"|[^\W\d_]+|\d|(?:[^\s\w]|_)+",
    re.IGNORECASE | re.UNICODE,
)


def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map used to keep words opaque."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word[:-1], word[1:]))


def _clean(text: str) -> str:
    text = html.unescape(html.unescape(text))
    text = re.sub(r"\s+", " ", text)
    return text.strip()


def load_merges(path, limit: int | None = REFERENCE_MERGE_LIMIT) -> list[tuple[str, str]]:
    """Read a merge table from a plain or gzipped text file.

    The first line is dropped when it is the reference file's version
    header or anything else that is not a two-field merge.
    """
    path = Path(path)
    if not path.is_file():
        raise WeightLoadError(f"vocab file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and (lines[0].startswith("#version") or len(lines[0].split()) != 2):
        lines = lines[1:]
    merges = []
    for line in lines:
        fields = line.split()
        if len(fields) != 2:
            continue
        merges.append((fields[0], fields[1]))
        if limit is not None and len(merges) >= limit:
            break
    if not merges:
        raise WeightLoadError(f"no merge rules found in {path}")
    return merges


class BpeTokenizer:
    def __init__(self, merges: list[tuple[str, str]]):
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        base = list(self.byte_encoder.values())
        vocab = base + [c + "</w>" for c in base]
        vocab.extend("".join(m) for m in merges)
        vocab.extend([SOT_TOKEN, EOT_TOKEN])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.decoder = {i: tok for tok, i in self.encoder.items()}
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self.sot_id = self.encoder[SOT_TOKEN]
        self.eot_id = self.encoder[EOT_TOKEN]
        self._cache: dict[str, str] = {SOT_TOKEN: SOT_TOKEN, EOT_TOKEN: EOT_TOKEN}

    def __len__(self):
        return len(self.encoder)

    def _bpe(self, token: str) -> str:
        cached = self._cache.get(token)
        if cached is not None:
            return cached
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            merged = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    merged.extend(word[i:])
                    break
                merged.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        result = " ".join(word)
        self._cache[token] = result
        return result

    def encode(self, text: str) -> list[int]:
        """Content token ids (no SOT/EOT)."""
        ids: list[int] = []
        text = _clean(text).lower()
        for chunk in _WORD_PATTERN.findall(text):
            opaque = "".join(self.byte_encoder[b] for b in chunk.encode("utf-8"))
            for piece in self._bpe(opaque).split(" "):
                try:
                    ids.append(self.encoder[piece])
                except KeyError:
                    raise VocabularyError(f"piece {piece!r} missing from vocabulary") from None
        return ids

    def decode(self, ids) -> str:
        text = "".join(self.decoder.get(i, "") for i in ids)
        raw = bytearray(self.byte_decoder[c] for c in text if c in self.byte_decoder)
        return raw.decode("utf-8", errors="replace").replace("</w>", " ").strip()
