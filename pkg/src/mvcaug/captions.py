"""Caption pools and a deterministic stand-in for a CLIP text encoder.

Hashing scheme (token embedder)
-------------------------------
Text is lowercased and split on whitespace.  The first ``m`` tokens are kept
(a :class:`CaptionTruncationWarning` is issued when more are present).  Token
``tok`` is mapped to a ``d``-vector by::

    stream = shake_256(seed.to_bytes(8, "little", signed=True) + b"\\x00" + tok.encode("utf-8"))
    words  = d little-endian uint32 values read from stream.digest(4 * d)
    row[j] = float32((words[j] + 0.5) / 2**32 * 2 - 1)

so every token row lies strictly inside (-1, 1) and is never zero.  Rows
past the last token hold the padding vector, which is all zeros; the null
embedding (empty text) is therefore the all-zeros ``m x d`` matrix.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import InvalidArgumentError, ParseError, ShapeError, StorageError

PREFIX = "This is an image of"
ARCHIVE_VERSION = 1


class CaptionTruncationWarning(UserWarning):
    pass


class CaptionSource(str, Enum):
    TEMPLATED = "templated"
    IMPORTED = "imported"


def caption_prefix(class_label: str) -> str:
    return f"{PREFIX} {class_label}"


@dataclass(frozen=True)
class Caption:
    class_label: str
    text: str
    source: CaptionSource = CaptionSource.TEMPLATED

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidArgumentError("caption text is empty")
        if self.source == CaptionSource.TEMPLATED and not self.text.startswith(caption_prefix(self.class_label)):
            raise InvalidArgumentError(f"templated caption must start with {caption_prefix(self.class_label)!r}")


@dataclass
class CaptionPool:
    class_label: str
    captions: list[Caption] = field(default_factory=list)

    def __post_init__(self):
        if not self.captions:
            raise InvalidArgumentError(f"caption pool for {self.class_label!r} is empty")
        for c in self.captions:
            if c.class_label != self.class_label:
                raise InvalidArgumentError(
                    f"caption labelled {c.class_label!r} in pool for {self.class_label!r}")

    def __len__(self):
        return len(self.captions)


def build_caption(class_label: str, descriptor: str | None = None) -> Caption:
    """Templated caption ``"This is an image of <label>[, <descriptor>]"``."""
    if not class_label or not class_label.strip():
        raise InvalidArgumentError("class_label must be non-empty")
    text = caption_prefix(class_label)
    if descriptor:
        text = f"{text}, {descriptor}"
    return Caption(class_label, text, CaptionSource.TEMPLATED)


def import_caption(class_label: str, text: str) -> Caption:
    # Imported captions get the class prefix unless they already carry it.
    if not class_label:
        raise InvalidArgumentError("class_label must be non-empty")
    text = text.strip()
    prefix = caption_prefix(class_label)
    if not text.startswith(prefix):
        text = f"{prefix}, {text}" if text else prefix
    return Caption(class_label, text, CaptionSource.IMPORTED)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class TokenEmbedder:
    seed: int = 0
    m: int = 16
    d: int = 32

    def __post_init__(self):
        if self.m < 2 or self.d < 2:
            raise InvalidArgumentError(f"embedder needs m >= 2 and d >= 2, got m={self.m}, d={self.d}")

    def token_vector(self, token: str) -> np.ndarray:
        key = int(self.seed).to_bytes(8, "little", signed=True) + b"\x00" + token.encode("utf-8")
        words = np.frombuffer(hashlib.shake_256(key).digest(4 * self.d), dtype="<u4").astype(np.float64)
        return ((words + 0.5) / 2.0**32 * 2.0 - 1.0).astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if len(tokens) > self.m:
            warnings.warn(
                f"caption has {len(tokens)} tokens, truncated to {self.m}: {text[:60]!r}",
                CaptionTruncationWarning, stacklevel=2)
            tokens = tokens[: self.m]
        out = np.zeros((self.m, self.d), dtype=np.float32)
        for i, tok in enumerate(tokens):
            out[i] = self.token_vector(tok)
        return out


def embed_caption(embedder: TokenEmbedder, caption: Caption) -> np.ndarray:
    return embedder.embed_text(caption.text)


def null_embedding(embedder: TokenEmbedder) -> np.ndarray:
    return embedder.embed_text("")


def check_embedding(e, m: int, d: int) -> np.ndarray:
    e = np.asarray(e)
    if e.shape != (m, d):
        raise ShapeError(f"embedding shape {e.shape} != ({m}, {d})")
    if not np.all(np.isfinite(e)):
        raise InvalidArgumentError("embedding has non-finite entries")
    return e


def export_embeddings(path, entries, extra: dict | None = None) -> None:
    """Write ``[(label, matrix), ...]`` to an embedding archive."""
    entries = list(entries)
    if not entries:
        raise InvalidArgumentError("nothing to export")
    m, d = np.asarray(entries[0][1]).shape
    for _, e in entries:
        check_embedding(e, m, d)
    header = {"version": ARCHIVE_VERSION, "m": int(m), "d": int(d), "count": len(entries),
              "labels": [str(lbl) for lbl, _ in entries]}
    if extra:
        header.update(extra)
    write_container(path, header, [e for _, e in entries])


def import_embeddings(path, m: int, d: int) -> list[tuple[str, np.ndarray]]:
    header, payload = read_container(path)
    try:
        version, hm, hd, count, labels = (header[k] for k in ("version", "m", "d", "count", "labels"))
    except KeyError as exc:
        raise ParseError(f"{path}: header missing {exc}") from exc
    if version != ARCHIVE_VERSION:
        raise ParseError(f"{path}: unsupported archive version {version}")
    if not isinstance(labels, list) or len(labels) != count:
        raise ParseError(f"{path}: {count} matrices declared but {len(labels)} labels")
    if payload.size != count * hm * hd:
        raise ParseError(f"{path}: payload holds {payload.size} floats, expected {count * hm * hd}")
    if (hm, hd) != (m, d):
        raise ShapeError(f"{path}: archive matrices are {hm}x{hd}, run expects {m}x{d}")
    mats = payload.reshape(count, hm, hd)
    return [(str(lbl), check_embedding(mats[i].copy(), m, d)) for i, lbl in enumerate(labels)]


def read_captions_file(path) -> dict[str, list[Caption]]:
    """Parse ``label<TAB>caption`` lines into per-class caption lists."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8") from exc
    out: dict[str, list[Caption]] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep or not label:
            raise ParseError(f"{path}:{lineno}: expected 'label<TAB>caption'")
        out.setdefault(label, []).append(import_caption(label, text))
    return out


def write_captions_file(path, captions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in captions:
            fh.write(f"{c.class_label}\t{c.text}\n")
