"""Dataset manifests and image files.

Manifest JSON::

    {"version": 1, "classes": [...],
     "records": [{"path", "label", "caption", "provenance", "meta"}, ...]}

Record paths are stored relative to the manifest's directory when possible.
Images are 8-bit PNG (or PGM) files, loaded as float32 ``(C, H, W)`` arrays in
[0, 1] with value ``k / 255``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError, ParseError, ShapeError, StorageError

MANIFEST_VERSION = 1
REAL = "real"
SYNTHETIC = "synthetic"
EXTERNAL = "synthetic(external)"
PROVENANCES = (REAL, SYNTHETIC, EXTERNAL)


def is_synthetic(provenance: str) -> bool:
    return provenance != REAL


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    caption: str | None = None
    provenance: str = REAL
    meta: dict | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")


@dataclass
class DatasetManifest:
    records: list[Record] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if not self.classes:
            self.classes = sorted({r.label for r in self.records})
        unknown = {r.label for r in self.records} - set(self.classes)
        if unknown:
            raise InvalidArgumentError(f"records use labels outside the class set: {sorted(unknown)}")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.records)

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def select(self, label: str | None = None, provenance=None) -> list[Record]:
        """Records filtered by label and provenance (``"real"``, ``"synthetic"`` for any synthetic kind)."""
        out = []
        for r in self.records:
            if label is not None and r.label != label:
                continue
            if provenance == REAL and is_synthetic(r.provenance):
                continue
            if provenance == SYNTHETIC and not is_synthetic(r.provenance):
                continue
            out.append(r)
        return out

    def real(self) -> "DatasetManifest":
        return DatasetManifest(self.select(provenance=REAL), list(self.classes), self.root)

    def synthetic(self) -> "DatasetManifest":
        return DatasetManifest(self.select(provenance=SYNTHETIC), list(self.classes), self.root)

    def counts(self, provenance=None) -> dict[str, int]:
        return {c: len(self.select(c, provenance)) for c in self.classes}

    def load_images(self, records=None, channels: int = 1) -> np.ndarray:
        recs = self.records if records is None else records
        if not recs:
            return np.zeros((0, channels, 0, 0), dtype=np.float32)
        return np.stack([load_image(self.resolve(r), channels) for r in recs])

    def labels(self, records=None) -> np.ndarray:
        recs = self.records if records is None else records
        idx = self.class_index
        return np.array([idx[r.label] for r in recs], dtype=np.int64)

    def abs_paths(self) -> set[str]:
        return {os.path.realpath(self.resolve(r)) for r in self.records}

    def validate(self, image_shape=None, channels: int = 1) -> None:
        """Check that every record's file exists and loads to ``image_shape``."""
        for r in self.records:
            p = self.resolve(r)
            if not p.is_file():
                raise StorageError(f"missing image {p}")
            img = load_image(p, channels)
            if image_shape is not None and img.shape != tuple(image_shape):
                raise ShapeError(f"{p}: shape {img.shape}, expected {tuple(image_shape)}")

    def fingerprint(self) -> str:
        """Content hash over (label, provenance, image bytes); independent of where files live."""
        items = []
        for r in self.records:
            p = self.resolve(r)
            digest = hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else "missing:" + r.path
            items.append(f"{r.label}\0{r.provenance}\0{digest}")
        h = hashlib.sha256("\0".join(self.classes).encode())
        for item in sorted(items):
            h.update(item.encode() + b"\n")
        return h.hexdigest()[:16]

    def merged(self, other: "DatasetManifest", root=None) -> "DatasetManifest":
        """Union of both record lists with paths made absolute (or relative to ``root``)."""
        root = Path(root) if root is not None else self.root
        recs = []
        for m in (self, other):
            for r in m.records:
                recs.append(replace(r, path=_relpath(m.resolve(r), root)))
        classes = list(self.classes) + [c for c in other.classes if c not in self.classes]
        return DatasetManifest(recs, classes, root)

    def to_json(self, root=None) -> dict:
        root = Path(root) if root is not None else self.root
        return {"version": MANIFEST_VERSION, "classes": list(self.classes),
                "records": [{"path": _relpath(self.resolve(r), root), "label": r.label, "caption": r.caption,
                             "provenance": r.provenance, "meta": r.meta} for r in self.records]}

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_json(path.parent.resolve()), indent=1))
        except OSError as exc:
            raise StorageError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise StorageError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise ParseError(f"{path}: unsupported manifest version {doc.get('version')}")
        try:
            recs = [Record(r["path"], r["label"], r.get("caption"), r.get("provenance", REAL), r.get("meta"))
                    for r in doc["records"]]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: malformed record: {exc}") from exc
        return cls(recs, list(doc.get("classes", [])), path.parent.resolve())


def _relpath(p: Path, root: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(Path(root).resolve()).as_posix()
    except ValueError:
        return str(p)


def load_image(path, channels: int = 1) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise StorageError(f"cannot load image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img) -> None:
    """Write a ``(C, H, W)`` [0, 1] image as 8-bit PNG (or PGM by extension)."""
    arr = to_uint8(img)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot write image {path}: {exc}") from exc
