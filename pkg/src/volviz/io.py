"""On-disk formats: raw volumes with JSON headers, and dataset manifests.

A volume ``name.vol`` is a raw little-endian C-ordered array, described by the
sidecar ``name.vol.json``::

    {"shape": [D, H, W], "dtype": "f32" | "u16", "order": "C",
     "endianness": "little", "kind": "image" | "heatmap" | "atlas" | "mask",
     "meta": {...}}
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, UnknownDtypeError, VolumeFormatError, VolumeLengthError

DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
KINDS = ("image", "heatmap", "atlas", "mask")
MANIFEST_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))


@dataclass
class Volume:
    """A 3D scalar field plus provenance metadata."""

    data: np.ndarray
    kind: str = "image"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def header_path(path) -> Path:
    return Path(str(path) + ".json")


def write_volume(volume: Volume, path) -> None:
    if volume.kind not in KINDS:
        raise ValueError(f"unknown volume kind {volume.kind!r}")
    if volume.data.ndim != 3:
        raise ValueError(f"volumes are 3-d, got shape {volume.data.shape}")
    dtype = "u16" if volume.kind == "atlas" else "f32"
    data = volume.data
    if dtype == "u16" and (data.min(initial=0) < 0 or data.max(initial=0) > 0xFFFF):
        raise ValueError("atlas labels must fit in 16 bits")
    header = {
        "shape": list(data.shape),
        "dtype": dtype,
        "order": "C",
        "endianness": "little",
        "kind": volume.kind,
        "meta": volume.meta,
    }
    atomic_write_bytes(path, np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    write_json(header_path(path), header)


def read_volume(path) -> Volume:
    """Read and validate a volume; the header is checked before any allocation."""
    path = Path(path)
    hpath = header_path(path)
    if not hpath.exists():
        raise DataError(f"missing volume header {hpath}")
    if not path.exists():
        raise DataError(f"missing volume data {path}")
    try:
        header = json.loads(hpath.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(hpath, "<json>", f"unparseable header: {exc}") from None
    if not isinstance(header, dict):
        raise VolumeFormatError(hpath, "<json>", "header must be an object")

    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(v, int) and v > 0 for v in shape)):
        raise VolumeFormatError(hpath, "shape", f"expected three positive ints, got {shape!r}")
    dtype = header.get("dtype")
    if dtype not in DTYPES:
        raise UnknownDtypeError(hpath, "dtype", f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    if header.get("order") != "C":
        raise VolumeFormatError(hpath, "order", f"expected 'C', got {header.get('order')!r}")
    if header.get("endianness") != "little":
        raise VolumeFormatError(hpath, "endianness", f"expected 'little', got {header.get('endianness')!r}")
    kind = header.get("kind")
    if kind not in KINDS:
        raise VolumeFormatError(hpath, "kind", f"unknown kind {kind!r}")
    if (kind == "atlas") != (dtype == "u16"):
        raise VolumeFormatError(hpath, "dtype", f"kind {kind!r} is inconsistent with dtype {dtype!r}")
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise VolumeFormatError(hpath, "meta", "expected an object")

    expected = int(np.prod(shape)) * DTYPES[dtype].itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise VolumeLengthError(path, "shape", f"data file has {actual} bytes, expected {expected}")
    data = np.fromfile(path, dtype=DTYPES[dtype]).reshape(shape)
    return Volume(data.astype(np.uint16 if dtype == "u16" else np.float32), kind, meta)


# -- dataset manifests ----------------------------------------------------------


@dataclass
class Sample:
    id: str
    subject: str
    label: int
    volume: str
    lesion_mask: Optional[str] = None


@dataclass
class DatasetManifest:
    """Samples with subject ids and class labels (0 = NC, 1 = AD).

    Paths are stored relative to ``root`` (the manifest's directory).
    """

    samples: list[Sample]
    atlas: Optional[str] = None
    mask: Optional[str] = None
    config: dict = field(default_factory=dict)
    root: Path = Path(".")
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise DataError("manifest sample ids are not unique")
        classes: dict[str, int] = {}
        for s in self.samples:
            if classes.setdefault(s.subject, s.label) != s.label:
                raise DataError(f"subject {s.subject} appears with more than one class")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"no sample {sample_id!r} in manifest")

    def subjects(self) -> dict[str, int]:
        return {s.subject: s.label for s in self.samples}

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "samples": [vars(s) for s in self.samples],
            "atlas": self.atlas,
            "mask": self.mask,
            "config": self.config,
        }


def write_manifest(manifest: DatasetManifest, path) -> None:
    write_json(path, manifest.to_dict())


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: unparseable manifest: {exc}") from None
    if raw.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {raw.get('format_version')!r}")
    try:
        samples = [Sample(**s) for s in raw["samples"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed sample entry: {exc}") from None
    manifest = DatasetManifest(samples, raw.get("atlas"), raw.get("mask"), raw.get("config", {}),
                               path.parent)
    if check_paths:
        rels = [s.volume for s in samples] + [s.lesion_mask for s in samples if s.lesion_mask]
        rels += [p for p in (manifest.atlas, manifest.mask) if p]
        for rel in rels:
            if not manifest.resolve(rel).exists():
                raise DataError(f"{path}: referenced file {manifest.resolve(rel)} does not exist")
    return manifest
