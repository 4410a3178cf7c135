"""Atlas-region summaries of heatmaps and distances between heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .io import read_volume


def _values(h) -> np.ndarray:
    return np.asarray(getattr(h, "values", h))


@dataclass
class LabelAtlas:
    """Integer region labels (0 = background) with region names."""

    labels: np.ndarray
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError(f"atlas must be 3-d, got shape {self.labels.shape}")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > 0xFFFF:
            raise ValueError("atlas labels must fit in 16 bits")
        self.labels = self.labels.astype(np.uint16)
        self.names = {int(k): v for k, v in self.names.items()}
        missing = [int(v) for v in np.unique(self.labels) if v and int(v) not in self.names]
        if missing:
            raise ValueError(f"atlas labels without names: {missing}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def region_ids(self) -> list[int]:
        return sorted(set(self.names) | {int(v) for v in np.unique(self.labels) if v})

    def region_mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def brain_mask(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class RegionEntry:
    label: int
    name: str
    summed: float
    fraction: float


@dataclass
class RegionReport:
    """Per-region share of total absolute relevance, sorted descending."""

    entries: list[RegionEntry]
    background_sum: float
    background_fraction: float
    total: float
    degenerate: bool = False
    normalization: str = "raw"

    def fraction_of(self, label: int) -> float:
        for e in self.entries:
            if e.label == label:
                return e.fraction
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "regions": [vars(e) for e in self.entries],
            "background": {"summed": self.background_sum, "fraction": self.background_fraction},
            "total": self.total,
            "degenerate": self.degenerate,
            "normalization": self.normalization,
        }


def format_entry(entry: RegionEntry) -> str:
    return f"{entry.name} ({100 * entry.fraction:.1f} %)"


def region_fractions(heatmap, atlas: LabelAtlas) -> RegionReport:
    """Summed |relevance| per atlas region as a fraction of the whole field."""
    values = np.abs(_values(heatmap)).astype(np.float64)
    if values.shape != atlas.shape:
        raise ShapeError(f"heatmap shape {values.shape} differs from atlas shape {atlas.shape}")
    ids = atlas.region_ids()
    sums = np.bincount(atlas.labels.ravel(), weights=values.ravel(),
                       minlength=max(ids, default=0) + 1)
    total = float(values.sum())
    degenerate = total == 0.0
    entries = []
    for label in ids:
        s = float(sums[label])
        entries.append(RegionEntry(label, atlas.names.get(label, f"label{label}"), s,
                                   0.0 if degenerate else s / total))
    entries.sort(key=lambda e: (-e.fraction, e.label))
    bg = float(sums[0])
    return RegionReport(entries, bg, 0.0 if degenerate else bg / total, total, degenerate,
                        getattr(heatmap, "normalization", "raw"))


def top_k_regions(report: RegionReport, k: int = 4) -> list[RegionEntry]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return report.entries[:k]


def heatmap_distance(a, b) -> float:
    """Euclidean distance over all voxels."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ShapeError(f"heatmap shapes differ: {va.shape} vs {vb.shape}")
    na, nb = getattr(a, "normalization", None), getattr(b, "normalization", None)
    if na is not None and nb is not None and na != nb:
        raise ValueError(f"heatmaps use different normalizations: {na} vs {nb}")
    diff = va.astype(np.float64) - vb.astype(np.float64)
    return float(math.sqrt(float((diff * diff).sum())))


@dataclass
class DistanceMatrix:
    methods: list[str]
    values: np.ndarray
    normalization: str = "raw"

    def to_dict(self) -> dict:
        return {"methods": self.methods, "matrix": self.values.tolist(), "normalization": self.normalization}


def distance_matrix(heatmaps: Mapping[str, object]) -> DistanceMatrix:
    """Pairwise distances between per-method (average) heatmaps."""
    methods = list(heatmaps)
    n = len(methods)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = heatmap_distance(heatmaps[methods[i]], heatmaps[methods[j]])
    norms = {getattr(h, "normalization", "raw") for h in heatmaps.values()}
    return DistanceMatrix(methods, out, norms.pop() if len(norms) == 1 else "mixed")


def apply_brain_mask(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    mask = np.asarray(mask)
    if volume.shape != mask.shape:
        raise ShapeError(f"volume shape {volume.shape} differs from mask shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("brain mask must be binary")
    return volume * mask.astype(volume.dtype)


# -- plain-text tables ------------------------------------------------------------


def _grid(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned columns; a cell may span several lines."""
    cells = [[str(c).split("\n") for c in row] for row in [header, *rows]]
    widths = [max(len(line) for row in cells for line in row[j]) for j in range(len(header))]
    out = []
    for r, row in enumerate(cells):
        height = max(len(c) for c in row)
        for i in range(height):
            out.append(" | ".join((c[i] if i < len(c) else "").ljust(w)
                                  for c, w in zip(row, widths)).rstrip())
        if r == 0:
            out.append("-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def format_region_table(reports: Mapping[tuple, RegionReport], k: int = 4,
                        class_names: Optional[Mapping[int, str]] = None) -> str:
    """Rows per class, columns per method, top-``k`` regions per cell.

    ``reports`` is keyed by ``(method, class_label)``.
    """
    class_names = class_names or {0: "NC", 1: "AD"}
    methods = list(dict.fromkeys(m for m, _ in reports))
    classes = sorted({c for _, c in reports}, reverse=True)
    rows = []
    for c in classes:
        row = [class_names.get(c, str(c))]
        for m in methods:
            rep = reports.get((m, c))
            row.append("\n".join(format_entry(e) for e in top_k_regions(rep, k)) if rep else "-")
        rows.append(row)
    return _grid(["", *methods], rows)


def format_distance_table(matrices: Mapping[int, DistanceMatrix], scale: float = 1e-4,
                          class_names: Optional[Mapping[int, str]] = None) -> str:
    """Cells read ``AD / NC`` style: one value per class, in units of ``scale``."""
    class_names = class_names or {0: "NC", 1: "AD"}
    classes = sorted(matrices, reverse=True)
    methods = matrices[classes[0]].methods
    rows = []
    for i, mi in enumerate(methods):
        row = [mi]
        for j in range(len(methods)):
            row.append(" / ".join(f"{matrices[c].values[i, j] / scale:.2f}" for c in classes))
        rows.append(row)
    title = (f"distances in units of {scale:g}; cells: "
             + " / ".join(class_names.get(c, str(c)) for c in classes)
             + f"; normalization: {matrices[classes[0]].normalization}\n")
    return title + _grid(["", *methods], rows)


def read_atlas(path) -> LabelAtlas:
    """Load an atlas volume whose header meta carries ``names``."""
    vol = read_volume(path)
    if vol.kind != "atlas":
        raise DataError(f"{path}: expected an atlas volume, got kind {vol.kind!r}")
    names = vol.meta.get("names", {})
    try:
        return LabelAtlas(vol.data, {int(k): v for k, v in names.items()})
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
