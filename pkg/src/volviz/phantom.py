"""Synthetic pre-registered brain phantoms with known discriminative regions.

Every subject shares one ellipsoidal "brain" partitioned into atlas regions.
Class-1 subjects lose ``effect_size`` intensity inside the lesion regions,
so the ground-truth relevance of any classifier is known exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregation import LabelAtlas
from .errors import DataError, ShapeError
from .io import DatasetManifest, Sample, Volume, write_manifest, write_volume

CLASS_TAGS = {0: "NC", 1: "AD"}


@dataclass
class PhantomConfig:
    shape: tuple = (32, 32, 32)
    n_subjects: int = 20
    scans_per_subject: tuple = (1, 3)
    n_regions: int = 12
    lesion_regions: tuple = (1, 2)
    effect_size: float = 0.5
    noise_sigma: float = 0.2
    subject_variability_sigma: float = 0.1
    blur_passes: int = 4
    brain_fraction: float = 0.85
    lloyd_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.scans_per_subject = tuple(int(v) for v in self.scans_per_subject)
        self.lesion_regions = tuple(int(v) for v in self.lesion_regions)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("shape", "scans_per_subject", "lesion_regions"):
            d[k] = list(d[k])
        return d

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        if any(not 1 <= r <= self.n_regions for r in self.lesion_regions):
            raise ValueError(f"lesion_regions {self.lesion_regions} outside [1, {self.n_regions}]")
        if self.effect_size < 0:
            raise ValueError("effect_size must be >= 0")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if self.subject_variability_sigma < 0:
            raise ValueError("subject_variability_sigma must be >= 0")
        lo, hi = self.scans_per_subject
        if not 1 <= lo <= hi:
            raise ValueError(f"bad scans_per_subject range {self.scans_per_subject}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")


def _grid(shape):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)


def ellipsoid_radius(config: PhantomConfig) -> np.ndarray:
    """Normalized radius: < 1 inside the brain ellipsoid."""
    coords = _grid(config.shape)
    center = (np.asarray(config.shape) - 1) / 2.0
    radii = config.brain_fraction * np.asarray(config.shape) / 2.0
    return np.sqrt((((coords - center) / radii) ** 2).sum(axis=-1))


def brain_mask(config: PhantomConfig) -> np.ndarray:
    return (ellipsoid_radius(config) < 1.0).astype(np.uint8)


def _nearest(points: np.ndarray, sites: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - sites[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def generate_atlas(config: PhantomConfig) -> LabelAtlas:
    """Voronoi partition of the brain ellipsoid from seeded sites.

    Sites start at randomly chosen brain voxels and are moved to their cell
    centroids for ``lloyd_iterations`` rounds, which evens out region sizes.
    """
    config.validate()
    mask = brain_mask(config).astype(bool)
    points = np.argwhere(mask).astype(np.float64)
    if config.n_regions > len(points):
        raise ValueError(f"{config.n_regions} regions requested but the brain has {len(points)} voxels")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA7]))
    sites = points[rng.choice(len(points), config.n_regions, replace=False)]
    for _ in range(config.lloyd_iterations):
        owner = _nearest(points, sites)
        for r in range(config.n_regions):
            members = points[owner == r]
            if len(members):
                sites[r] = members.mean(axis=0)
    owner = _nearest(points, sites)
    labels = np.zeros(config.shape, dtype=np.uint16)
    labels[mask] = owner + 1
    names = {r: f"Region{r:02d}" for r in range(1, config.n_regions + 1)}
    return LabelAtlas(labels, names)


def blur3(volume: np.ndarray, passes: int) -> np.ndarray:
    """Separable [1, 2, 1] / 4 smoothing, edge-replicated, applied ``passes`` times."""
    out = volume.astype(np.float64)
    for _ in range(passes):
        for axis in range(3):
            pad = [(0, 0)] * 3
            pad[axis] = (1, 1)
            p = np.pad(out, pad, mode="edge")
            n = out.shape[axis]
            a = np.take(p, range(0, n), axis=axis)
            b = np.take(p, range(1, n + 1), axis=axis)
            c = np.take(p, range(2, n + 2), axis=axis)
            out = 0.25 * a + 0.5 * b + 0.25 * c
    return out


def lesion_mask(atlas: LabelAtlas, config: PhantomConfig) -> np.ndarray:
    return np.isin(atlas.labels, config.lesion_regions).astype(np.uint8)


def subject_base(config: PhantomConfig, label: int, index: int) -> np.ndarray:
    """Smooth subject-specific brain: ellipsoid profile plus low-frequency variation."""
    r = ellipsoid_radius(config)
    inside = r < 1.0
    base = np.where(inside, 0.8 + 0.2 * (1.0 - r ** 2), 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, label, index]))
    field = blur3(rng.standard_normal(config.shape), config.blur_passes)
    sd = field.std()
    if sd > 0:
        field /= sd
    return base + inside * config.subject_variability_sigma * field


def scan_volume(config: PhantomConfig, base: np.ndarray, lesions: np.ndarray, label: int,
                index: int, scan: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, label, index, scan]))
    vol = base + rng.normal(0.0, config.noise_sigma, config.shape)
    if label == 1:
        vol = vol - config.effect_size * lesions
    return vol.astype(np.float32)


def generate_dataset(config: PhantomConfig, out_dir) -> DatasetManifest:
    """Write volumes, lesion masks, atlas, brain mask and ``manifest.json``."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        (out / "lesions").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None

    atlas = generate_atlas(config)
    lesions = lesion_mask(atlas, config)
    empty = np.zeros(config.shape, dtype=np.uint8)
    write_volume(Volume(atlas.labels, "atlas", {"names": {str(k): v for k, v in atlas.names.items()}}),
                 out / "atlas.vol")
    write_volume(Volume(brain_mask(config).astype(np.float32), "mask", {}), out / "brain_mask.vol")

    samples = []
    lo, hi = config.scans_per_subject
    for label in (0, 1):
        tag = CLASS_TAGS[label]
        for i in range(config.n_subjects):
            subject = f"sub-{tag}{i:03d}"
            base = subject_base(config, label, i)
            count_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, label, i]))
            n_scans = int(count_rng.integers(lo, hi + 1))
            for j in range(n_scans):
                sid = f"{subject}_scan{j + 1}"
                vol = scan_volume(config, base, lesions, label, i, j)
                meta = {"sample": sid, "subject": subject, "label": label}
                write_volume(Volume(vol, "image", meta), out / "volumes" / f"{sid}.vol")
                write_volume(Volume((lesions if label == 1 else empty).astype(np.float32), "mask", meta),
                             out / "lesions" / f"{sid}.vol")
                samples.append(Sample(sid, subject, label, f"volumes/{sid}.vol", f"lesions/{sid}.vol"))

    manifest = DatasetManifest(samples, "atlas.vol", "brain_mask.vol", config.to_dict(), out)
    write_manifest(manifest, out / "manifest.json")
    return manifest


@dataclass
class LocalizationScore:
    score: float
    chance: float
    degenerate: bool = False

    @property
    def ratio_to_chance(self) -> float:
        return self.score / self.chance if self.chance > 0 else float("nan")


def ground_truth_localization_score(heatmap, lesion: np.ndarray,
                                    brain: Optional[np.ndarray] = None) -> LocalizationScore:
    """Share of |relevance| inside the lesion mask, against the chance level.

    Only voxels inside ``brain`` (default: everywhere) are counted; the chance
    level is lesion volume over brain volume.
    """
    values = np.abs(np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64))
    lesion = np.asarray(lesion).astype(bool)
    brain = np.ones(values.shape, bool) if brain is None else np.asarray(brain).astype(bool)
    if values.shape != lesion.shape or values.shape != brain.shape:
        raise ShapeError(f"heatmap {values.shape}, lesion {lesion.shape}, brain {brain.shape} differ")
    inside = lesion & brain
    if not inside.any():
        raise ValueError("lesion mask is empty")
    chance = inside.sum() / brain.sum()
    total = values[brain].sum()
    if total == 0:
        return LocalizationScore(0.0, float(chance), True)
    return LocalizationScore(float(values[inside].sum() / total), float(chance))
