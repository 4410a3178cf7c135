"""Relevance heatmaps for single-volume decisions.

Four methods are provided: sensitivity analysis (absolute input gradient of the
target-class probability), guided backpropagation (same, with negative
upstream gradients zeroed at every ReLU), patch occlusion and atlas-region
occlusion (drop in target probability when a patch or region is replaced by
a fill value).
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .aggregation import LabelAtlas
from .errors import ShapeError
from .model import Model

METHODS = ("sensitivity", "guided_backprop", "occlusion", "area_occlusion")
GRADIENT_METHODS = ("sensitivity", "guided_backprop")


@dataclass
class Heatmap:
    values: np.ndarray
    method: str
    target_class: int
    normalization: str = "raw"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.normalization not in ("raw", "unit_l1"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def unit_l1(self) -> "Heatmap":
        """Rescaled so that sum(|values|) == 1; all-zero maps stay zero."""
        v = self.values.astype(np.float64)
        total = np.abs(v).sum()
        return replace(self, values=v / total if total > 0 else v, normalization="unit_l1")


def _check_model_input(model: Model, volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.shape != model.config.input_shape:
        raise ShapeError(f"volume shape {volume.shape} differs from model input {model.config.input_shape}")
    return volume.astype(model.dtype, copy=False)


def _check_target(model: Model, target_class: int) -> int:
    if not 0 <= int(target_class) < model.config.n_classes:
        raise ValueError(f"target_class {target_class} outside [0, {model.config.n_classes})")
    return int(target_class)


def input_gradient(model: Model, volume: np.ndarray, target_class: int, mode: str = "standard",
                   wrt: str = "probability") -> np.ndarray:
    """Signed gradient of the target output w.r.t. the input volume (eval mode)."""
    volume = _check_model_input(model, volume)
    target = _check_target(model, target_class)
    if wrt not in ("probability", "logit"):
        raise ValueError(f"wrt must be 'probability' or 'logit', got {wrt!r}")
    x = T.Tensor(volume[None, None], requires_grad=True)
    previous = model.mode
    model.eval()
    try:
        with T.Tape(mode) as tape:
            out = model.forward(x) if wrt == "probability" else model.logits(x)
        tape.backward(out, index=(0, target))
    finally:
        model.mode = previous
    return x.grad[0, 0]


def sensitivity(model: Model, volume: np.ndarray, target_class: int, wrt: str = "probability") -> Heatmap:
    grad = input_gradient(model, volume, target_class, "standard", wrt)
    return Heatmap(np.abs(grad), "sensitivity", int(target_class), params={"wrt": wrt})


def guided_backprop(model: Model, volume: np.ndarray, target_class: int, wrt: str = "probability") -> Heatmap:
    grad = input_gradient(model, volume, target_class, "guided", wrt)
    return Heatmap(np.abs(grad), "guided_backprop", int(target_class), params={"wrt": wrt})


def target_probabilities(model: Model, volumes: np.ndarray, target_class: int) -> np.ndarray:
    return model.predict(volumes)[:, target_class]


def _triple(v) -> tuple:
    t = (int(v),) * 3 if np.isscalar(v) else tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or three ints, got {v!r}")
    return t


def patch_starts(dim: int, patch: int, stride: int) -> list[int]:
    """Start offsets on the stride grid, plus a final one flush to the far edge."""
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def _check_fill(fill_value, shape):
    if np.isscalar(fill_value):
        return fill_value
    fill_value = np.asarray(fill_value)
    if fill_value.shape != shape:
        raise ShapeError(f"fill array shape {fill_value.shape} differs from volume shape {shape}")
    return fill_value


def _fill(occluded: np.ndarray, region, fill_value) -> None:
    if np.isscalar(fill_value):
        occluded[region] = fill_value
    else:
        occluded[region] = fill_value[region]


def _evaluate(model, make_volume, n_items, target, batch_size, n_threads) -> np.ndarray:
    """Target probability for each generated volume; slots are written disjointly."""
    scores = np.empty(n_items)

    def run(start):
        stop = min(start + batch_size, n_items)
        batch = np.stack([make_volume(i) for i in range(start, stop)])
        scores[start:stop] = target_probabilities(model, batch, target)

    starts = range(0, n_items, batch_size)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return scores


def occlusion(model: Model, volume: np.ndarray, target_class: int, patch_size=40, stride=None,
              fill_value: Union[float, np.ndarray] = 0.0, batch_size: int = 1,
              n_threads: int = 1) -> Heatmap:
    """Sliding-patch occlusion map.

    Each patch position scores ``p0 - p_occluded``; a voxel's value is the mean
    score over all patches covering it. ``stride`` defaults to half the patch.
    ``fill_value`` may be a scalar or a volume-shaped array.
    """
    volume = _check_model_input(model, volume)
    target = _check_target(model, target_class)
    fill_value = _check_fill(fill_value, volume.shape)
    patch = _triple(patch_size)
    stride = tuple(max(1, p // 2) for p in patch) if stride is None else _triple(stride)
    if any(p > d for p, d in zip(patch, volume.shape)) or min(patch) < 1:
        raise ValueError(f"patch {patch} does not fit volume {volume.shape}")
    if min(stride) < 1:
        raise ValueError("stride must be >= 1")

    grids = [patch_starts(d, p, s) for d, p, s in zip(volume.shape, patch, stride)]
    positions = list(itertools.product(*grids))
    slices = [tuple(slice(o, o + p) for o, p in zip(pos, patch)) for pos in positions]

    def make(i):
        occluded = volume.copy()
        _fill(occluded, slices[i], fill_value)
        return occluded

    p0 = float(target_probabilities(model, volume[None], target)[0])
    probs = _evaluate(model, make, len(slices), target, batch_size, n_threads)
    scores = p0 - probs

    total = np.zeros(volume.shape)
    count = np.zeros(volume.shape)
    for sl, s in zip(slices, scores):
        total[sl] += s
        count[sl] += 1
    params = {"patch_size": list(patch), "stride": list(stride),
              "fill_value": float(fill_value) if np.isscalar(fill_value) else "array",
              "n_positions": len(slices)}
    return Heatmap(total / count, "occlusion", target, params=params)


@dataclass
class AreaOcclusionResult:
    per_region: dict[int, float]
    heatmap: Heatmap
    empty_regions: list[int]
    n_forward: int

    def to_dict(self, names: Optional[dict] = None) -> dict:
        names = names or {}
        return {"per_region": [{"label": k, "name": names.get(k, str(k)), "score": v}
                               for k, v in self.per_region.items()],
                "empty_regions": self.empty_regions, "n_forward": self.n_forward}


def area_occlusion(model: Model, volume: np.ndarray, atlas: LabelAtlas, target_class: int,
                   fill_value: Union[float, np.ndarray] = 0.0, batch_size: int = 1,
                   n_threads: int = 1) -> AreaOcclusionResult:
    """Occlude one atlas region at a time; score = ``p0 - p_occluded``.

    The heatmap paints each region's score over its voxels and leaves the
    background at zero. Regions without voxels score 0 and are listed in
    ``empty_regions``.
    """
    volume = _check_model_input(model, volume)
    target = _check_target(model, target_class)
    if atlas.shape != volume.shape:
        raise ShapeError(f"atlas shape {atlas.shape} differs from volume shape {volume.shape}")
    fill_value = _check_fill(fill_value, volume.shape)
    labels = atlas.region_ids()
    masks = {r: atlas.region_mask(r) for r in labels}
    empty = [r for r in labels if not masks[r].any()]
    if empty:
        warnings.warn(f"atlas regions without voxels: {empty}", stacklevel=2)
    present = [r for r in labels if r not in empty]

    def make(i):
        occluded = volume.copy()
        _fill(occluded, masks[present[i]], fill_value)
        return occluded

    p0 = float(target_probabilities(model, volume[None], target)[0])
    probs = _evaluate(model, make, len(present), target, batch_size, n_threads)
    per_region = {r: 0.0 for r in labels}
    values = np.zeros(volume.shape)
    for r, p in zip(present, probs):
        per_region[r] = p0 - float(p)
        values[masks[r]] = per_region[r]
    heatmap = Heatmap(values, "area_occlusion", target,
                      params={"fill_value": float(fill_value) if np.isscalar(fill_value) else "array"})
    return AreaOcclusionResult(per_region, heatmap, empty, len(present) + 1)


def explain(model: Model, volume: np.ndarray, method: str, target_class: int,
            atlas: Optional[LabelAtlas] = None, **params) -> Heatmap:
    """Dispatch to one of the four methods by name."""
    if method == "sensitivity":
        return sensitivity(model, volume, target_class, **params)
    if method == "guided_backprop":
        return guided_backprop(model, volume, target_class, **params)
    if method == "occlusion":
        return occlusion(model, volume, target_class, **params)
    if method == "area_occlusion":
        if atlas is None:
            raise ValueError("area_occlusion needs an atlas")
        return area_occlusion(model, volume, atlas, target_class, **params).heatmap
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def average_heatmaps(heatmaps: Sequence[Heatmap], normalize: bool = True) -> Heatmap:
    """Voxelwise mean, optionally after rescaling each map to unit L1 norm."""
    if not heatmaps:
        raise ValueError("no heatmaps to average")
    first = heatmaps[0]
    for h in heatmaps[1:]:
        if h.method != first.method:
            raise ValueError(f"cannot average {first.method} with {h.method}")
        if h.shape != first.shape:
            raise ShapeError(f"heatmap shapes differ: {first.shape} vs {h.shape}")
    maps = [h.unit_l1() if normalize else h for h in heatmaps]
    norms = {h.normalization for h in maps}
    if len(norms) > 1:
        raise ValueError(f"mixed normalizations: {sorted(norms)}")
    mean = np.mean(np.stack([h.values.astype(np.float64) for h in maps]), axis=0)
    targets = {h.target_class for h in heatmaps}
    return Heatmap(mean, first.method, targets.pop() if len(targets) == 1 else -1,
                   norms.pop(), {**first.params, "n_averaged": len(heatmaps)})
