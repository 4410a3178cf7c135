"""Subject-level splits, voxelwise normalization, Adam training and metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .aggregation import apply_brain_mask
from .errors import DataError, ShapeError
from .io import DatasetManifest, read_volume
from .model import Model

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class FoldSplit:
    """Subject-to-fold assignment plus an optional fixed test set."""

    k: int
    assignments: dict[str, int]
    fixed_test: list[str] = field(default_factory=list)
    seed: int = 0

    def train_ids(self, manifest: DatasetManifest, fold: Optional[int]) -> list[str]:
        """Samples of every fold except ``fold``, never including the fixed test set."""
        held = set(self.fixed_test)
        return [s.id for s in manifest.samples
                if s.id not in held and s.subject in self.assignments
                and self.assignments[s.subject] != fold]

    def fold_ids(self, manifest: DatasetManifest, fold: int) -> list[str]:
        held = set(self.fixed_test)
        return [s.id for s in manifest.samples
                if s.id not in held and self.assignments.get(s.subject) == fold]

    def check(self, manifest: DatasetManifest) -> None:
        """Raise if any subject leaks across folds or into the fixed test set."""
        test_subjects = {manifest.by_id(i).subject for i in self.fixed_test}
        if test_subjects & set(self.assignments):
            raise DataError(f"subjects in both folds and fixed test: {sorted(test_subjects & set(self.assignments))}")
        for s in manifest.samples:
            if s.subject not in self.assignments and s.subject not in test_subjects:
                raise DataError(f"subject {s.subject} has no fold")
            if s.subject in test_subjects and s.id not in self.fixed_test:
                raise DataError(f"sample {s.id} of test subject {s.subject} is outside the fixed test set")

    def to_dict(self) -> dict:
        return {"k": self.k, "assignments": dict(sorted(self.assignments.items())),
                "fixed_test": list(self.fixed_test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(d["k"], dict(d["assignments"]), list(d.get("fixed_test", [])), d.get("seed", 0))


def split_subjects(manifest: DatasetManifest, k: int = 5, seed: int = 0,
                   n_test_per_class: int = 0) -> FoldSplit:
    """Deal subjects into ``k`` folds, round-robin within each class.

    Subjects are shuffled per class with ``seed``. With ``n_test_per_class``
    the first that many shuffled subjects of each class form the fixed test
    set and get no fold. Dealing continues across classes, so fold sizes
    differ by at most one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for subject, label in sorted(manifest.subjects().items()):
        by_class.setdefault(label, []).append(subject)

    assignments: dict[str, int] = {}
    test_subjects: set[str] = set()
    slot = 0
    for label in sorted(by_class):
        subjects = [by_class[label][i] for i in rng.permutation(len(by_class[label]))]
        test_subjects.update(subjects[:n_test_per_class])
        rest = subjects[n_test_per_class:]
        if len(rest) < k:
            raise DataError(f"class {label} has {len(rest)} subjects available for {k} folds")
        for subject in rest:
            assignments[subject] = slot % k
            slot += 1
    fixed = [s.id for s in manifest.samples if s.subject in test_subjects]
    split = FoldSplit(k, assignments, fixed, seed)
    split.check(manifest)
    return split


# -- normalization --------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def compute_norm_stats(volumes: Sequence[np.ndarray], std_floor: float = STD_FLOOR) -> NormStats:
    """Voxelwise mean and population std over a training set (two-pass, float64)."""
    if len(volumes) < 2:
        raise ValueError("need at least two volumes for normalization stats")
    shape = np.shape(volumes[0])
    for v in volumes:
        if np.shape(v) != shape:
            raise ShapeError(f"volume shape {np.shape(v)} differs from {shape}")
    stack = np.asarray(volumes, dtype=np.float64)
    mean = stack.mean(axis=0)
    std = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    return NormStats(mean, np.maximum(std, std_floor))


def normalize(volume: np.ndarray, stats: NormStats) -> np.ndarray:
    if np.shape(volume) != stats.mean.shape:
        raise ShapeError(f"volume shape {np.shape(volume)} differs from stats shape {stats.mean.shape}")
    return (volume - stats.mean) / stats.std


def denormalize(volume: np.ndarray, stats: NormStats) -> np.ndarray:
    if np.shape(volume) != stats.mean.shape:
        raise ShapeError(f"volume shape {np.shape(volume)} differs from stats shape {stats.mean.shape}")
    return volume * stats.std + stats.mean


# -- optimizer --------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 5
    epochs: int = 20
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = config.betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype, copy=False)


# -- training loop ----------------------------------------------------------------


def fit(model: Model, inputs: np.ndarray, labels: Sequence[int], config: TrainConfig,
        log=None) -> list[dict]:
    """Train on pre-normalized ``inputs`` of shape ``[N, D, H, W]``.

    Returns one history record per epoch. The sample order and dropout masks
    come from streams derived from ``config.seed``; the final incomplete batch
    is kept.
    """
    inputs = np.asarray(inputs, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(inputs)
    if n == 0:
        raise DataError("empty training set")
    order_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(order_seq)
    drop_rng = np.random.default_rng(drop_seq)
    params = model.parameters()
    state = AdamState()
    history = []
    model.train()
    try:
        for epoch in range(config.epochs):
            order = order_rng.permutation(n)
            total_loss = 0.0
            correct = 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x = T.Tensor(inputs[idx][:, None])
                with T.Tape() as tape:
                    probs = model.forward(x, drop_rng)
                    loss = T.cross_entropy(probs, labels[idx])
                tape.backward(loss)
                adam_step([p.data for p in params], [p.grad for p in params], state, config)
                total_loss += loss.item() * len(idx)
                correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
            record = {"epoch": epoch + 1, "mean_loss": total_loss / n, "train_acc": correct / n}
            history.append(record)
            logger.info("epoch %d loss %.4f acc %.3f", record["epoch"], record["mean_loss"], record["train_acc"])
            if log is not None:
                log(record)
    finally:
        model.eval()
    return history


def load_inputs(manifest: DatasetManifest, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Brain-masked volumes and labels for the given sample ids."""
    mask = read_volume(manifest.resolve(manifest.mask)).data if manifest.mask else None
    vols, labels = [], []
    for sid in ids:
        sample = manifest.by_id(sid)
        v = read_volume(manifest.resolve(sample.volume)).data
        vols.append(apply_brain_mask(v, mask) if mask is not None else v)
        labels.append(sample.label)
    return np.asarray(vols, dtype=np.float32), np.asarray(labels, dtype=np.int64)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    stats: NormStats
    train_ids: list[str]


def train(model: Model, manifest: DatasetManifest, split: FoldSplit, fold: Optional[int],
          config: TrainConfig, log=None) -> TrainResult:
    """Fit ``model`` on every fold except ``fold`` (and never the fixed test set)."""
    if fold is not None and not 0 <= fold < split.k:
        raise ValueError(f"fold {fold} outside [0, {split.k})")
    split.check(manifest)
    ids = split.train_ids(manifest, fold)
    if not ids:
        raise DataError("training fold is empty")
    vols, labels = load_inputs(manifest, ids)
    stats = compute_norm_stats(vols)
    inputs = np.stack([normalize(v, stats) for v in vols]).astype(model.dtype)
    history = fit(model, inputs, labels, config, log)
    return TrainResult(model, history, stats, ids)


# -- metrics --------------------------------------------------------------------


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Mann-Whitney AUC with half credit for ties; ``None`` for a single class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    # midranks: tied scores share the mean of the ranks they span
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    midrank = upper - (counts - 1) / 2.0
    ranks = midrank[inverse]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(probs: np.ndarray, labels: Sequence[int]) -> float:
    return float((np.asarray(probs).argmax(axis=1) == np.asarray(labels)).mean())


def evaluate(model: Model, manifest: DatasetManifest, ids: Sequence[str], stats: NormStats,
             batch_size: int = 8) -> dict:
    """Accuracy, ROC AUC (positive class 1) and per-sample probabilities."""
    vols, labels = load_inputs(manifest, ids)
    probs = predict_normalized(model, np.stack([normalize(v, stats) for v in vols]), batch_size)
    return metrics_document(list(ids), probs, labels)


def predict_normalized(model: Model, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    chunks = [model.predict(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(chunks)


def metrics_document(ids: list[str], probs: np.ndarray, labels: np.ndarray) -> dict:
    return {
        "accuracy": accuracy(probs, labels),
        "roc_auc": roc_auc(probs[:, 1], labels),
        "n_samples": len(ids),
        "per_sample": [{"id": i, "prob_ad": float(p[1]), "label": int(y)}
                       for i, p, y in zip(ids, probs, labels)],
    }
