import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volviz import tensor as T
from volviz.errors import DataError
from volviz.io import DatasetManifest, Sample
from volviz.model import ModelConfig, build_model, model_hash
from volviz.training import (
    AdamState,
    FoldSplit,
    TrainConfig,
    accuracy,
    adam_step,
    compute_norm_stats,
    denormalize,
    fit,
    metrics_document,
    normalize,
    roc_auc,
    split_subjects,
)

from oracles import pair_count_auc, welford_stats


def fake_manifest(n_per_class=6, scans=(1, 3), seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for label, tag in ((0, "NC"), (1, "AD")):
        for i in range(n_per_class):
            for j in range(int(rng.integers(scans[0], scans[1] + 1))):
                samples.append(Sample(f"{tag}{i}_{j}", f"{tag}{i}", label, f"{tag}{i}_{j}.vol"))
    return DatasetManifest(samples)


# -- splits -----------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_split_never_leaks_subjects(seed):
    m = fake_manifest(7, seed=seed)
    split = split_subjects(m, 5, seed)
    for fold in range(5):
        train = {m.by_id(i).subject for i in split.train_ids(m, fold)}
        test = {m.by_id(i).subject for i in split.fold_ids(m, fold)}
        assert not train & test
        assert train | test == set(m.subjects())


def test_split_fold_sizes_and_class_balance():
    m = fake_manifest(10, scans=(1, 1))
    split = split_subjects(m, 5, 0)
    sizes = np.bincount(list(split.assignments.values()), minlength=5)
    assert sizes.max() - sizes.min() <= 1
    for fold in range(5):
        labels = [m.by_id(i).label for i in split.fold_ids(m, fold)]
        assert labels.count(0) == labels.count(1) == 2


def test_split_fixed_test_set():
    m = fake_manifest(8)
    split = split_subjects(m, 3, 1, n_test_per_class=2)
    test_subjects = {m.by_id(i).subject for i in split.fixed_test}
    assert len(test_subjects) == 4
    assert not test_subjects & set(split.assignments)
    assert not set(split.fixed_test) & set(split.train_ids(m, None))


def test_split_too_few_subjects():
    with pytest.raises(DataError):
        split_subjects(fake_manifest(3), 5, 0)


def test_split_round_trip_and_leak_detection():
    m = fake_manifest(6)
    split = split_subjects(m, 3, 0)
    assert FoldSplit.from_dict(split.to_dict()) == split
    assigned = dict(split.assignments)
    del assigned["AD0"]
    with pytest.raises(DataError):
        FoldSplit(3, assigned).check(m)


def test_split_is_seeded():
    m = fake_manifest(9)
    assert split_subjects(m, 3, 4) == split_subjects(m, 3, 4)
    assert split_subjects(m, 3, 4).assignments != split_subjects(m, 3, 5).assignments


# -- normalization -------------------------------------------------------------------


def test_norm_stats_match_streaming_oracle():
    vols = list(np.random.default_rng(2).standard_normal((7, 3, 4, 5)) * 3 + 1)
    stats = compute_norm_stats(vols)
    mean, std = welford_stats(vols)
    assert np.allclose(stats.mean, mean, rtol=1e-12, atol=1e-12)
    assert np.allclose(stats.std, std, rtol=1e-12, atol=1e-12)


def test_normalize_inverts_and_floors_constant_voxels():
    vols = [np.full((2, 2, 2), 5.0), np.full((2, 2, 2), 5.0)]
    stats = compute_norm_stats(vols)
    assert np.all(stats.std == 1e-6)
    assert np.all(normalize(vols[0], stats) == 0)
    v = np.random.default_rng(3).standard_normal((2, 2, 2))
    s = compute_norm_stats([v, v + 1, v * 2])
    assert np.allclose(denormalize(normalize(v, s), s), v, atol=1e-12)


def test_norm_stats_need_two_volumes():
    with pytest.raises(ValueError):
        compute_norm_stats([np.zeros((2, 2, 2))])


# -- optimizer ---------------------------------------------------------------------


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -4.0, 1e-3])
    adam_step([p], [g], AdamState(), TrainConfig(lr=0.1))
    assert np.allclose(p, [0.9, -1.9, 2.9], atol=1e-5)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(4)
    p = rng.standard_normal(5)
    ref = p.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    cfg = TrainConfig(lr=0.01)
    state = AdamState()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        adam_step([p], [g], state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p, ref, rtol=1e-12, atol=1e-14)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs) == (1e-4, 5, 20)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})


# -- fit ------------------------------------------------------------------------------


def _toy(seed=0, n=12):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = rng.standard_normal((n, 8, 8, 8)) * 0.3
    x[labels == 1, 2:6, 2:6, 2:6] += 1.0
    return x, labels


def _tiny_model(seed=0):
    return build_model(ModelConfig(input_shape=(8, 8, 8), conv_channels=(4, 8), fc_sizes=(8,), dropout_p=0.2,
                                   seed=seed))


def test_fit_reduces_loss_on_separable_data():
    x, y = _toy()
    model = _tiny_model()
    history = fit(model, x, y, TrainConfig(lr=1e-2, batch_size=4, epochs=15))
    assert len(history) == 15
    assert history[-1]["mean_loss"] < history[0]["mean_loss"]
    assert history[-1]["train_acc"] == 1.0
    assert model.mode == "eval"


def test_fit_is_bitwise_deterministic():
    x, y = _toy()
    hashes = []
    for _ in range(2):
        model = _tiny_model()
        fit(model, x, y, TrainConfig(lr=1e-3, batch_size=5, epochs=2, seed=3))
        hashes.append(model_hash(model))
    assert hashes[0] == hashes[1]
    model = _tiny_model()
    fit(model, x, y, TrainConfig(lr=1e-3, batch_size=5, epochs=2, seed=4))
    assert model_hash(model) != hashes[0]


def test_fit_keeps_incomplete_final_batch(monkeypatch):
    x, y = _toy(n=7)
    seen = []
    original = T.cross_entropy

    def spy(probs, labels, *a, **k):
        seen.append(len(labels))
        return original(probs, labels, *a, **k)

    monkeypatch.setattr(T, "cross_entropy", spy)
    fit(_tiny_model(), x, y, TrainConfig(batch_size=5, epochs=1))
    assert seen == [5, 2]


def test_fit_empty_set():
    with pytest.raises(DataError):
        fit(_tiny_model(), np.zeros((0, 8, 8, 8)), [], TrainConfig())


# -- metrics ----------------------------------------------------------------------------


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.1, 0.2], [1, 1]) is None


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_auc_matches_pair_count(data):
    n = data.draw(st.integers(2, 30))
    scores = data.draw(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1),
                                min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    if len(set(labels)) < 2:
        assert roc_auc(scores, labels) is None
    else:
        assert roc_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


def test_accuracy_and_metrics_document():
    probs = np.array([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4]])
    labels = np.array([0, 1, 1])
    assert accuracy(probs, labels) == pytest.approx(2 / 3)
    doc = metrics_document(["a", "b", "c"], probs, labels)
    assert doc["n_samples"] == 3
    assert doc["roc_auc"] == 1.0
    assert doc["per_sample"][1] == {"id": "b", "prob_ad": 0.7, "label": 1}
