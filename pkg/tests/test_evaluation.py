import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import confusion_iou, jacobi_eigh
from pgscam.evaluation import (
    MetricsRecord, _chunks, _rank, auc, iou, pca_embed, point_drop_experiment,
)
from pgscam.geometry import CAR, SceneConfig, synth_scene
from pgscam.segnet import ArchitectureSpec, predict, train

# --- IoU -----------------------------------------------------------------------


def test_iou_examples():
    assert iou([1, 1, 0, 0], [1, 0, 1, 0], 1) == pytest.approx(1 / 3)
    assert iou([2, 2, 1], [2, 2, 1], 2) == 1.0
    assert math.isnan(iou([0, 0], [0, 0], 3))
    with pytest.raises(ValueError):
        iou([0], [0, 1], 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_metrics_match_confusion_tally(n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    pred, gt = rng.integers(0, 4, n), rng.integers(0, 4, n)
    rec = MetricsRecord.compute(pred, gt, 5)
    want = [confusion_iou(pred, gt, c) for c in range(5)]
    np.testing.assert_allclose(rec.per_class, want, equal_nan=True)
    defined = [w for w in want if not math.isnan(w)]
    assert rec.miou == pytest.approx(sum(defined) / len(defined))


# --- AUC -----------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_auc_matches_pair_count(n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    scores = rng.integers(0, 5, n).astype(float)  # many ties
    pos = rng.random(n) < 0.4
    if pos.all() or not pos.any():
        assert math.isnan(auc(scores, pos))
        return
    wins = sum((a > b) + 0.5 * (a == b) for a in scores[pos] for b in scores[~pos])
    assert auc(scores, pos) == pytest.approx(wins / (pos.sum() * (~pos).sum()), abs=1e-12)


# --- point drop ----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_model():
    spec = ArchitectureSpec(voxels=(0.3, 0.6), k_nn=6, widths=(8, 12), head_width=8)
    scenes = [synth_scene(SceneConfig(seed=s)) for s in (50, 51, 52)]
    ckpt, _ = train(scenes, spec, epochs=8, lr=1e-2, seed=0)
    return ckpt, synth_scene(SceneConfig(seed=53))


def test_chunks_and_ranking():
    assert _chunks(7, 3) == [3, 2, 2]
    assert _chunks(0, 2) == [0, 0]
    s = np.array([0.5, 0.9, 0.5, 0.1])
    assert _rank(s, "high").tolist() == [1, 0, 2, 3]
    assert _rank(s, "low").tolist() == [3, 0, 2, 1]


def test_zero_budget_is_baseline(small_model):
    ckpt, scene = small_model
    rep = point_drop_experiment(scene, ckpt, CAR, "high", budget=0, steps=1)
    assert len(rep.steps) == 1 and rep.steps[0].removed == 0
    base = MetricsRecord.compute(predict(scene, ckpt), scene.labels, 5)
    assert rep.steps[0].target_iou == base.per_class[CAR]
    assert rep.steps[0].miou == base.miou
    assert rep.final_target_drop == 0.0


@pytest.mark.parametrize("mode", ["high", "low"])
def test_steps_are_rescored_independently(small_model, mode):
    ckpt, scene = small_model
    rep = point_drop_experiment(scene, ckpt, CAR, mode, budget=60, steps=3)
    assert [s.removed for s in rep.steps] == [0, 20, 40, 60]
    gone = np.concatenate([s.removed_indices for s in rep.steps[1:]])
    assert np.unique(gone).size == 60
    alive = np.setdiff1d(np.arange(len(scene)), gone)
    sub = scene.subset(alive)
    rec = MetricsRecord.compute(predict(sub, ckpt), sub.labels, 5)
    assert rep.steps[-1].target_iou == rec.per_class[CAR]


def test_degenerate_low_mode_removes_only_off_class_points(small_model):
    ckpt, scene = small_model

    def scorer(cloud, _hier):
        return (cloud.labels == CAR).astype(float)

    rep = point_drop_experiment(scene, ckpt, CAR, "low", budget=100, steps=1, scorer=scorer)
    removed = rep.steps[1].removed_indices
    assert removed.size == 100
    assert np.all(scene.labels[removed] != CAR)
    high = point_drop_experiment(scene, ckpt, CAR, "high", budget=100, steps=1, scorer=scorer)
    assert np.all(scene.labels[high.steps[1].removed_indices] == CAR)


def test_frozen_ranking_mode(small_model):
    ckpt, scene = small_model
    rep = point_drop_experiment(scene, ckpt, CAR, "high", budget=30, steps=2, recompute=False)
    assert not rep.recompute and rep.steps[-1].removed == 30


def test_point_drop_argument_checks(small_model):
    ckpt, scene = small_model
    with pytest.raises(ValueError):
        point_drop_experiment(scene, ckpt, CAR, "middle", 10, 1)
    with pytest.raises(ValueError):
        point_drop_experiment(scene, ckpt, CAR, "high", len(scene), 1)


def test_removing_every_target_point(small_model):
    ckpt, scene = small_model

    def scorer(cloud, _hier):
        return (cloud.labels == CAR).astype(float)

    cars = int((scene.labels == CAR).sum())
    rep = point_drop_experiment(scene, ckpt, CAR, "high", budget=cars, steps=1, scorer=scorer)
    if rep.truncated:
        assert rep.reason == "target class exhausted"
    else:
        # leftover car predictions are all false positives
        assert rep.steps[-1].target_iou == 0.0


def test_truncation_when_cloud_exhausted(small_model):
    ckpt, scene = small_model
    rep = point_drop_experiment(scene, ckpt, CAR, "low", budget=len(scene) - 2, steps=1,
                                scorer=lambda cloud, _h: np.zeros(len(cloud)))
    assert rep.truncated and rep.reason == "cloud exhausted"
    assert len(rep.steps) == 1


# --- PCA -----------------------------------------------------------------------


def cosine(a, b):
    return abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_pca_matches_jacobi(seed, k):
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.standard_normal((50, k)) * rng.uniform(0.5, 3.0, k)
    emb = pca_embed(X)
    centered = X - X.mean(axis=0)
    w, V = jacobi_eigh(centered.T @ centered / 49)
    for i in range(2):
        assert cosine(emb.components[i], V[:, i]) > 1 - 1e-6
        assert emb.variances[i] == pytest.approx(w[i], rel=1e-6)
    np.testing.assert_allclose(emb.components @ emb.components.T, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(emb.coords, centered @ emb.components.T, atol=1e-12)


def test_pca_axis_case_and_degenerate_input():
    X = np.zeros((20, 3))
    X[:, 0] = np.linspace(-1, 1, 20)
    emb = pca_embed(X)
    assert cosine(emb.components[0], np.array([1.0, 0, 0])) == pytest.approx(1.0)
    assert emb.variances[1] == pytest.approx(0.0, abs=1e-12)
    zero = pca_embed(np.ones((5, 4)))
    assert not zero.coords.any() and not zero.components.any()


def test_pca_is_deterministic_and_sign_fixed():
    X = np.random.Generator(np.random.PCG64(0)).standard_normal((40, 5))
    a, b = pca_embed(X), pca_embed(X)
    assert a.components.tobytes() == b.components.tobytes()
    for comp in a.components:
        assert comp[np.argmax(np.abs(comp))] > 0


@settings(max_examples=10, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)))
def test_pca_components_are_orthonormal_or_zero(X):
    emb = pca_embed(X)
    norms = np.linalg.norm(emb.components, axis=1)
    if emb.variances[0] > 0:
        assert abs(norms[0] - 1) < 1e-8
        assert abs(emb.components[0] @ emb.components[1]) < 1e-8
