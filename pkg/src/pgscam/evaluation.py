"""IoU metrics, point-drop experiments and PCA embeddings of activations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .saliency import EmptySubsetError, SaliencyRequest, SubsetSpec, explain_detailed
from .segnet import Checkpoint, build_hierarchy, predict


def iou(pred, gt, c: int) -> float:
    """TP / (TP + FP + FN) for class ``c``; NaN when ``c`` is absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    p, g = pred == c, gt == c
    tp = int(np.count_nonzero(p & g))
    denom = int(np.count_nonzero(p | g))
    return math.nan if denom == 0 else tp / denom


@dataclass
class MetricsRecord:
    per_class: np.ndarray  # NaN marks an undefined class
    miou: float

    @classmethod
    def compute(cls, pred, gt, num_classes: int) -> "MetricsRecord":
        per_class = np.array([iou(pred, gt, c) for c in range(num_classes)])
        defined = per_class[~np.isnan(per_class)]
        return cls(per_class, float(defined.mean()) if defined.size else math.nan)


def auc(scores, positive) -> float:
    """Probability that a random positive outscores a random negative
    (ties count one half); NaN if either group is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    # average ranks over tied groups
    bounds = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.r_[0, bounds]
    stops = np.r_[bounds, scores.size]
    for s, e in zip(starts, stops):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class DropStep:
    removed: int
    target_iou: float
    miou: float
    removed_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


@dataclass
class DropReport:
    mode: str
    class_id: int
    budget: int
    steps_requested: int
    recompute: bool
    steps: list[DropStep]
    truncated: bool = False
    reason: str = ""

    @property
    def final_target_drop(self) -> float:
        return self.steps[0].target_iou - self.steps[-1].target_iou

    @property
    def final_miou_drop(self) -> float:
        return self.steps[0].miou - self.steps[-1].miou


def _chunks(budget: int, steps: int) -> list[int]:
    base, extra = divmod(budget, steps)
    return [base + (1 if i < extra else 0) for i in range(steps)]


def _rank(saliency: np.ndarray, mode: str) -> np.ndarray:
    idx = np.arange(saliency.size)
    key = -saliency if mode == "high" else saliency
    return np.lexsort((idx, key))


def point_drop_experiment(
    cloud: PointCloud,
    checkpoint: Checkpoint,
    class_id: int,
    mode: str = "high",
    budget: int = 0,
    steps: int = 1,
    recompute: bool = True,
    layer: str | None = None,
    scorer=None,
) -> DropReport:
    """Remove the most (``high``) or least (``low``) salient points in
    ``steps`` chunks totalling ``budget`` and re-score after each chunk.

    Saliency is the full-resolution map of the pre-head tap for all points
    predicted as ``class_id``. Metrics are measured against the ground truth
    of the surviving points. Removed indices refer to the original cloud.
    The run stops early (``truncated``) when the cloud becomes too small for
    the network, the target class disappears, or no point is predicted as
    the target class for a refreshed heatmap.

    ``scorer(cloud, hierarchy)`` may replace the saliency map with any
    per-point score, e.g. a random or hand-built baseline.
    """
    if mode not in ("high", "low"):
        raise ValueError("mode must be 'high' or 'low'")
    if cloud.labels is None:
        raise ValueError("point drop needs ground-truth labels")
    n = len(cloud)
    if not 0 <= budget < n:
        raise ValueError(f"budget {budget} must lie in [0, {n})")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    spec = checkpoint.spec
    layer = layer or spec.tap_names[-1]
    request = SaliencyRequest(class_id, SubsetSpec.class_all(class_id), (layer,))
    num_classes = spec.num_classes

    alive = np.arange(n)
    current = cloud
    hierarchy = build_hierarchy(current, spec)
    pred = predict(current, checkpoint, hierarchy)
    base = MetricsRecord.compute(pred, current.labels, num_classes)
    report = DropReport(mode, class_id, budget, steps, recompute, [
        DropStep(0, base.per_class[class_id], base.miou)
    ])
    if math.isnan(base.per_class[class_id]):
        report.truncated, report.reason = True, "target class absent"
        report.steps = []
        return report
    ranking = None
    removed_total = 0
    for size in _chunks(budget, steps):
        if size == 0:
            continue
        if ranking is None or recompute:
            try:
                if scorer is None:
                    sal = explain_detailed(current, checkpoint, request, hierarchy).maps[0].values
                else:
                    sal = np.asarray(scorer(current, hierarchy), dtype=np.float64)
            except EmptySubsetError:
                report.truncated, report.reason = True, "target class no longer predicted"
                break
            ranking = alive[_rank(sal, mode)]
        # with a frozen ranking, skip indices that are already gone
        order = ranking[np.isin(ranking, alive)]
        drop = np.sort(order[:size])
        if len(alive) - size < spec.k_nn:
            report.truncated, report.reason = True, "cloud exhausted"
            break
        keep_mask = ~np.isin(alive, drop)
        alive = alive[keep_mask]
        current = cloud.subset(alive)
        hierarchy = build_hierarchy(current, spec)
        pred = predict(current, checkpoint, hierarchy)
        metrics = MetricsRecord.compute(pred, current.labels, num_classes)
        if math.isnan(metrics.per_class[class_id]):
            report.truncated, report.reason = True, "target class exhausted"
            break
        removed_total += size
        report.steps.append(DropStep(removed_total, metrics.per_class[class_id], metrics.miou, drop))
    return report


# ----------------------------------------------------------------------------
# PCA


@dataclass
class Embedding:
    coords: np.ndarray  # (M, 2)
    components: np.ndarray  # (2, k), rows unit norm
    variances: np.ndarray  # (2,)


def _start_vector(k: int, salt: int) -> np.ndarray:
    v = np.random.Generator(np.random.PCG64(1234 + salt)).standard_normal(k)
    return v / np.linalg.norm(v)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def power_iteration(cov: np.ndarray, start: np.ndarray, against=(), tol: float = 1e-10,
                    max_iter: int = 10000) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of a symmetric PSD matrix restricted to the
    orthogonal complement of the vectors in ``against``."""

    def project(x):
        for u in against:
            x = x - (u @ x) * u
        return x

    v = project(start)
    norm = np.linalg.norm(v)
    if norm == 0:
        return v, 0.0
    v = v / norm
    for _ in range(max_iter):
        w = project(cov @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w = w / norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def pca_embed(activation, tol: float = 1e-10, max_iter: int = 10000) -> Embedding:
    """Two-component PCA of an (M, k) activation matrix via power iteration
    with deflation. Components are unit norm, orthogonal and sign-fixed so
    their largest-magnitude entry is positive. Zero-variance input yields
    zero components and coordinates."""
    X = np.asarray(activation, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ValueError(f"pca_embed needs an (M>=2, k>=2) matrix, got {X.shape}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    k = X.shape[1]
    scale = np.trace(cov)
    if scale <= 0:
        return Embedding(np.zeros((X.shape[0], 2)), np.zeros((2, k)), np.zeros(2))
    first, var1 = power_iteration(cov, _start_vector(k, 0), (), tol, max_iter)
    first = _fix_sign(first)
    second, var2 = power_iteration(cov, _start_vector(k, 1), (first,), tol, max_iter)
    if np.linalg.norm(second) == 0:
        # start vector parallel to the first component; any orthogonal unit vector works
        e = np.eye(k)[np.argmin(np.abs(first))]
        second = e - (first @ e) * first
        second /= np.linalg.norm(second)
    # re-orthogonalize once against rounding drift
    second = second - (first @ second) * first
    second = _fix_sign(second / np.linalg.norm(second))
    comps = np.vstack([first, second])
    return Embedding(centered @ comps.T, comps, np.array([var1, max(var2, 0.0)]))
