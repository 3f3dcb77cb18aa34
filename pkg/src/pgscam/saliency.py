"""Point-wise gradient saliency for segmentation networks.

Pipeline for one request: forward pass, sum the target-class logits over the
chosen subset of points, one backward pass, then for every requested tap
collapse the gradient over points into one weight per channel, weight the
activations, rectify, min-max normalize and carry the map back to full
resolution through nearest-neighbor lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import KdTree, PointCloud, euclidean_cluster
from .segnet import Checkpoint, ForwardResult, Hierarchy, LayerTap, forward, predict_from_logits

SIGNS = ("positive", "counterfactual")
AGGREGATIONS = ("sum", "mean")


class EmptySubsetError(ValueError):
    pass


@dataclass(frozen=True)
class SubsetSpec:
    """Which points' logits form the objective.

    ``mode`` is one of ``single`` (uses ``index``), ``class_all`` (uses
    ``class_id``), ``class_instance`` (``class_id``, ``instance`` ordinal and
    ``link_radius``) or ``all_points``.
    """

    mode: str
    index: int | None = None
    class_id: int | None = None
    instance: int = 0
    link_radius: float = 0.8
    ground_truth: bool = False

    @classmethod
    def single(cls, index: int) -> "SubsetSpec":
        return cls("single", index=index)

    @classmethod
    def class_all(cls, class_id: int, ground_truth: bool = False) -> "SubsetSpec":
        return cls("class_all", class_id=class_id, ground_truth=ground_truth)

    @classmethod
    def class_instance(cls, class_id: int, instance: int = 0, link_radius: float = 0.8,
                       ground_truth: bool = False) -> "SubsetSpec":
        return cls("class_instance", class_id=class_id, instance=instance,
                   link_radius=link_radius, ground_truth=ground_truth)

    @classmethod
    def all_points(cls) -> "SubsetSpec":
        return cls("all_points")

    @classmethod
    def parse(cls, text: str) -> "SubsetSpec":
        """Parse ``single:i``, ``class[:c]``, ``instance:c:n`` or ``all``.

        A bare ``class`` leaves the class id unset; :func:`explain` fills in
        the request's target class.
        """
        parts = text.split(":")
        try:
            if parts[0] == "single" and len(parts) == 2:
                return cls.single(int(parts[1]))
            if parts[0] == "class" and len(parts) <= 2:
                return cls("class_all", class_id=int(parts[1]) if len(parts) == 2 else None)
            if parts[0] == "instance" and len(parts) == 3:
                return cls.class_instance(int(parts[1]), int(parts[2]))
            if parts[0] == "all" and len(parts) == 1:
                return cls.all_points()
        except ValueError:
            pass
        raise ValueError(f"bad subset {text!r}; expected single:i, class[:c], instance:c:n or all")


def select_subset(cloud: PointCloud, predictions, spec: SubsetSpec) -> np.ndarray:
    n = len(cloud)
    if spec.mode == "single":
        if spec.index is None or not 0 <= spec.index < n:
            raise IndexError(f"point index {spec.index} outside [0, {n})")
        return np.array([spec.index], dtype=np.int64)
    if spec.mode == "all_points":
        return np.arange(n, dtype=np.int64)
    if spec.mode not in ("class_all", "class_instance"):
        raise ValueError(f"unknown subset mode {spec.mode!r}")
    if spec.ground_truth:
        if cloud.labels is None:
            raise ValueError("ground-truth subset requested on an unlabeled cloud")
        labels = cloud.labels
    else:
        labels = np.asarray(predictions)
    members = np.flatnonzero(labels == spec.class_id)
    if members.size == 0:
        raise EmptySubsetError(f"no points of class {spec.class_id}")
    if spec.mode == "class_all":
        return members
    clusters = euclidean_cluster(cloud, members, spec.link_radius)
    if not 0 <= spec.instance < len(clusters):
        raise IndexError(f"instance {spec.instance} out of range: class {spec.class_id} has {len(clusters)}")
    return clusters[spec.instance]


def subset_objective(logits: T.Tensor, subset, class_id: int) -> T.Tensor:
    """Sum of the class logit over the subset, kept on the live graph."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise EmptySubsetError("objective over an empty subset")
    return T.total(T.column(T.gather_rows(logits, subset), class_id))


@dataclass
class GradientInfluence:
    layer: str
    weights: np.ndarray  # (k,)


@dataclass
class SaliencyMap:
    layer: str
    class_id: int
    sign: str
    raw: np.ndarray  # (M,) rectified, pre-normalization
    normalized: np.ndarray  # (M,) in [0, 1]
    upsampled: np.ndarray | None = None  # (N,) in [0, 1]
    raw_upsampled: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return self.normalized if self.upsampled is None else self.upsampled


def gradient_influence(tap: LayerTap, sign: str = "positive", aggregation: str = "sum") -> GradientInfluence:
    """Channel weights from the gradient already stored on the tap."""
    if sign not in SIGNS:
        raise ValueError(f"sign must be one of {SIGNS}")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    grad = tap.activation.grad
    if grad is None:
        raise T.GraphError(f"tap {tap.name} has no gradient; run backward on the objective first")
    g = grad.sum(axis=0)
    if aggregation == "mean":
        g = g / grad.shape[0]
    if sign == "counterfactual":
        g = -g
    return GradientInfluence(tap.name, g)


def minmax(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def form_heatmap(influence: GradientInfluence, tap: LayerTap, class_id: int = -1,
                 sign: str = "positive") -> SaliencyMap:
    A = tap.activation.values
    if influence.weights.shape != (A.shape[1],):
        raise ValueError(f"influence has {influence.weights.size} channels, tap {tap.name} has {A.shape[1]}")
    raw = np.maximum(A @ influence.weights, 0.0)
    return SaliencyMap(tap.name, class_id, sign, raw, minmax(raw))


def kdtree_upsample(saliency: SaliencyMap, tap_coords, full_coords, leaf_size: int = 40) -> SaliencyMap:
    """Give every full-resolution point the value of its nearest tap point."""
    tap_coords = np.asarray(tap_coords, dtype=np.float64)
    if tap_coords.shape[0] != saliency.normalized.shape[0]:
        raise ValueError(
            f"map has {saliency.normalized.shape[0]} values but {tap_coords.shape[0]} tap points"
        )
    idx, _ = KdTree(tap_coords, leaf_size).query_many(full_coords, 1)
    idx = idx[:, 0]
    saliency.upsampled = saliency.normalized[idx]
    saliency.raw_upsampled = saliency.raw[idx]
    return saliency


@dataclass(frozen=True)
class SaliencyRequest:
    class_id: int
    subset: SubsetSpec
    layers: tuple[str, ...] = ()  # empty: the pre-head tap
    sign: str = "positive"
    aggregation: str = "sum"


@dataclass
class Explanation:
    maps: list[SaliencyMap]
    subset: np.ndarray
    predictions: np.ndarray
    result: ForwardResult


def explain_detailed(cloud: PointCloud, checkpoint: Checkpoint, request: SaliencyRequest,
                     hierarchy: Hierarchy | None = None) -> Explanation:
    spec = checkpoint.spec
    if not 0 <= request.class_id < spec.num_classes:
        raise ValueError(f"class {request.class_id} outside [0, {spec.num_classes})")
    layers = request.layers or (spec.tap_names[-1],)
    unknown = [name for name in layers if name not in spec.tap_names]
    if unknown:
        raise ValueError(f"unknown layers {unknown}; available: {spec.tap_names}")
    result = forward(cloud, checkpoint, hierarchy)
    predictions = predict_from_logits(result.logits.values)
    subset_spec = request.subset
    if subset_spec.mode in ("class_all", "class_instance") and subset_spec.class_id is None:
        subset_spec = SubsetSpec(**{**subset_spec.__dict__, "class_id": request.class_id})
    subset = select_subset(cloud, predictions, subset_spec)
    T.backward(subset_objective(result.logits, subset, request.class_id))
    maps = []
    for name in layers:
        tap = result.tap(name)
        g = gradient_influence(tap, request.sign, request.aggregation)
        smap = form_heatmap(g, tap, request.class_id, request.sign)
        if tap.resolution == len(cloud) and tap.level == 0:
            smap.upsampled = smap.normalized
            smap.raw_upsampled = smap.raw
        else:
            kdtree_upsample(smap, tap.coords, cloud.coords)
        maps.append(smap)
    return Explanation(maps, subset, predictions, result)


def explain(cloud: PointCloud, checkpoint: Checkpoint, request: SaliencyRequest,
            hierarchy: Hierarchy | None = None) -> list[SaliencyMap]:
    """One saliency map per requested layer, all at full resolution."""
    return explain_detailed(cloud, checkpoint, request, hierarchy).maps
