"""Point clouds, exact KD-tree search, voxel-grid subsampling and synthetic scenes."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("ground", "car", "pole", "vegetation", "building")
GROUND, CAR, POLE, VEGETATION, BUILDING = range(5)


@dataclass
class PointCloud:
    """N points in meters with optional per-point features and class ids."""

    coords: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = self.coords.shape[0]
        if n < 1:
            raise ValueError("PointCloud needs at least one point")
        if not np.isfinite(self.coords).all():
            raise ValueError("PointCloud coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if self.features.shape[0] != n:
                raise ValueError(f"features have {self.features.shape[0]} rows, expected {n}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError(f"labels have {self.labels.shape[0]} entries, expected {n}")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("negative class id")
            if self.num_classes is not None and self.labels.max() >= self.num_classes:
                raise ValueError(f"class id {self.labels.max()} >= {self.num_classes}")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.coords[idx],
            None if self.features is None else self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.num_classes,
        )


def squared_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return (diff * diff).sum(axis=1)


class KdTree:
    """Balanced median-split KD-tree with exact k-NN and radius queries.

    Splits run along the axis of widest spread at the median until a node
    holds at most ``leaf_size`` points. Points are stored leaf-contiguous in
    ``order``; each node keeps its bounding box for pruning. Queries return
    the lowest index among equidistant points.
    """

    def __init__(self, coords, leaf_size: int = 40):
        data = np.asarray(coords, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError("KdTree needs a non-empty (N, D) coordinate array")
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.data = data
        self.data.setflags(write=False)
        self.leaf_size = leaf_size
        self.order = np.arange(data.shape[0])
        # node arrays: start, stop, left, right (-1 for leaves), bbox
        self._start: list[int] = []
        self._stop: list[int] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._lo: list[np.ndarray] = []
        self._hi: list[np.ndarray] = []
        self._build(0, data.shape[0])
        self.lo = np.array(self._lo)
        self.hi = np.array(self._hi)
        self.sorted_data = data[self.order]

    def __len__(self) -> int:
        return self.data.shape[0]

    def _build(self, start: int, stop: int) -> int:
        node = len(self._start)
        pts = self.data[self.order[start:stop]]
        self._start.append(start)
        self._stop.append(stop)
        self._left.append(-1)
        self._right.append(-1)
        self._lo.append(pts.min(axis=0))
        self._hi.append(pts.max(axis=0))
        n = stop - start
        if n <= self.leaf_size:
            return node
        spread = self._hi[node] - self._lo[node]
        axis = int(np.argmax(spread))
        mid = n // 2
        seg = self.order[start:stop]
        part = np.argsort(self.data[seg, axis], kind="stable")
        self.order[start:stop] = seg[part]
        self._left[node] = self._build(start, start + mid)
        self._right[node] = self._build(start + mid, stop)
        return node

    @property
    def num_nodes(self) -> int:
        return len(self._start)

    def leaves(self) -> list[np.ndarray]:
        return [
            self.order[self._start[i] : self._stop[i]]
            for i in range(self.num_nodes)
            if self._left[i] < 0
        ]

    def _box_dist(self, node: int, q: np.ndarray) -> float:
        d = np.maximum(self.lo[node] - q, 0.0) + np.maximum(q - self.hi[node], 0.0)
        return float((d * d).sum())

    def query(self, q, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest neighbors of one point: (indices, distances)."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} must be between 1 and the tree size {n}")
        best_d = np.empty(0)
        best_i = np.empty(0, dtype=np.int64)
        worst = math.inf
        heap = [(self._box_dist(0, q), 0)]
        while heap:
            bd, node = heapq.heappop(heap)
            if best_d.size == k and bd > worst:
                break
            left = self._left[node]
            if left >= 0:
                for child in (left, self._right[node]):
                    cd = self._box_dist(child, q)
                    if best_d.size < k or cd <= worst:
                        heapq.heappush(heap, (cd, child))
                continue
            s, e = self._start[node], self._stop[node]
            d = squared_distances(self.sorted_data[s:e], q)
            cand_d = np.concatenate([best_d, d])
            cand_i = np.concatenate([best_i, self.order[s:e]])
            keep = np.lexsort((cand_i, cand_d))[:k]
            best_d, best_i = cand_d[keep], cand_i[keep]
            if best_d.size == k:
                worst = float(best_d[-1])
        return best_i, np.sqrt(best_d)

    def query_many(self, points, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact k-NN; returns (Q, k) index and distance arrays.

        All queries visit leaves in order of increasing box distance, one leaf
        per round, and drop out once their next leaf is farther than their
        current k-th neighbor. Results equal :meth:`query` row for row.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.data.shape[1])
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} must be between 1 and the tree size {n}")
        leaf_pts, leaf_lo, leaf_hi = self._leaf_table()
        q_count = points.shape[0]
        gap = np.maximum(leaf_lo[None] - points[:, None], 0.0) + np.maximum(
            points[:, None] - leaf_hi[None], 0.0
        )
        box = (gap * gap).sum(axis=2)
        visit = np.argsort(box, axis=1, kind="stable")
        best_d = np.full((q_count, k), np.inf)
        best_i = np.full((q_count, k), n, dtype=np.int64)
        rows = np.arange(q_count)
        for r in range(visit.shape[1]):
            leaf = visit[rows, r]
            live = box[rows, leaf] <= best_d[rows, -1]
            rows, leaf = rows[live], leaf[live]
            if rows.size == 0:
                break
            cand = leaf_pts[leaf]  # (A, S), -1 padded
            diff = self.data[np.maximum(cand, 0)] - points[rows, None]
            d = (diff * diff).sum(axis=2)
            d[cand < 0] = np.inf
            cand = np.where(cand < 0, n, cand)
            all_d = np.concatenate([best_d[rows], d], axis=1)
            all_i = np.concatenate([best_i[rows], cand], axis=1)
            keep = np.lexsort((all_i, all_d), axis=1)[:, :k]
            best_d[rows] = np.take_along_axis(all_d, keep, axis=1)
            best_i[rows] = np.take_along_axis(all_i, keep, axis=1)
        return best_i, np.sqrt(best_d)

    def _leaf_table(self):
        if not hasattr(self, "_leaf_cache"):
            leaves = [i for i in range(self.num_nodes) if self._left[i] < 0]
            width = max(self._stop[i] - self._start[i] for i in leaves)
            table = np.full((len(leaves), width), -1, dtype=np.int64)
            for row, i in enumerate(leaves):
                members = self.order[self._start[i] : self._stop[i]]
                table[row, : members.size] = members
            self._leaf_cache = (table, self.lo[leaves], self.hi[leaves])
        return self._leaf_cache

    def query_radius(self, q, radius: float) -> np.ndarray:
        """Sorted indices of all points within ``radius`` (inclusive)."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        r2 = radius * radius
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            if self._box_dist(node, q) > r2:
                continue
            left = self._left[node]
            if left >= 0:
                stack.append(left)
                stack.append(self._right[node])
                continue
            s, e = self._start[node], self._stop[node]
            d = squared_distances(self.sorted_data[s:e], q)
            found.append(self.order[s:e][d <= r2])
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(found))


def build_kdtree(coords, leaf_size: int = 40) -> KdTree:
    return KdTree(coords, leaf_size)


def knn_query(tree: KdTree, q, k: int = 1) -> np.ndarray:
    return tree.query(q, k)[0]


def grid_subsample(cloud: PointCloud, voxel: float) -> tuple[PointCloud, np.ndarray]:
    """One barycentric representative per occupied voxel.

    Voxels live on a lattice anchored at the world origin, so subsampling an
    already subsampled cloud with the same voxel size is a no-op in count.
    Representatives are ordered by voxel key. Features are averaged and the
    label is the majority vote (lowest id on ties). Returns the new cloud and
    the parent index of every original point.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(cloud.coords / voxel).astype(np.int64)
    _, mapping = np.unique(keys, axis=0, return_inverse=True)
    mapping = mapping.reshape(-1)
    m = int(mapping.max()) + 1
    counts = np.bincount(mapping, minlength=m).astype(np.float64)
    coords = np.zeros((m, 3))
    np.add.at(coords, mapping, cloud.coords)
    coords /= counts[:, None]
    feats = None
    if cloud.features is not None:
        feats = np.zeros((m, cloud.features.shape[1]))
        np.add.at(feats, mapping, cloud.features)
        feats /= counts[:, None]
    labels = None
    if cloud.labels is not None:
        ncls = max(int(cloud.labels.max()) + 1, cloud.num_classes or 0)
        votes = np.zeros((m, ncls), dtype=np.int64)
        np.add.at(votes, (mapping, cloud.labels), 1)
        labels = votes.argmax(axis=1)
    return PointCloud(coords, feats, labels, cloud.num_classes), mapping


def euclidean_cluster(cloud: PointCloud, indices, link_radius: float = 0.8) -> list[np.ndarray]:
    """Connected components of ``indices`` under the link-radius graph.

    Clusters hold cloud indices in ascending order and are sorted by their
    lowest member.
    """
    if link_radius <= 0:
        raise ValueError("link_radius must be positive")
    indices = np.unique(np.asarray(indices, dtype=np.int64))
    if indices.size == 0:
        return []
    tree = KdTree(cloud.coords[indices])
    comp = np.full(indices.size, -1)
    clusters = []
    for seed in range(indices.size):
        if comp[seed] >= 0:
            continue
        cid = len(clusters)
        comp[seed] = cid
        members = [seed]
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in tree.query_radius(tree.data[i], link_radius):
                if comp[j] < 0:
                    comp[j] = cid
                    members.append(j)
                    queue.append(j)
        clusters.append(indices[np.sort(members)])
    return clusters


# ----------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneConfig:
    """Parameters of the synthetic street scene.

    Densities are points per square meter of the nominal sampled surface;
    each instance receives ``max(1, round(density * area))`` points (see
    :func:`instance_area`). Object counts are inclusive ranges.
    """

    seed: int = 0
    extent: float = 8.0
    counts: dict[int, tuple[int, int]] = field(
        default_factory=lambda: {CAR: (2, 3), POLE: (2, 4), VEGETATION: (2, 3), BUILDING: (1, 2)}
    )
    densities: dict[int, float] = field(
        default_factory=lambda: {GROUND: 3.0, CAR: 8.0, POLE: 15.0, VEGETATION: 5.0, BUILDING: 4.0}
    )
    noise: float = 0.02
    car_size: tuple[float, float, float] = (4.0, 2.0, 1.5)
    pole_radius: float = 0.12
    pole_height: float = 5.0
    bush_axes: tuple[float, float, float] = (1.4, 1.4, 1.4)
    wall_size: tuple[float, float] = (8.0, 6.0)

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        for c, (lo, hi) in self.counts.items():
            if lo < 1 or hi < lo:
                raise ValueError(f"invalid count range {lo}..{hi} for class {c}")
        if self.counts.get(BUILDING, (1, 1))[1] > 4:
            raise ValueError("at most 4 building walls (one per scene edge)")
        if any(d <= 0 for d in self.densities.values()):
            raise ValueError("densities must be positive")


def _ellipsoid_area(a: float, b: float, c: float) -> float:
    # Knud Thomsen's approximation, relative error below 1.1%
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def instance_area(cfg: SceneConfig, cls: int) -> float:
    if cls == GROUND:
        return (2 * cfg.extent) ** 2
    if cls == CAR:
        l, w, h = cfg.car_size
        return l * w + 2 * (l * h + w * h)
    if cls == POLE:
        return 2 * math.pi * cfg.pole_radius * cfg.pole_height
    if cls == VEGETATION:
        return _ellipsoid_area(*cfg.bush_axes)
    if cls == BUILDING:
        return cfg.wall_size[0] * cfg.wall_size[1]
    raise ValueError(f"unknown class {cls}")


def instance_points(cfg: SceneConfig, cls: int) -> int:
    return max(1, round(cfg.densities[cls] * instance_area(cfg, cls)))


def _car_points(rng, n, cfg):
    l, w, h = cfg.car_size
    faces = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    # top
    t = face == 0
    pts[t] = np.c_[(u[t] - 0.5) * l, (v[t] - 0.5) * w, np.full(t.sum(), h)]
    for f, y in ((1, -w / 2), (2, w / 2)):
        s = face == f
        pts[s] = np.c_[(u[s] - 0.5) * l, np.full(s.sum(), y), v[s] * h]
    for f, x in ((3, -l / 2), (4, l / 2)):
        s = face == f
        pts[s] = np.c_[np.full(s.sum(), x), (u[s] - 0.5) * w, v[s] * h]
    return pts


def _rotate_z(pts, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    return out


def scene_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th scene of a run, via numpy's SeedSequence."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


def synth_scene(cfg: SceneConfig) -> PointCloud:
    """Deterministic labeled street scene.

    Randomness comes from numpy's PCG64 bit generator seeded with
    ``cfg.seed``; PCG64 streams and the ``random``/``normal``/``integers``
    transforms are stable across platforms. Ground is the square
    ``[-extent, extent]^2`` at z = 0, walls stand on distinct scene edges and
    the remaining objects are placed by rejection sampling so their
    footprints do not overlap.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    e = cfg.extent
    parts: list[np.ndarray] = []
    labels: list[np.ndarray] = []

    def emit(pts, cls):
        parts.append(pts)
        labels.append(np.full(pts.shape[0], cls, dtype=np.int64))

    n = instance_points(cfg, GROUND)
    emit(np.c_[rng.uniform(-e, e, (n, 2)), np.zeros(n)], GROUND)

    count = {c: int(rng.integers(lo, hi + 1)) for c, (lo, hi) in sorted(cfg.counts.items())}

    wl, wh = cfg.wall_size
    sides = rng.permutation(4)[: count.get(BUILDING, 0)]
    for side in sides:
        n = instance_points(cfg, BUILDING)
        along = rng.uniform(-e + wl / 2, e - wl / 2) if wl < 2 * e else 0.0
        t = along + (rng.random(n) - 0.5) * wl
        z = rng.random(n) * wh
        off = e - 0.25
        pts = {
            0: np.c_[t, np.full(n, -off), z],
            1: np.c_[t, np.full(n, off), z],
            2: np.c_[np.full(n, -off), t, z],
            3: np.c_[np.full(n, off), t, z],
        }[int(side)]
        emit(pts, BUILDING)

    radius = {
        CAR: 0.5 * math.hypot(*cfg.car_size[:2]),
        POLE: cfg.pole_radius + 0.3,
        VEGETATION: max(cfg.bush_axes[:2]),
    }
    placed: list[tuple[float, float, float]] = []
    margin = 0.5
    for cls in (CAR, POLE, VEGETATION):
        for _ in range(count.get(cls, 0)):
            r = radius[cls]
            lim = e - r - 0.5
            if lim <= 0:
                raise ValueError("scene extent too small for objects")
            for _attempt in range(1000):
                cx, cy = rng.uniform(-lim, lim, 2)
                if all(math.hypot(cx - x, cy - y) >= r + rr + margin for x, y, rr in placed):
                    break
            else:
                raise RuntimeError("could not place objects without overlap; enlarge extent")
            placed.append((cx, cy, r))
            n = instance_points(cfg, cls)
            if cls == CAR:
                pts = _rotate_z(_car_points(rng, n, cfg), rng.uniform(0, math.pi))
            elif cls == POLE:
                th = rng.uniform(0, 2 * math.pi, n)
                pts = np.c_[
                    cfg.pole_radius * np.cos(th),
                    cfg.pole_radius * np.sin(th),
                    rng.random(n) * cfg.pole_height,
                ]
            else:
                d = rng.normal(size=(n, 3))
                d /= np.linalg.norm(d, axis=1, keepdims=True)
                a, b, c = cfg.bush_axes
                pts = d * np.array([a, b, c]) + np.array([0.0, 0.0, c])
            emit(pts + np.array([cx, cy, 0.0]), cls)

    coords = np.concatenate(parts)
    if cfg.noise > 0:
        coords = coords + rng.normal(scale=cfg.noise, size=coords.shape)
    return PointCloud(coords, labels=np.concatenate(labels), num_classes=len(CLASS_NAMES))
