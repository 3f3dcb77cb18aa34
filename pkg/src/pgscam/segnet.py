"""Toy encoder-decoder point segmentation network with named activation taps.

The network is deliberately small: each encoder stage gathers the ``k_nn``
nearest points of the finer level around every point of a voxel-subsampled
level, applies a shared linear layer to ``[features, relative position]``
and max-pools over the neighborhood. The decoder upsamples by 1-NN gather,
concatenates the skip features of the finer level and applies another shared
layer. Taps ``A1..A{2S+2}`` expose every stage output:

    A1..AS      encoder stages, levels 1..S
    A{S+1}      bottleneck, level S
    A{S+2}..    decoder stages, levels S-1..0
    A{2S+2}     pre-head features, level 0 (full resolution)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import KdTree, PointCloud, grid_subsample

MAGIC = b"PGSC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    num_classes: int = 5
    voxels: tuple[float, ...] = (0.2, 0.4, 0.8)
    k_nn: int = 8
    widths: tuple[int, ...] = (16, 32, 64)
    in_features: int = 3
    head_width: int = 16

    def __post_init__(self):
        if len(self.voxels) != len(self.widths) or not self.voxels:
            raise ValueError("voxels and widths need one entry per encoder stage")
        if any(b <= a for a, b in zip(self.voxels, self.voxels[1:])) or self.voxels[0] <= 0:
            raise ValueError("voxel sizes must be positive and strictly increasing")
        if min(self.widths) < 1 or self.head_width < 1 or self.k_nn < 1:
            raise ValueError("widths, head_width and k_nn must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def stages(self) -> int:
        return len(self.voxels)

    @property
    def tap_names(self) -> list[str]:
        return [f"A{i}" for i in range(1, 2 * self.stages + 3)]

    def tap_levels(self) -> list[int]:
        s = self.stages
        return list(range(1, s + 1)) + [s] + list(range(s - 1, -1, -1)) + [0]

    def level_width(self, level: int) -> int:
        """Channel count of the encoder features living at ``level``."""
        return self.in_features if level == 0 else self.widths[level - 1]

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for s in range(1, self.stages + 1):
            fan_in = self.level_width(s - 1) + 3
            w = self.widths[s - 1]
            shapes += [
                (f"enc{s}.W", (fan_in, w)),
                (f"enc{s}.b", (w,)),
                (f"enc{s}b.W", (w, w)),
                (f"enc{s}b.b", (w,)),
            ]
        w = self.widths[-1]
        shapes += [("bottleneck.W", (w, w)), ("bottleneck.b", (w,))]
        upper = w
        for d in range(1, self.stages + 1):
            level = self.stages - d
            out = self.widths[level - 1] if level >= 1 else self.head_width
            shapes += [
                (f"dec{d}.W", (upper + self.level_width(level), out)),
                (f"dec{d}.b", (out,)),
            ]
            upper = out
        shapes += [
            ("pre.W", (upper, self.head_width)),
            ("pre.b", (self.head_width,)),
            ("head.W", (self.head_width, self.num_classes)),
            ("head.b", (self.num_classes,)),
        ]
        return shapes

    def to_header(self) -> list[str]:
        return [
            f"num_classes {self.num_classes}",
            "voxels " + " ".join(repr(float(v)) for v in self.voxels),
            f"k_nn {self.k_nn}",
            "widths " + " ".join(str(w) for w in self.widths),
            f"in_features {self.in_features}",
            f"head_width {self.head_width}",
        ]

    @classmethod
    def from_header(cls, fields: dict[str, list[str]]) -> "ArchitectureSpec":
        return cls(
            num_classes=int(fields["num_classes"][0]),
            voxels=tuple(float(v) for v in fields["voxels"]),
            k_nn=int(fields["k_nn"][0]),
            widths=tuple(int(v) for v in fields["widths"]),
            in_features=int(fields["in_features"][0]),
            head_width=int(fields["head_width"][0]),
        )


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        lines = ["pgscam-checkpoint"] + self.spec.to_header()
        for name, shape in self.spec.parameter_shapes():
            lines.append(f"param {name} " + " ".join(str(d) for d in shape))
        header = ("\n".join(lines) + "\n").encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<i", FORMAT_VERSION))
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for name, _ in self.spec.parameter_shapes():
            buf.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise ValueError("not a checkpoint: bad magic bytes")
        (version,) = struct.unpack_from("<i", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", blob, 8)
        header = blob[12 : 12 + hlen].decode("utf-8").splitlines()
        fields: dict[str, list[str]] = {}
        declared = []
        for line in header[1:]:
            key, *rest = line.split()
            if key == "param":
                declared.append((rest[0], tuple(int(d) for d in rest[1:])))
            else:
                fields[key] = rest
        spec = ArchitectureSpec.from_header(fields)
        if declared != spec.parameter_shapes():
            raise ValueError("checkpoint parameter table does not match its architecture")
        offset = 12 + hlen
        params = {}
        for name, shape in declared:
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(blob):
                raise ValueError("checkpoint truncated")
            params[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(blob):
            raise ValueError("trailing bytes after checkpoint parameters")
        return cls(spec, params)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_checkpoint(spec: ArchitectureSpec, seed: int = 0) -> Checkpoint:
    """Glorot-uniform weights, zero biases, drawn from PCG64(seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in spec.parameter_shapes():
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            params[name] = np.zeros(shape)
    return Checkpoint(spec, params)


@dataclass
class Hierarchy:
    """Cloud-dependent structure shared by every forward pass on one cloud."""

    levels: list[np.ndarray]  # level coordinates, level 0 = input points
    neighbors: list[np.ndarray]  # [s-1]: (M_s, k) indices into level s-1
    relative: list[np.ndarray]  # [s-1]: (M_s * k, 3) offsets / voxel
    upsample: list[np.ndarray]  # [s-1]: level s-1 -> nearest level s point
    features: np.ndarray  # input features at level 0


def build_hierarchy(cloud: PointCloud, spec: ArchitectureSpec) -> Hierarchy:
    n = len(cloud)
    if n < spec.k_nn:
        raise ValueError(f"cloud has {n} points, network needs at least k_nn={spec.k_nn}")
    if spec.in_features == 3:
        features = cloud.coords - cloud.coords.mean(axis=0)
    elif cloud.features is not None and cloud.features.shape[1] == spec.in_features:
        features = cloud.features
    else:
        raise ValueError(f"network expects {spec.in_features} input features")
    levels = [cloud.coords]
    current = PointCloud(cloud.coords)
    for voxel in spec.voxels:
        current, _ = grid_subsample(current, voxel)
        levels.append(current.coords)
    neighbors, relative, upsample = [], [], []
    for s, voxel in enumerate(spec.voxels, start=1):
        fine, coarse = levels[s - 1], levels[s]
        k = min(spec.k_nn, fine.shape[0])
        fine_tree = KdTree(fine)
        nb, _ = fine_tree.query_many(coarse, k)
        neighbors.append(nb)
        rel = (fine[nb] - coarse[:, None, :]) / voxel
        relative.append(rel.reshape(-1, 3))
        up, _ = KdTree(coarse).query_many(fine, 1)
        upsample.append(up[:, 0])
    return Hierarchy(levels, neighbors, relative, upsample, np.asarray(features, dtype=np.float64))


@dataclass
class LayerTap:
    name: str
    level: int
    coords: np.ndarray
    activation: T.Tensor

    @property
    def resolution(self) -> int:
        return self.coords.shape[0]


@dataclass
class ForwardResult:
    logits: T.Tensor  # (N, C)
    taps: list[LayerTap]
    params: dict[str, T.Tensor] = field(default_factory=dict)

    def tap(self, name: str) -> LayerTap:
        for t in self.taps:
            if t.name == name:
                return t
        raise KeyError(f"unknown tap {name!r}")


def _linear(x, params, prefix):
    return T.add_bias(T.matmul(x, params[prefix + ".W"]), params[prefix + ".b"])


def forward(
    cloud: PointCloud,
    checkpoint: Checkpoint,
    hierarchy: Hierarchy | None = None,
    *,
    train: bool = False,
    tap_offsets: dict[str, np.ndarray] | None = None,
    params: dict[str, T.Tensor] | None = None,
) -> ForwardResult:
    """Per-point logits at full resolution plus every activation tap.

    With ``train=True`` the parameters are graph leaves that receive
    gradients; otherwise only the input is a graph leaf, which is enough for
    tap gradients. ``tap_offsets`` adds constants to tap activations (used by
    finite-difference checks). ``params`` supplies ready-made parameter
    tensors in place of the checkpoint arrays.
    """
    spec = checkpoint.spec
    if hierarchy is None:
        hierarchy = build_hierarchy(cloud, spec)
    if params is None:
        params = {k: T.Tensor(v, requires_grad=train) for k, v in checkpoint.params.items()}
    offsets = tap_offsets or {}
    levels = spec.tap_levels()
    names = iter(spec.tap_names)
    taps: list[LayerTap] = []

    def tap(x):
        name = next(names)
        if name in offsets:
            off = offsets[name]
            x = T.add(x, off if isinstance(off, T.Tensor) else T.Tensor(off))
        level = levels[len(taps)]
        taps.append(LayerTap(name, level, hierarchy.levels[level], x))
        return x

    x = T.Tensor(hierarchy.features, requires_grad=True)
    skips = [x]
    for s in range(1, spec.stages + 1):
        nb = hierarchy.neighbors[s - 1]
        pairs = T.concat([T.gather_rows(x, nb.reshape(-1)), T.Tensor(hierarchy.relative[s - 1])])
        h = T.relu(_linear(pairs, params, f"enc{s}"))
        h = T.relu(_linear(h, params, f"enc{s}b"))
        k = nb.shape[1]
        groups = np.arange(nb.shape[0] * k).reshape(-1, k)
        x = tap(T.neighborhood_max(h, groups))
        skips.append(x)
    x = tap(T.relu(_linear(x, params, "bottleneck")))
    for d in range(1, spec.stages + 1):
        level = spec.stages - d
        up = T.gather_rows(x, hierarchy.upsample[level])
        x = tap(T.relu(_linear(T.concat([up, skips[level]]), params, f"dec{d}")))
    x = tap(T.relu(_linear(x, params, "pre")))
    logits = _linear(x, params, "head")
    return ForwardResult(logits, taps, params)


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ``np.argmax`` returns the lowest class id on ties."""
    return np.asarray(logits).argmax(axis=1)


def predict(cloud: PointCloud, checkpoint: Checkpoint, hierarchy: Hierarchy | None = None) -> np.ndarray:
    return predict_from_logits(forward(cloud, checkpoint, hierarchy).logits.values)


def dataset_loss(scenes, checkpoint: Checkpoint, hierarchies=None) -> float:
    """Mean per-scene cross-entropy with the given parameters."""
    losses = []
    for i, scene in enumerate(scenes):
        h = hierarchies[i] if hierarchies else None
        logits = forward(scene, checkpoint, h).logits
        losses.append(T.softmax_cross_entropy(logits, scene.labels).item())
    return float(np.mean(losses))


def train(
    scenes: list[PointCloud],
    spec: ArchitectureSpec,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    log=None,
) -> tuple[Checkpoint, list[float]]:
    """Adam on per-scene cross-entropy, one step per scene.

    Scenes are visited in a seeded random order each epoch. Returns the final
    checkpoint and the mean training loss of every epoch (losses are taken
    before each step).
    """
    for i, scene in enumerate(scenes):
        if scene.labels is None:
            raise ValueError(f"scene {i} has no labels")
    ckpt = init_checkpoint(spec, seed)
    if epochs <= 0:
        return ckpt, []
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    hierarchies = [build_hierarchy(s, spec) for s in scenes]
    m = {k: np.zeros_like(v) for k, v in ckpt.params.items()}
    v = {k: np.zeros_like(p) for k, p in ckpt.params.items()}
    step = 0
    history = []
    for epoch in range(epochs):
        losses = []
        for i in rng.permutation(len(scenes)):
            result = forward(scenes[i], ckpt, hierarchies[i], train=True)
            loss = T.softmax_cross_entropy(result.logits, scenes[i].labels)
            T.backward(loss)
            losses.append(loss.item())
            step += 1
            for name, p in result.params.items():
                g = p.grad
                m[name] = beta1 * m[name] + (1 - beta1) * g
                v[name] = beta2 * v[name] + (1 - beta2) * g * g
                mhat = m[name] / (1 - beta1**step)
                vhat = v[name] / (1 - beta2**step)
                ckpt.params[name] = ckpt.params[name] - lr * mhat / (np.sqrt(vhat) + eps)
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
    return ckpt, history
