"""Central finite-difference checks of every autodiff rule and of the network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import PointCloud
from .segnet import ArchitectureSpec, build_hierarchy, forward, init_checkpoint

STEP = 1e-6
# coordinates whose branch pattern changes within this distance are skipped
SMOOTH_MARGIN = 1e-4
TOLERANCE = 1e-6


def relative_error(auto: float, fd: float) -> float:
    return abs(auto - fd) / max(1.0, abs(fd))


def check_gradients(
    build: Callable[[dict[str, T.Tensor]], T.Tensor],
    arrays: dict[str, np.ndarray],
    coords: list[tuple[str, tuple]] | None = None,
    h: float = STEP,
) -> tuple[float, int, int]:
    """Compare backward against central differences of ``build``.

    ``build`` maps leaf tensors (one per entry of ``arrays``) to a scalar
    objective. Returns (max relative error, coordinates checked, coordinates
    skipped because a ReLU/max branch flips within ``SMOOTH_MARGIN``).
    """

    def evaluate(values):
        leaves = {k: T.Tensor(v, requires_grad=True) for k, v in values.items()}
        out = build(leaves)
        return out, leaves

    out, leaves = evaluate(arrays)
    T.backward(out)
    base_pattern = T.branch_pattern(out)
    if coords is None:
        coords = [(k, idx) for k, v in arrays.items() for idx in np.ndindex(v.shape)]
    worst, checked, skipped = 0.0, 0, 0
    for name, idx in coords:
        auto = leaves[name].grad[idx] if leaves[name].grad is not None else 0.0
        values = []
        smooth = True
        for delta in (h, -h, SMOOTH_MARGIN, -SMOOTH_MARGIN):
            shifted = dict(arrays)
            shifted[name] = arrays[name].copy()
            shifted[name][idx] += delta
            o, _ = evaluate(shifted)
            if T.branch_pattern(o) != base_pattern:
                smooth = False
                break
            values.append(o.item())
        if not smooth:
            skipped += 1
            continue
        fd = (values[0] - values[1]) / (2 * h)
        worst = max(worst, relative_error(float(auto), fd))
        checked += 1
    return worst, checked, skipped


def _weighted(out: T.Tensor, rng) -> T.Tensor:
    """Random linear functional of ``out`` so every entry matters."""
    return T.total(T.mul(out, T.Tensor(rng.standard_normal(out.shape))))


def _away_from_zero(x, margin=1e-3):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


class _Replay:
    """Returns the same normal draws on every call, so the objective built
    for each finite-difference evaluation uses identical weights."""

    def __init__(self, seed):
        self.seed = seed

    def standard_normal(self, shape):
        return np.random.Generator(np.random.PCG64(self.seed)).standard_normal(shape)


def _case(op, rng):
    w = _Replay(int(rng.integers(2**31)))
    if op == "matmul":
        m, p, n = rng.integers(1, 6, 3)
        arrays = {"a": rng.standard_normal((m, p)), "b": rng.standard_normal((p, n))}
        return arrays, lambda t: _weighted(T.matmul(t["a"], t["b"]), w)
    if op == "relu":
        x = _away_from_zero(rng.standard_normal(tuple(rng.integers(1, 6, 2))))
        return {"x": x}, lambda t: _weighted(T.relu(t["x"]), w)
    if op == "add_bias":
        m, k = rng.integers(1, 6, 2)
        arrays = {"x": rng.standard_normal((m, k)), "b": rng.standard_normal(k)}
        return arrays, lambda t: _weighted(T.add_bias(t["x"], t["b"]), w)
    if op == "gather_rows":
        m, k, q = rng.integers(1, 6, 3)
        idx = rng.integers(0, m, q)
        return {"x": rng.standard_normal((m, k))}, lambda t: _weighted(T.gather_rows(t["x"], idx), w)
    if op == "neighborhood_max":
        m, k = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        q = int(rng.integers(1, 6))
        nbrs = [rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False) for _ in range(q)]
        x = rng.permutation(m * k).reshape(m, k) * 0.1 + rng.uniform(0, 0.01, (m, k))
        return {"x": x}, lambda t: _weighted(T.neighborhood_max(t["x"], nbrs), w)
    if op == "softmax_cross_entropy":
        n, C = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        labels = rng.integers(0, C, n)
        weights = rng.uniform(0.5, 2.0, C) if rng.random() < 0.5 else None
        arrays = {"z": rng.standard_normal((n, C)) * 2}
        return arrays, lambda t: T.scale(T.softmax_cross_entropy(t["z"], labels, weights), 3.0)
    if op == "concat":
        m = int(rng.integers(1, 5))
        arrays = {"a": rng.standard_normal((m, int(rng.integers(1, 4)))),
                  "b": rng.standard_normal((m, int(rng.integers(1, 4))))}
        return arrays, lambda t: _weighted(T.concat([t["a"], t["b"]]), w)
    if op == "column":
        m, k = rng.integers(1, 6, 2)
        c = int(rng.integers(0, k))
        return {"x": rng.standard_normal((m, k))}, lambda t: _weighted(T.column(t["x"], c), w)
    if op in ("add", "mul"):
        shape = tuple(rng.integers(1, 5, 2))
        arrays = {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}
        fn = T.add if op == "add" else T.mul
        return arrays, lambda t: _weighted(fn(t["a"], t["b"]), w)
    if op == "scale":
        alpha = float(rng.standard_normal())
        return {"x": rng.standard_normal((3, 2))}, lambda t: _weighted(T.scale(t["x"], alpha), w)
    if op == "total":
        return {"x": rng.standard_normal(tuple(rng.integers(1, 5, 2)))}, lambda t: T.scale(T.total(t["x"]), 2.5)
    raise KeyError(op)


OPS = ("matmul", "relu", "add_bias", "gather_rows", "neighborhood_max", "softmax_cross_entropy",
       "concat", "column", "add", "mul", "scale", "total")

SMALL_SPEC = ArchitectureSpec(num_classes=3, voxels=(0.3, 0.6), k_nn=4, widths=(4, 6), head_width=4)


def random_cloud(rng, n: int = 40, labels: int | None = 3) -> PointCloud:
    coords = rng.uniform(0.0, 2.0, (n, 3))
    lab = rng.integers(0, labels, n) if labels else None
    return PointCloud(coords, labels=lab, num_classes=labels)


def network_case(rng, coords_per_config: int = 12):
    """End-to-end check: cross-entropy w.r.t. sampled network parameters."""
    cloud = random_cloud(rng)
    ckpt = init_checkpoint(SMALL_SPEC, int(rng.integers(2**31)))
    for k, v in ckpt.params.items():
        if v.ndim == 1:
            ckpt.params[k] = rng.standard_normal(v.shape) * 0.1
    hier = build_hierarchy(cloud, SMALL_SPEC)
    names = list(ckpt.params)

    def build(t):
        res = forward(cloud, ckpt, hier, params=t)
        return T.softmax_cross_entropy(res.logits, cloud.labels)

    coords = []
    for _ in range(coords_per_config):
        k = names[int(rng.integers(len(names)))]
        coords.append((k, tuple(int(rng.integers(d)) for d in ckpt.params[k].shape)))
    return dict(ckpt.params), build, coords


def tap_case(rng, coords_per_tap: int = 3):
    """Subset-logit objective w.r.t. the activations of every tap."""
    cloud = random_cloud(rng, labels=None)
    ckpt = init_checkpoint(SMALL_SPEC, int(rng.integers(2**31)))
    hier = build_hierarchy(cloud, SMALL_SPEC)
    shapes = {t.name: t.activation.shape for t in forward(cloud, ckpt, hier).taps}
    subset = rng.choice(len(cloud), size=int(rng.integers(1, len(cloud))), replace=False)
    c = int(rng.integers(SMALL_SPEC.num_classes))

    def build(t):
        logits = forward(cloud, ckpt, hier, tap_offsets=t).logits
        return T.total(T.column(T.gather_rows(logits, subset), c))

    coords = [
        (name, tuple(int(rng.integers(d)) for d in shape))
        for name, shape in shapes.items()
        for _ in range(coords_per_tap)
    ]
    return {k: np.zeros(v) for k, v in shapes.items()}, build, coords


@dataclass
class CheckResult:
    name: str
    configs: int
    checked: int
    skipped: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE


def run_suite(seed: int = 0, configs_per_op: int = 10, network_configs: int = 10) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for op in OPS:
        worst, checked, skipped = 0.0, 0, 0
        for _ in range(configs_per_op):
            arrays, build = _case(op, rng)
            e, c, s = check_gradients(build, arrays)
            worst, checked, skipped = max(worst, e), checked + c, skipped + s
        results.append(CheckResult(op, configs_per_op, checked, skipped, worst))
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(network_configs):
        arrays, build, coords = network_case(rng)
        e, c, s = check_gradients(build, arrays, coords)
        worst, checked, skipped = max(worst, e), checked + c, skipped + s
    results.append(CheckResult("network parameters", network_configs, checked, skipped, worst))
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(network_configs):
        arrays, build, coords = tap_case(rng)
        e, c, s = check_gradients(build, arrays, coords)
        worst, checked, skipped = max(worst, e), checked + c, skipped + s
    results.append(CheckResult("network taps", network_configs, checked, skipped, worst))
    return results


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'operation':<24}{'configs':>8}{'checked':>9}{'skipped':>9}  max rel error  status"]
    for r in results:
        lines.append(
            f"{r.name:<24}{r.configs:>8}{r.checked:>9}{r.skipped:>9}  {r.max_rel_error:13.3e}  "
            + ("PASS" if r.passed else "FAIL")
        )
    worst = max(r.max_rel_error for r in results)
    total = sum(r.configs for r in results)
    lines.append(f"configurations: {total}  max relative error: {worst:.3e}  tolerance: {TOLERANCE:g}")
    if elapsed is not None:
        lines.append(f"elapsed: {elapsed:.1f} s")
    lines.append("RESULT: " + ("PASS" if all(r.passed for r in results) else "FAIL"))
    return "\n".join(lines)


def main(seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(seed)
    report = format_report(results, time.perf_counter() - start)
    return all(r.passed for r in results), report
