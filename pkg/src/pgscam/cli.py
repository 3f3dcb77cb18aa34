"""Command-line interface: ``pgscam <command> [options]``.

Commands: synth, train, explain, pointdrop, embed, gradcheck. Options may
also come from ``--config FILE`` (``key = value`` lines); explicit flags win.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import gradcheck, plotting
from . import io as pio
from . import tensor as T
from .evaluation import DropReport, point_drop_experiment, pca_embed
from .geometry import CLASS_NAMES, KdTree, SceneConfig, scene_seed, synth_scene
from .saliency import SaliencyRequest, SubsetSpec, explain_detailed
from .segnet import ArchitectureSpec, Checkpoint, build_hierarchy, dataset_loss, forward, predict_from_logits, train

log = logging.getLogger("pgscam")


class UsageError(Exception):
    pass


def parse_class(text: str, num_classes: int = len(CLASS_NAMES)) -> int:
    if text in CLASS_NAMES:
        c = CLASS_NAMES.index(text)
    else:
        try:
            c = int(text)
        except ValueError:
            raise UsageError(f"unknown class {text!r}; use an id or one of {', '.join(CLASS_NAMES)}") from None
    if not 0 <= c < num_classes:
        raise UsageError(f"class {c} outside [0, {num_classes})")
    return c


def parse_layers(text: str, available: list[str]) -> tuple[str, ...]:
    if text == "all":
        return tuple(available)
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [n for n in names if n not in available]
    if bad or not names:
        raise UsageError(f"unknown layer(s) {bad or text!r}; available: {','.join(available)} or all")
    return names


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path!r} is not writable")


def echo_config(args, directory, command):
    values = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None}
    pio.write_config(os.path.join(directory, f"{command}_config.txt"), values)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args):
    _ensure_dir(args.out)
    paths = []
    for i in range(args.count):
        cfg = SceneConfig(seed=scene_seed(args.seed, i), extent=args.extent, noise=args.noise)
        cloud = synth_scene(cfg)
        path = os.path.join(args.out, f"scene_{i:04d}.ply")
        pio.write_ply(path, cloud, comment=f"synthetic scene seed {cfg.seed}")
        paths.append(path)
    echo_config(args, args.out, "synth")
    print(f"wrote {len(paths)} scenes to {args.out}")


def _load_scene(path):
    return pio.load_ply(path, num_classes=len(CLASS_NAMES))


def cmd_train(args):
    files = pio.scene_files(args.data)
    if not files:
        raise FileNotFoundError(f"no scene_*.ply files in {args.data}")
    scenes = [_load_scene(f) for f in files]
    out_dir = os.path.dirname(os.path.abspath(args.out_checkpoint))
    _ensure_dir(out_dir)
    spec = ArchitectureSpec(num_classes=len(CLASS_NAMES))
    start = time.perf_counter()

    def report(epoch, loss):
        log.info("epoch %d loss %.6f", epoch + 1, loss)

    ckpt, losses = train(scenes, spec, args.epochs, args.lr, args.seed, log=report)
    ckpt.save(args.out_checkpoint)
    stem = os.path.splitext(args.out_checkpoint)[0]
    pio.write_csv(stem + "_loss.csv", ["epoch", "loss"], [(i + 1, l) for i, l in enumerate(losses)])
    if losses:
        plotting.loss_curve(losses, stem + "_loss.png")
    final = dataset_loss(scenes, ckpt)
    echo_config(args, out_dir, "train")
    print(f"trained on {len(scenes)} scenes for {args.epochs} epochs in {time.perf_counter() - start:.1f} s")
    print(f"final training loss {final!r}")
    print(f"checkpoint: {args.out_checkpoint}")


def cmd_explain(args):
    ckpt = Checkpoint.load(args.checkpoint)
    spec = ckpt.spec
    c = parse_class(args.class_, spec.num_classes)
    layers = parse_layers(args.layers, spec.tap_names)
    try:
        subset = SubsetSpec.parse(args.subset)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.ground_truth_subset:
        subset = SubsetSpec(**{**subset.__dict__, "ground_truth": True})
    sign = {"pos": "positive", "cf": "counterfactual"}[args.sign]
    cloud = _load_scene(args.scene)
    request = SaliencyRequest(c, subset, layers, sign, args.agg)
    ex = explain_detailed(cloud, ckpt, request)
    _ensure_dir(args.out)
    stem = os.path.splitext(os.path.basename(args.scene))[0]
    header = ["index", "x", "y", "z"]
    columns = []
    for smap in ex.maps:
        path = os.path.join(args.out, f"{stem}_{smap.layer}_{args.sign}.ply")
        pio.write_ply(path, cloud, smap.upsampled,
                      comment=f"saliency layer {smap.layer} class {c} sign {sign} agg {args.agg}")
        header += [smap.layer, f"{smap.layer}_raw"]
        columns += [smap.upsampled, smap.raw_upsampled]
    rows = (
        [i, *cloud.coords[i].tolist(), *(float(col[i]) for col in columns)]
        for i in range(len(cloud))
    )
    pio.write_csv(os.path.join(args.out, f"{stem}_saliency_{args.sign}.csv"), header, rows)
    plotting.heatmap_panels(
        cloud.coords, {m.layer: m.upsampled for m in ex.maps},
        os.path.join(args.out, f"{stem}_heatmaps_{args.sign}.png"),
        title=f"{plotting.class_name(c)}, {sign}, |subset| = {len(ex.subset)}",
    )
    echo_config(args, args.out, "explain")
    print(f"explained class {CLASS_NAMES[c] if c < len(CLASS_NAMES) else c} over {len(ex.subset)} points, "
          f"{len(ex.maps)} layers -> {args.out}")


def _parse_budget(text: str, cloud, c: int) -> int:
    text = text.strip()
    try:
        if text.endswith("%"):
            if cloud.labels is None:
                raise UsageError("percentage budget needs a labeled scene")
            return int(round(float(text[:-1]) / 100.0 * int(np.sum(cloud.labels == c))))
        return int(text)
    except ValueError:
        raise UsageError(f"bad budget {text!r}; give a point count or a percentage like 20%") from None


def write_drop_report(report: DropReport, directory: str, stem: str) -> None:
    base = report.steps[0] if report.steps else None
    rows = [
        (i, s.removed, s.target_iou, s.miou, base.target_iou - s.target_iou, base.miou - s.miou)
        for i, s in enumerate(report.steps)
    ]
    pio.write_csv(os.path.join(directory, f"{stem}.csv"),
                  ["step", "removed", "target_iou", "miou", "target_iou_drop", "miou_drop"], rows)
    with open(os.path.join(directory, f"{stem}_removed.txt"), "w") as fh:
        for i, s in enumerate(report.steps[1:], start=1):
            fh.write(f"{i}: " + " ".join(str(j) for j in s.removed_indices.tolist()) + "\n")
    pio.write_config(os.path.join(directory, f"{stem}_summary.txt"), {
        "mode": report.mode, "class": report.class_id, "budget": report.budget,
        "steps": report.steps_requested, "recompute": report.recompute,
        "truncated": report.truncated, "reason": report.reason or "-",
    })


def cmd_pointdrop(args):
    ckpt = Checkpoint.load(args.checkpoint)
    c = parse_class(args.class_, ckpt.spec.num_classes)
    cloud = _load_scene(args.scene)
    if cloud.labels is None:
        raise UsageError("point drop needs a labeled scene")
    budget = _parse_budget(args.budget, cloud, c)
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    if not 0 <= budget < len(cloud):
        raise UsageError(f"budget {budget} must lie in [0, {len(cloud)})")
    _ensure_dir(args.out)
    stem0 = os.path.splitext(os.path.basename(args.scene))[0]
    modes = ("high", "low") if args.mode == "both" else (args.mode,)
    reports = []
    for mode in modes:
        rep = point_drop_experiment(cloud, ckpt, c, mode, budget, args.steps, args.recompute)
        write_drop_report(rep, args.out, f"{stem0}_pointdrop_{mode}")
        reports.append(rep)
        if rep.steps:
            print(f"{mode}: removed {rep.steps[-1].removed} points, target IoU "
                  f"{rep.steps[0].target_iou:.4f} -> {rep.steps[-1].target_iou:.4f}, mIoU "
                  f"{rep.steps[0].miou:.4f} -> {rep.steps[-1].miou:.4f}"
                  + (f" (truncated: {rep.reason})" if rep.truncated else ""))
        else:
            print(f"{mode}: target class absent, nothing to do")
    if any(r.steps for r in reports):
        plotting.point_drop_curves([r for r in reports if r.steps],
                                   os.path.join(args.out, f"{stem0}_pointdrop_{args.mode}.png"))
    echo_config(args, args.out, "pointdrop")


def cmd_embed(args):
    ckpt = Checkpoint.load(args.checkpoint)
    (layer,) = parse_layers(args.layer, ckpt.spec.tap_names)
    cloud = _load_scene(args.scene)
    hierarchy = build_hierarchy(cloud, ckpt.spec)
    result = forward(cloud, ckpt, hierarchy)
    pred = predict_from_logits(result.logits.values)
    tap = result.tap(layer)
    emb = pca_embed(tap.activation.values)
    nearest, _ = KdTree(cloud.coords).query_many(tap.coords, 1)
    nearest = nearest[:, 0]
    gt = cloud.labels[nearest] if cloud.labels is not None else np.full(nearest.size, -1)
    _ensure_dir(args.out)
    stem = os.path.splitext(os.path.basename(args.scene))[0]
    rows = (
        (float(emb.coords[j, 0]), float(emb.coords[j, 1]), int(pred[nearest[j]]), int(gt[j]),
         int(nearest[j]), j)
        for j in range(tap.resolution)
    )
    pio.write_csv(os.path.join(args.out, f"{stem}_embed_{layer}.csv"),
                  ["x2d", "y2d", "pred", "gt", "point_index", "m_index"], rows)
    np.savetxt(os.path.join(args.out, f"{stem}_embed_{layer}_components.csv"), emb.components,
               delimiter=",", fmt="%.17g")
    colors = gt if cloud.labels is not None else pred[nearest]
    plotting.embedding_scatter(emb.coords, colors, os.path.join(args.out, f"{stem}_embed_{layer}.png"),
                               title=f"PCA of {layer} (M = {tap.resolution})")
    echo_config(args, args.out, "embed")
    print(f"embedded {tap.resolution} points of {layer}; explained variances {emb.variances.tolist()}")


def cmd_gradcheck(args):
    saved = dict(T.FAULTS)
    if args.inject_fault:
        T.FAULTS[args.inject_fault] = 1.0 + 1e-3
    try:
        start = time.perf_counter()
        results = gradcheck.run_suite(args.seed)
        report = gradcheck.format_report(results, time.perf_counter() - start)
    finally:
        T.FAULTS.clear()
        T.FAULTS.update(saved)
    print(report)
    return 0 if all(r.passed for r in results) else 1


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgscam", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic labeled scenes as PLY")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="scenes")
    p.add_argument("--extent", type=float, default=SceneConfig.extent)
    p.add_argument("--noise", type=float, default=SceneConfig.noise)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", required=True, help="directory of scene_*.ply files")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", default="model.pgsc")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="per-layer saliency maps")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_", required=True, help="class id or name")
    p.add_argument("--subset", default="class", help="single:i | class[:c] | instance:c:n | all")
    p.add_argument("--ground-truth-subset", action="store_true",
                   help="resolve class subsets against labels instead of predictions")
    p.add_argument("--layers", default="all", help="comma-separated tap names or 'all'")
    p.add_argument("--sign", choices=("pos", "cf"), default="pos")
    p.add_argument("--agg", choices=("sum", "mean"), default="sum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="explain")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("pointdrop", help="high/low saliency point-drop experiment")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_", required=True)
    p.add_argument("--mode", choices=("high", "low", "both"), default="high")
    p.add_argument("--budget", default="20%", help="points to remove, or a percentage of the class")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--recompute", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="pointdrop")
    p.set_defaults(func=cmd_pointdrop)

    p = sub.add_parser("embed", help="2-D PCA of a tap's activations")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", default="A8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="embed")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with values from ``--config`` installed as defaults of
    the chosen subcommand (explicit flags still override them)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((t for t in argv if t in sub.choices), None)
    if known.config and command:
        try:
            values = pio.read_config(known.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config: {exc}")
        cmd_parser = sub.choices[command]
        actions = {a.dest: a for a in cmd_parser._actions}
        defaults = {}
        for key, raw in values.items():
            dest = "class_" if key == "class" else key
            action = actions.get(dest)
            if action is None or dest == "help":
                parser.error(f"config key {key!r} is not an option of {command}")
            if isinstance(action, argparse.BooleanOptionalAction) or action.const is True:
                defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[dest] = (action.type or str)(raw)
                except ValueError:
                    parser.error(f"config key {key!r}: bad value {raw!r}")
            action.required = False
        cmd_parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pgscam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"pgscam {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
