"""Command-line interface.

Exit codes: 0 success, 1 a stage failed, 2 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import ConfigError, ExperimentError, load_config, make_config, run_experiment
from .field import FieldConfig, FieldParams, generate_rays, init_field, psnr, render_image
from .jacobian import PerturbationSpec
from .metrics import compute_metrics
from .mi import RECORD_HEADER, MiEstimate, mc_mi_estimate, mi_map, write_records
from .propagation import (
    DEFAULT_SIGMA,
    SeedLabels,
    adaptive_gradient_sampling,
    argmax_labels,
    colorize,
    dense_responses,
    propagate_sparse_2d,
    propagate_sparse_3d,
    recolor_entity,
)
from .scene import Dataset, generate_scene, make_dataset
from .shaping import (
    FeatureAffinity,
    ShapingConfig,
    Trace,
    TrainConfig,
    heldout_psnr,
    make_affinity,
    save_trace,
    shape,
    train_photometric,
)
from .tensor_io import load_tensor, save_tensor, write_ppm

log = logging.getLogger("mishape")


class UsageError(Exception):
    """Bad arguments detected after parsing (exit code 2)."""


def _view(dataset: Dataset, split: str, index: int):
    views = getattr(dataset, split)
    if not 0 <= index < len(views):
        raise UsageError(f"{split} view {index} out of range (have {len(views)})")
    return views[index]


def _spec(params: FieldParams, args) -> PerturbationSpec:
    sigma = getattr(args, "sigma", 0.1)
    if args.pattern == "single-layer":
        return PerturbationSpec.single_layer(params, args.layer, sigma)
    if args.pattern == "layer-block":
        return PerturbationSpec.layer_block(params, sigma=sigma)
    return PerturbationSpec.random_neurons(params, args.neurons, args.seed, sigma)


def _add_pattern(p) -> None:
    p.add_argument("--pattern", choices=("single-layer", "layer-block", "random-neurons"), default="single-layer")
    p.add_argument("--layer", default="rgb.weight", help="layer for the single-layer pattern")
    p.add_argument("--neurons", type=int, default=8, help="unit count for the random-neurons pattern")


# ---------------------------------------------------------------- commands


def cmd_scene_gen(args) -> None:
    scene = generate_scene(args.objects, args.seed, n_classes=args.classes, parts=args.parts, palette=args.palette)
    scene.save(args.out)
    print(f"wrote {args.out} ({len(scene.primitives)} primitives, {scene.n_instances} objects)")
    if args.dataset:
        ds = make_dataset(scene, args.train, args.test, args.seed, width=args.width, height=args.height,
                          radius=args.radius)
        ds.save(args.dataset)
        print(f"wrote dataset {args.dataset} ({args.train} train / {args.test} test views)")


def cmd_render(args) -> None:
    ds = Dataset.load(args.dataset)
    view = _view(ds, args.split, args.index)
    params = FieldParams.load(args.checkpoint)
    img, _ = render_image(params, view.camera, args.samples)
    write_ppm(args.out, img)
    print(f"wrote {args.out}; PSNR vs ground truth {psnr(img, view.image):.3f} dB")


def cmd_train(args) -> None:
    ds = Dataset.load(args.dataset)
    cfg = TrainConfig(steps=args.steps, lr=args.lr, lr_decay=args.lr_decay, batch_rays=args.batch,
                      n_samples=args.samples, seed=args.seed)
    trace = Trace()
    params = train_photometric(init_field(FieldConfig(), args.seed), ds, cfg, trace)
    params.save(args.out, tag="pre")
    if args.trace:
        save_trace(trace, args.trace)
    print(f"wrote {args.out}; held-out PSNR {heldout_psnr(params, ds, args.samples):.3f} dB")


def cmd_shape(args) -> None:
    ds = Dataset.load(args.dataset)
    params = FieldParams.load(args.checkpoint)
    try:
        cfg = ShapingConfig(lam=args.lam, gamma=args.gamma, tau=args.tau, batch_rays=args.batch, lr=args.lr,
                            lr_decay=args.lr_decay, steps=args.steps, n_samples=args.samples,
                            affinity=args.affinity, mode=args.mode, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.affinity == "feature-file":
        if not args.features:
            raise UsageError("--affinity feature-file needs --features")
        fg = ds.train_labels(args.mode) != 0
        affinity = FeatureAffinity(load_tensor(args.features), mask=fg)
    else:
        affinity = make_affinity(ds, cfg)
    trace = Trace()
    before = heldout_psnr(params, ds, args.samples)
    shaped = shape(params, ds, affinity, cfg, trace)
    shaped.save(args.out, tag="post")
    if args.trace:
        save_trace(trace, args.trace)
    after = heldout_psnr(shaped, ds, args.samples)
    print(f"wrote {args.out}; held-out PSNR {before:.3f} -> {after:.3f} dB")


def _read_pairs(path):
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 6:
            raise UsageError(f"pair lines need 'view_i u_i v_i view_j u_j v_j', got {line!r}")
        pairs.append(tuple(int(t) for t in tok))
    return pairs


def cmd_mi_probe(args) -> None:
    ds = Dataset.load(args.dataset)
    params = FieldParams.load(args.checkpoint)
    spec = _spec(params, args)

    def ray(view_id, u, v):
        cam = _view(ds, args.split, view_id).camera
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            raise UsageError(f"pixel ({u}, {v}) outside a {cam.width}x{cam.height} view")
        return generate_rays(cam)[v * cam.width + u]

    if args.pairs:
        records: list[tuple[str, MiEstimate]] = []
        print(RECORD_HEADER)
        for vi, ui, wi, vj, uj, wj in _read_pairs(args.pairs):
            est = mc_mi_estimate(params, ray(vi, ui, wi), ray(vj, uj, wj), spec, args.draws, args.bins, args.seed,
                                 args.samples)
            label = f"{vi}:{ui},{wi}/{vj}:{uj},{wj}"
            records.append((label, est))
            print(est.to_record(label))
        if args.out:
            write_records(args.out, records)
        return
    if args.source is None:
        raise UsageError("mi-probe needs --pairs or --source VIEW U V")
    target = _view(ds, args.split, args.target).camera
    m = mi_map(params, ray(*args.source), target, spec, args.samples)
    stem = args.out or "mi_map"
    m.save(stem)
    print(f"wrote {Path(stem).with_suffix('.ppm')} and {Path(stem).with_suffix('.jtns')}")


def cmd_propagate(args) -> None:
    ds = Dataset.load(args.dataset)
    params = FieldParams.load(args.checkpoint)
    target = _view(ds, args.split, args.target)
    if args.setting == "sparse":
        if not args.seeds:
            raise UsageError("sparse propagation needs --seeds FILE")
        seeds = SeedLabels.load(args.seeds, args.mode)
        source = _view(ds, "train", seeds.view_id)
        fn = propagate_sparse_2d if args.variant == "2d" else propagate_sparse_3d
        res = fn(params, seeds, source.camera, target.camera, args.sigma, n_samples=args.samples)
        res.save(args.out)
        pred = res.scene_labels()
        seen = seeds.label_ids
    else:
        source = _view(ds, "train", args.source_view)
        labels = source.label_map(args.mode)
        sel = adaptive_gradient_sampling(params, source.camera, labels, seed=args.seed, sigma=args.sigma,
                                         n_samples=args.samples, variant=args.variant)
        resp = dense_responses(params, sel, target.camera, args.sigma, n_samples=args.samples, variant=args.variant)
        lab, _ = argmax_labels(resp)
        pred = np.array((0,) + sel.label_ids)[lab].reshape(target.camera.height, target.camera.width)
        save_tensor(Path(f"{args.out}_labels.jtns"), pred.astype(np.int64))
        write_ppm(Path(args.out).with_suffix(".ppm"), colorize(pred))
        seen = sel.label_ids
        print(f"gradient sampling kept {len(sel.directions)} selections; source mIoU history "
              + " ".join(f"{h:.4f}" for h in sel.history))
    report = compute_metrics(pred, target.label_map(args.mode), seen)
    print(report.summary())


def cmd_recolor(args) -> None:
    ds = Dataset.load(args.dataset)
    params = FieldParams.load(args.checkpoint)
    source = _view(ds, "train", args.source_view).camera
    target = _view(ds, args.split, args.target).camera
    delta = [float(x) for x in args.delta.split(",")]
    if len(delta) != 3:
        raise UsageError("--delta needs three comma-separated values")
    img, _ = recolor_entity(params, source, (args.u, args.v), delta, target, args.sigma, n_samples=args.samples)
    write_ppm(args.out, img)
    print(f"wrote {args.out}")


def _load_labels(path):
    arr = load_tensor(path)
    return np.asarray(arr).astype(np.int64)


def cmd_eval(args) -> None:
    pred = _load_labels(args.pred)
    gt = _load_labels(args.gt)
    if args.seen:
        seen = [int(x) for x in args.seen.split(",")]
    elif args.source:
        seen = [int(k) for k in np.unique(_load_labels(args.source)) if k != 0]
    else:
        seen = [int(k) for k in np.unique(gt) if k != 0]
    report = compute_metrics(pred, gt, seen)
    print(report.summary())
    print(report.table())


def cmd_experiment(args) -> None:
    overrides = dict(kv.split("=", 1) for kv in args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides) if args.config else make_config(overrides)
    report = run_experiment(cfg)
    out = Path(cfg.output_dir)
    print(f"config hash {report.config_hash}")
    pre = report.psnr_pre
    post = "n/a" if report.psnr_post is None else f"{report.psnr_post:.3f}"
    print(f"held-out PSNR pre {pre:.3f} post {post}")
    for r in report.rows:
        print(f"{r.variant} sigma={r.sigma:g} density={r.density:g} mIoU={r.miou:.4f} avg_acc={r.avg_acc:.4f} "
              f"total_acc={r.total_acc:.4f}")
    print(f"wrote {out / 'manifest.json'} and {out / 'metrics.csv'}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mishape", description="Radiance-field Jacobian shaping toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=True, ckpt=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        if data:
            p.add_argument("--dataset", required=True, help="dataset directory written by scene-gen")
        if ckpt:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--samples", type=int, default=32, help="samples per ray")
        return p

    p = add("scene-gen", cmd_scene_gen, "generate a toy scene (and optionally its dataset)", data=False)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--parts", type=int, default=1)
    p.add_argument("--palette", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="also render a dataset into this directory")
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--radius", type=float, default=4.0)

    p = add("render", cmd_render, "render a dataset view from a checkpoint", ckpt=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "photometric training")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--trace")

    p = add("shape", cmd_shape, "mutual-information shaping", ckpt=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--affinity", choices=("ground-truth", "feature-file"), default="ground-truth")
    p.add_argument("--features", help="JTNS tensor of per-pixel features over all training pixels")
    p.add_argument("--mode", choices=("semantic", "instance"), default="semantic")
    p.add_argument("--trace")

    p = add("mi-probe", cmd_mi_probe, "empirical MI for pixel pairs, or a closed-form MI map", ckpt=True)
    p.add_argument("--pairs", help="file of 'view_i u_i v_i view_j u_j v_j' lines")
    p.add_argument("--source", type=int, nargs=3, metavar=("VIEW", "U", "V"))
    p.add_argument("--target", type=int, default=0, help="target view for --source maps")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--sigma", type=float, default=1e-3)
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out")
    _add_pattern(p)

    p = add("propagate", cmd_propagate, "propagate labels by perturbation", ckpt=True)
    p.add_argument("--setting", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--variant", choices=("2d", "3d"), default="2d")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--seeds", help="seed file of 'view_id u v class_id' lines (sparse)")
    p.add_argument("--source-view", type=int, default=0, help="labelled training view (dense)")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--mode", choices=("semantic", "instance"), default="semantic")
    p.add_argument("--out", required=True)

    p = add("recolor", cmd_recolor, "re-colour the entity under one pixel", ckpt=True)
    p.add_argument("--source-view", type=int, default=0)
    p.add_argument("--u", type=int, required=True)
    p.add_argument("--v", type=int, required=True)
    p.add_argument("--delta", required=True, help="colour change 'r,g,b'")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "segmentation metrics for a predicted label tensor", data=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--seen", help="comma-separated seen classes")
    p.add_argument("--source", help="label tensor of the annotated source view (defines seen classes)")

    p = add("experiment", cmd_experiment, "run a configured end-to-end experiment", data=False)
    p.set_defaults(seed=None)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "experiment" and any("=" not in kv for kv in args.set):
            raise UsageError("--set expects KEY=VALUE")
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any other failure is a stage error
        print(f"error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
