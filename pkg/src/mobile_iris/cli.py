"""Command-line front end: ``mobile-iris <verb> [flags]``.

Exit codes: 0 success, 2 usage or precondition error, 1 runtime error.
Errors are printed to stderr as a single ``error: <message>`` line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, metrics, mobile_unet, pipeline, recognition, training
from .errors import ConfigurationError, IrisError
from .io_utils import atomic_write_text, read_image, read_mask, resize_nearest, write_image, write_mask


class UsageError(Exception):
    """Bad arguments or unmet preconditions; reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mobile-iris", description="Mobile-UNet iris segmentation and localization.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a segmentation or localization network")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--task", required=True, choices=["seg", "loc"])
    p.add_argument("--out", required=True, help="output weight container (.irkw)")
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--steps", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrained", help="container whose encoder tensors initialize the model")
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--arch", choices=["mobilenetv2", "reduced"], default="mobilenetv2")
    p.add_argument("--input-size", type=_positive_int, default=None, help="network input side (default 224, reduced 64)")
    p.add_argument("--seg-model", help="segmentation model whose predictions place the localization crop windows")
    p.add_argument(
        "--window-source",
        choices=["auto", "predicted", "ground-truth"],
        default="auto",
        help="crop windows for --task loc: predicted needs --seg-model; auto picks predicted when one is given",
    )
    p.add_argument("--threshold", type=_threshold, default=pipeline.DEFAULT_THRESHOLD, help="binarization for --seg-model")

    p = sub.add_parser("infer-seg", help="segment one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--threshold", type=_threshold, default=pipeline.DEFAULT_THRESHOLD)

    p = sub.add_parser("localize", help="segment, crop and localize inner/outer boundaries")
    p.add_argument("--seg-model", required=True)
    p.add_argument("--loc-model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-inner", required=True)
    p.add_argument("--out-outer", required=True)
    p.add_argument("--threshold", type=_threshold, default=pipeline.DEFAULT_THRESHOLD)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--inner-dir", nargs=2, metavar=("PRED", "GT"), help="inner-boundary mask directories")
    p.add_argument("--outer-dir", nargs=2, metavar=("PRED", "GT"), help="outer-boundary mask directories")
    p.add_argument("--report", required=True, help="output report JSON")

    p = sub.add_parser("sweep-threshold", help="choose the binarization threshold minimizing mean E1")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV of threshold,mean_e1")

    p = sub.add_parser("match", help="run the five-fold nearest-neighbour identification protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seg-model", help="predict masks instead of reading seg_mask files")
    p.add_argument("--threshold", type=_threshold, default=pipeline.DEFAULT_THRESHOLD)
    p.add_argument("--min-images", type=_positive_int, default=5)

    p = sub.add_parser("rank", help="rank-sum table from a scores CSV")
    p.add_argument("--scores", required=True, help="CSV with header method,metric,dataset,score,direction")
    p.add_argument("--out", required=True)
    p.add_argument("--published", help="JSON {method: {segmentation|localization|total: value}} to cross-check")

    p = sub.add_parser("overlay", help="draw segmentation and boundaries on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--inner")
    p.add_argument("--outer")
    p.add_argument("--out", required=True)
    return parser


def _need_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {str(path)!r} does not exist")
    return path


def _need_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} {str(path)!r} is not a directory")
    return path


def _validate(args):
    """Check every input path before anything is read or written."""
    v = args.verb
    if v == "train":
        _need_file(args.manifest, "manifest")
        if args.pretrained:
            _need_file(args.pretrained, "pretrained container")
        if args.seg_model:
            _need_file(args.seg_model, "segmentation model")
        if args.window_source == "predicted" and not args.seg_model:
            raise UsageError("--window-source predicted needs --seg-model")
    elif v == "infer-seg":
        _need_file(args.model, "model")
        _need_file(args.image, "image")
    elif v == "localize":
        _need_file(args.seg_model, "segmentation model")
        _need_file(args.loc_model, "localization model")
        _need_file(args.image, "image")
    elif v == "eval":
        _need_dir(args.pred_dir, "prediction directory")
        _need_dir(args.gt_dir, "ground-truth directory")
        for pair in (args.inner_dir, args.outer_dir):
            if pair:
                _need_dir(pair[0], "prediction directory")
                _need_dir(pair[1], "ground-truth directory")
        if bool(args.inner_dir) != bool(args.outer_dir):
            raise UsageError("--inner-dir and --outer-dir must be given together")
    elif v == "sweep-threshold":
        _need_file(args.model, "model")
        _need_file(args.manifest, "manifest")
    elif v == "match":
        _need_file(args.manifest, "manifest")
        if args.seg_model:
            _need_file(args.seg_model, "segmentation model")
    elif v == "rank":
        _need_file(args.scores, "scores CSV")
        if args.published:
            _need_file(args.published, "published sums")
    elif v == "overlay":
        _need_file(args.image, "image")
        _need_file(args.mask, "mask")
        if bool(args.inner) != bool(args.outer):
            raise UsageError("--inner and --outer must be given together")
        for p in (args.inner, args.outer):
            if p:
                _need_file(p, "mask")


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _training_samples(manifest, task: str, size: int, seg_model=None, threshold: float = pipeline.DEFAULT_THRESHOLD):
    """Network-resolution samples; ``seg_model`` places localization windows from its predictions."""
    samples = []
    for rec in manifest.records:
        image = read_image(rec.image)
        if task == "segmentation":
            if rec.seg_mask is None:
                continue
            x = pipeline.preprocess(image, size)
            y = resize_nearest(read_mask(rec.seg_mask), size, size)[None]
        else:
            if rec.inner_mask is None or rec.outer_mask is None:
                continue
            outer = read_mask(rec.outer_mask)
            if seg_model is not None:
                window_mask = pipeline.segment(image, seg_model, threshold)
                if not window_mask.any():
                    # same fallback as inference: the whole frame
                    window_mask = np.ones(image.shape[:2], bool)
            else:
                window_mask = read_mask(rec.seg_mask) if rec.seg_mask is not None else outer
            x, y = pipeline.localization_training_pair(image, window_mask, read_mask(rec.inner_mask), outer, size)
        samples.append(training.Sample(x, y.astype(np.float32)))
    return samples


def cmd_train(args):
    task = "segmentation" if args.task == "seg" else "localization"
    if args.arch == "reduced":
        config = mobile_unet.reduced_config(task, args.input_size or 64)
    else:
        config = mobile_unet.make_config(task, args.input_size or 224)
    config.validate()
    manifest = dataset.load_manifest(args.manifest)
    seg_model = None
    if task == "localization" and args.window_source != "ground-truth" and args.seg_model:
        seg_model = mobile_unet.load_weights(args.seg_model)
    elif task == "localization" and args.window_source == "auto":
        print("note: no --seg-model, crop windows come from ground-truth masks", file=sys.stderr)
    samples = _training_samples(manifest, task, config.input_size[1], seg_model, args.threshold)
    if not samples:
        raise ConfigurationError(f"manifest has no records with the masks a {task} model needs")
    try:
        train_idx, val_idx, _ = training.split_dataset(len(samples), training.SplitSpec(seed=args.seed))
    except ConfigurationError:
        # too few records for a non-empty validation split: train on all of them
        train_idx, val_idx = list(range(len(samples))), []
    data = training.TrainingData([samples[i] for i in train_idx], [samples[i] for i in val_idx])
    model = mobile_unet.build_model(config, seed=args.seed)
    if args.pretrained:
        mobile_unet.import_pretrained_encoder(args.pretrained, model)
    tc = training.TrainConfig(lr=args.lr, max_steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    aug = training.AugmentationConfig(seed=args.seed)
    result = training.train(model, data, tc, aug, log=lambda msg: print(msg, file=sys.stderr))
    mobile_unet.save_weights(model, args.out, metadata=training.checkpoint_metadata(result.history, tc, aug))
    atomic_write_text(str(args.out) + ".history.csv", training.history_csv(result.history))


def cmd_infer_seg(args):
    model = mobile_unet.load_weights(args.model)
    mask = pipeline.segment(read_image(args.image), model, args.threshold)
    write_mask(args.out, mask)


def cmd_localize(args):
    seg = mobile_unet.load_weights(args.seg_model)
    loc = mobile_unet.load_weights(args.loc_model)
    result = pipeline.localize(read_image(args.image), seg, loc, args.threshold)
    if result.empty_segmentation_fallback:
        print("warning: empty segmentation, localized over the whole image", file=sys.stderr)
    write_mask(args.out_inner, result.inner_mask)
    write_mask(args.out_outer, result.outer_mask)


def _paired_files(pred_dir: Path, gt_dir: Path) -> list[str]:
    names = sorted(p.name for p in gt_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
    if not names:
        raise UsageError(f"ground-truth directory {str(gt_dir)!r} has no PNG masks")
    missing = [n for n in names if not (pred_dir / n).is_file()]
    if missing:
        raise UsageError(f"prediction directory {str(pred_dir)!r} lacks {missing[0]!r} ({len(missing)} missing)")
    return names


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    names = _paired_files(pred_dir, gt_dir)
    dirs = {}
    if args.inner_dir:
        dirs["inner"] = tuple(Path(d) for d in args.inner_dir)
        dirs["outer"] = tuple(Path(d) for d in args.outer_dir)
        for pred, gt in dirs.values():
            _paired_files(pred, gt)
            absent = [n for n in names if not (gt / n).is_file()]
            if absent:
                raise UsageError(f"directory {str(gt)!r} lacks {absent[0]!r}")
    records = []
    for name in names:
        kwargs = {}
        for key, (pred, gt) in dirs.items():
            kwargs[f"pred_{key}"] = read_mask(pred / name)
            kwargs[f"gt_{key}"] = read_mask(gt / name)
        records.append(metrics.evaluate_image(Path(name).stem, read_mask(pred_dir / name), read_mask(gt_dir / name), **kwargs))
    report = metrics.aggregate(records)
    report.inputs = {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "files": names}
    for key, (pred, gt) in dirs.items():
        report.inputs[f"{key}_dirs"] = [str(pred), str(gt)]
    atomic_write_text(args.report, report.to_json())


def cmd_sweep(args):
    model = mobile_unet.load_weights(args.model)
    manifest = dataset.load_manifest(args.manifest)
    items = [(read_image(r.image), read_mask(r.seg_mask)) for r in manifest.records if r.seg_mask is not None]
    best, table = training.sweep_threshold(model, items)
    atomic_write_text(args.out, training.sweep_csv(table))
    print(f"best threshold {best}")


def cmd_match(args):
    manifest = dataset.load_manifest(args.manifest)
    selected = dataset.filter_subjects(manifest, args.min_images)
    if not selected:
        raise ConfigurationError(f"no subject has an eye branch with >= {args.min_images} images")
    plan = dataset.make_folds(selected, seed=args.seed)
    seg = mobile_unet.load_weights(args.seg_model) if args.seg_model else None
    report = recognition.run_protocol(manifest, plan, seg, args.threshold)
    atomic_write_text(args.report, report.to_json())
    print(f"mean rank-1 accuracy {report.mean_accuracy:.4f}")


def cmd_rank(args):
    cells = metrics.read_score_csv(Path(args.scores).read_text())
    table = metrics.rank_sum(cells)
    published = json.loads(Path(args.published).read_text()) if args.published else None
    atomic_write_text(args.out, table.to_csv())
    if published:
        for d in metrics.check_published_sums(table, published):
            print(f"warning: {d.method} {d.group} rank sum computes to {d.computed:g}, published {d.published:g}", file=sys.stderr)


def cmd_overlay(args):
    image = read_image(args.image)
    loc = (read_mask(args.inner), read_mask(args.outer)) if args.inner else None
    write_image(args.out, pipeline.render_overlay(image, read_mask(args.mask), loc))


COMMANDS = {
    "train": cmd_train,
    "infer-seg": cmd_infer_seg,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "sweep-threshold": cmd_sweep,
    "match": cmd_match,
    "rank": cmd_rank,
    "overlay": cmd_overlay,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
        COMMANDS[args.verb](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IrisError, OSError, ValueError, KeyError) as exc:
        print(f"error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
