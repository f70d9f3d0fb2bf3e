"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .. import ORGANS
from ..errors import DataError, VoxelBenchError
from ..evalstat import read_dice_csv, read_perf_csv, render_comparison
from ..imageio import (
    CaseEntry,
    DatasetManifest,
    load_manifest,
    read_volume,
    write_manifest,
    write_volume,
)
from ..neuralseg import load_model, save_model, train_unet
from ..phantom import PhantomSpec, generate_dataset, load_phantom_spec
from ..volgrid import BoundingBoxMM, LabelMask
from ..voiforest import ForestConfig, load_forest, predict_walls, save_forest, train_forest
from .config import DEFAULT_THRESHOLD, DEFAULT_THRESHOLDS, ExperimentConfig, load_experiment_config
from .pipeline import (
    StageFailure,
    make_patch,
    prepare_case,
    prepare_volumes,
    run_crossval,
    run_single,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _walls(values) -> str:
    return " ".join(f"{w:.3f}" for w in values)


def _load_case(args):
    """A prepared case from ``--manifest`` + ``--case <id>`` or from ``--case <raster>``."""
    if args.manifest:
        entry = load_manifest(args.manifest).case(args.case)
        return prepare_case(entry, args.spacing)
    volume = read_volume(args.case)
    labels = read_volume(args.labels) if getattr(args, "labels", None) else None
    if labels is not None and not isinstance(labels, LabelMask):
        raise DataError(f"{args.labels}: label file is not uint8")
    organ_labels = {args.organ: args.label} if labels is not None and getattr(args, "organ", None) else {}
    return prepare_volumes(volume, labels, Path(args.case).stem, organ_labels, args.spacing)


def cmd_phantom_gen(args) -> int:
    spec = load_phantom_spec(args.spec) if args.spec else PhantomSpec()
    manifest = generate_dataset(spec, args.n, args.seed, args.out)
    print(f"wrote {len(manifest.cases)} cases to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.cases:
        case = prepare_case(entry, args.spacing)
        ipath, lpath = out / f"{entry.case_id}_img.raster", out / f"{entry.case_id}_lbl.raster"
        write_volume(case.volume, ipath)
        write_volume(case.labels, lpath)
        entries.append(CaseEntry(entry.case_id, ipath, lpath, dict(entry.organ_label_map)))
    write_manifest(DatasetManifest(entries, out.resolve()), out / "manifest.txt")
    print(f"preprocessed {len(entries)} cases into {out}")
    return EXIT_OK


def cmd_extract_bb(args) -> int:
    manifest = load_manifest(args.manifest)
    ids = [args.case] if args.case else manifest.case_ids
    print("case_id left right anterior posterior head foot")
    for cid in ids:
        case = prepare_case(manifest.case(cid), args.spacing)
        print(cid, _walls(case.reference_box(args.organ).as_array()))
    return EXIT_OK


def cmd_train_rrf(args) -> int:
    manifest = load_manifest(args.manifest)
    cases = [prepare_case(e, args.spacing) for e in manifest.cases]
    cfg = ForestConfig(n_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf, seed=args.seed)
    forest = train_forest([(c.volume, c.reference_box(args.organ)) for c in cases], args.organ, cfg)
    save_forest(forest, args.out)
    print(f"trained {len(forest.trees)} trees for {args.organ} on {len(cases)} cases -> {args.out}")
    return EXIT_OK


def cmd_detect_voi(args) -> int:
    forest = load_forest(args.model)
    case = _load_case(args)
    pred = predict_walls(forest, case.volume)
    print("walls", _walls(pred.walls))
    print("spread", _walls(pred.spread))
    bad = pred.ordering_violations
    if bad:
        print(f"ordering violated on {', '.join(bad)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    return load_experiment_config(args.config) if args.config else ExperimentConfig()


def cmd_train_unet(args) -> int:
    cfg = _experiment(args)
    manifest = load_manifest(args.manifest)
    ucfg = cfg.unet_config(args.rank)
    tcfg = dataclasses.replace(cfg.train, seed=args.seed)
    if args.epochs:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    patches = []
    for entry in manifest.cases:
        case = prepare_case(entry, cfg.spacing)
        patches.append(make_patch(case, args.organ, case.reference_box(args.organ), ucfg.input_extent, True))
    model, history = train_unet(ucfg, patches, tcfg)
    save_model(model, args.out)
    print(f"rank-{args.rank} model for {args.organ}: final loss {history[-1]:.5f} -> {args.out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    model = load_model(args.model)
    case = _load_case(args)
    box = BoundingBoxMM(*args.box) if args.box else None
    forest = load_forest(args.rrf) if args.rrf else None
    organ = args.organ or (forest.organ if forest else None)
    if box is None and forest is None and (case.reference is None or organ is None):
        raise UsageError("segment needs --box, --rrf, or reference labels with --organ")
    if args.threshold is not None:
        theta = args.threshold
    else:
        theta = DEFAULT_THRESHOLDS.get(organ, DEFAULT_THRESHOLD)
    result = run_single(case, organ or "-", model, theta, box=box, forest=forest)
    print("box", _walls(result.box.as_array()))
    print(f"application_seconds {result.resources.wall_time_seconds:.4f}")
    if result.dsc is not None:
        print(f"dsc {result.dsc:.6f}")
    if args.out:
        write_volume(result.mask, args.out)
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = load_experiment_config(args.config)
    result = run_crossval(cfg, args.out)
    print(result.report.quality_text)
    print(result.report.performance_text)
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    records = read_dice_csv(src / "dice.csv")
    perf = src / "perf.csv"
    resources = read_perf_csv(perf) if perf.exists() else []
    report = render_comparison(records, resources=resources)
    print(report.quality_text)
    if report.performance_text:
        print(report.performance_text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxelbench", description="two-stage organ segmentation benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def case_args(sp):
        sp.add_argument("--case", required=True, help="case id (with --manifest) or intensity raster")
        sp.add_argument("--manifest")
        sp.add_argument("--spacing", type=float, default=2.0)

    sp = add("phantom-gen", cmd_phantom_gen, "generate a synthetic dataset")
    sp.add_argument("--spec")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("preprocess", cmd_preprocess, "reorient and resample a dataset")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--spacing", type=float, default=2.0)

    sp = add("extract-bb", cmd_extract_bb, "print reference boxes")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--organ", required=True, choices=ORGANS)
    sp.add_argument("--case")
    sp.add_argument("--spacing", type=float, default=2.0)

    sp = add("train-rrf", cmd_train_rrf, "train a box-localization forest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--organ", required=True, choices=ORGANS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trees", type=int, default=ForestConfig.n_trees)
    sp.add_argument("--max-depth", type=int, default=ForestConfig.max_depth)
    sp.add_argument("--min-leaf", type=int, default=ForestConfig.min_leaf)
    sp.add_argument("--spacing", type=float, default=2.0)

    sp = add("detect-voi", cmd_detect_voi, "predict a box with a trained forest")
    sp.add_argument("--model", required=True)
    case_args(sp)

    sp = add("train-unet", cmd_train_unet, "train one U-Net on reference VOIs")
    sp.add_argument("--rank", type=int, choices=(2, 3), required=True)
    sp.add_argument("--organ", required=True, choices=ORGANS)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="experiment config supplying unet.* and train.* keys")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("segment", cmd_segment, "apply a U-Net to one case")
    sp.add_argument("--model", required=True)
    case_args(sp)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--organ", choices=ORGANS)
    sp.add_argument("--label", type=int, default=1, help="organ label in --labels")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--box", type=float, nargs=6, metavar="MM")
    group.add_argument("--rrf", help="forest file used to detect the VOI")
    sp.add_argument("--labels", help="reference label raster (raster --case only)")
    sp.add_argument("--out", help="write the mask raster here")

    sp = add("crossval", cmd_crossval, "cross-validate both ranks")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "render tables from a crossval output directory")
    sp.add_argument("--in", dest="input", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if exc.is_data_error else EXIT_RUNTIME
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (VoxelBenchError, ArithmeticError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
