"""``neutrocaps`` command line.

Exit status: 0 on success, 1 for usage and configuration errors, 2 when input data
or a model file is missing or malformed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import config as config_mod
from .capsnet import CapsuleNet, train_patch_classifier
from .config import RunConfig
from .errors import ConfigError, DataError, NeutrocapsError, UsageError
from .imageio import read_rgb, write_rgb
from .model_io import load_model, save_model
from .morphology import postprocess
from .pipeline import (
    CentroidCache,
    balance_patches,
    build_patch_set,
    classify_windows,
    crossval,
    decide,
    k_sweep,
    stratified_split,
    WsiDiagnosis,
)
from .report import overlay, plot_roc, write_crossval_report, write_dict_rows
from .superpixels import select_patches, slic
from .synth import generate_dataset, load_dataset, write_dataset
from .unet import UNet, segment, train_segmenter

logger = logging.getLogger("neutrocaps")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = config_mod.load(path) if path else RunConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _require_dir(path: str) -> None:
    if not os.path.isdir(path):
        raise DataError(f"no such directory: {path}")


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")


def _prepare_output(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")


def _history_path(model_path: str) -> str:
    root, _ = os.path.splitext(model_path)
    return root + "_history.csv"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _load_config(args.config, None).synth
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.positive_frac is not None:
        cfg = replace(cfg, positive_fraction=args.positive_frac)
    cfg.validate()
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"{args.out} is not empty; pass --force to overwrite")
    records = generate_dataset(cfg, args.num, cfg.positive_fraction)
    write_dataset(args.out, records, cfg)
    n_pos = sum(r.positive for r in records)
    print(f"wrote {len(records)} slides ({n_pos} positive) to {args.out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    cfg = _load_config(args.config, args.seed)
    _require_dir(args.data)
    _prepare_output(args.out)
    records = load_dataset(args.data)
    rng = np.random.default_rng(cfg.seed)
    tr, va = stratified_split([r.positive for r in records], cfg.pipeline.seg_val_fraction, rng)
    model, history = train_segmenter(
        [(records[i].image, records[i].sc_mask) for i in tr],
        [(records[i].image, records[i].sc_mask) for i in va],
        cfg.unet, cfg.seg, seed=cfg.seed,
    )
    save_model(args.out, model)
    write_dict_rows(_history_path(args.out), history)
    best = max((h["val_dice"] for h in history), default=float("nan"))
    print(f"saved segmentation model to {args.out} (best val dice {best:.4f})")
    return EXIT_OK


def cmd_train_caps(args) -> int:
    cfg = _load_config(args.config, args.seed)
    _require_dir(args.data)
    _prepare_output(args.out)
    records = load_dataset(args.data)
    p = cfg.pipeline
    rng = np.random.default_rng(cfg.seed)
    cache = CentroidCache(p.compactness, p.slic_iterations)
    pool = balance_patches(build_patch_set(records, p.patch_superpixels, cfg, cache=cache),
                           p.max_train_patches, p.neg_ratio, rng)
    if len(pool) == 0:
        raise DataError("the dataset yields no stratum-corneum patches")
    tr, va = stratified_split(pool.labels > 0.5, p.caps_val_fraction, rng)
    train, val = pool.subset(tr), pool.subset(va)
    logger.info("patch classifier: %d train / %d validation patches", len(train), len(val))
    if len(cfg.k_values) > 1:
        sweep = k_sweep(train, val, cfg.k_values, cfg.caps, cfg.caps_train, seed=cfg.seed)
        model, history = sweep.models[sweep.best_k], sweep.histories[sweep.best_k]
        plot_roc(os.path.splitext(args.out)[0] + "_roc.png", sweep.rocs, "Validation ROC")
        print("K sweep AUC: " + " ".join(f"K={k}:{a:.4f}" for k, a in sorted(sweep.aucs.items())))
    else:
        caps = replace(cfg.caps, K=cfg.k_values[0])
        model, history = train_patch_classifier((train.patches, train.labels),
                                                (val.patches, val.labels), caps, cfg.caps_train,
                                                seed=cfg.seed)
    save_model(args.out, model)
    write_dict_rows(_history_path(args.out), history)
    print(f"saved patch classifier (K={model.K}) to {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_config(args.config, None)
    for path in (args.image, args.seg, args.caps):
        _require_file(path)
    if args.overlay:
        _prepare_output(args.overlay)
    if args.T < 0:
        raise UsageError("--T must be >= 0")
    if args.superpixels < 1:
        raise UsageError("--superpixels must be >= 1")
    seg_model = load_model(args.seg, expect=UNet)
    caps_model = load_model(args.caps, expect=CapsuleNet)
    if args.K is not None:
        caps_model.config = replace(caps_model.config, K=args.K).validate()
    image = read_rgb(args.image)
    p = cfg.pipeline
    mask = postprocess(segment(seg_model, image), p.min_area_fraction)
    specs = []
    if np.any(mask):
        specs = select_patches(slic(image, args.superpixels, p.compactness, p.slic_iterations),
                               mask, caps_model.config.patch_size)
    probs = classify_windows(caps_model, image, specs)
    count, decision = decide(probs, args.cutoff, args.T)
    image_id = args.id or os.path.splitext(os.path.basename(args.image))[0]
    result = WsiDiagnosis(image_id, count, args.T, decision, probs.tolist(), specs, args.cutoff,
                          empty_sc=not np.any(mask))
    if args.overlay:
        write_rgb(args.overlay, overlay(image, mask, specs, probs, args.cutoff))
    print(result.summary_line())
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, pipeline=replace(cfg.pipeline, jobs=args.jobs)).validate()
    _require_dir(args.data)
    os.makedirs(args.out, exist_ok=True)
    records = load_dataset(args.data)
    results = crossval(records, cfg)
    written = write_crossval_report(args.out, results, plots=not args.no_plots)
    for n_sp in cfg.pipeline.superpixels:
        accs = [r.wsi_metrics[n_sp]["acc_I"] for r in results]
        tnrs = [r.wsi_metrics[n_sp]["tnr_II"] for r in results]
        print(f"superpixels={n_sp} acc_I={np.mean(accs):.4f} tnr_II={np.mean(tnrs):.4f}")
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neutrocaps", description="Stratum-corneum neutrophil detection pipeline.")
    parser.add_argument("--version", action="version", version=f"neutrocaps {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic whole-slide dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--num", type=int, required=True, help="number of slides")
    p.add_argument("--positive-frac", type=float, default=None,
                   help="fraction of positive slides (default from config, 88/273)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="run config (synth.* keys are used)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    for name, func, what in (("train-seg", cmd_train_seg, "segmentation U-Net"),
                             ("train-caps", cmd_train_caps, "capsule patch classifier")):
        p = sub.add_parser(name, help=f"train the {what}")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", default=None, help="run config file")
        p.add_argument("--out", required=True, help="model file to write")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.set_defaults(func=func)

    p = sub.add_parser("diagnose", help="diagnose one slide image")
    p.add_argument("--image", required=True)
    p.add_argument("--seg", required=True, help="segmentation model file")
    p.add_argument("--caps", required=True, help="patch classifier model file")
    p.add_argument("--superpixels", type=int, default=300)
    p.add_argument("--K", type=int, default=None, help="top-K pool size (default: model's)")
    p.add_argument("--cutoff", type=float, default=0.5, help="patch probability cutoff")
    p.add_argument("--T", type=int, default=0, help="slide is positive if count > T")
    p.add_argument("--overlay", default=None, help="overlay PNG to write")
    p.add_argument("--id", default=None, help="identifier printed in the result line")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("crossval", help="run the k-fold evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--jobs", type=int, default=None, help="folds trained in parallel")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-plots", action="store_true", help="skip ROC PNGs")
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"neutrocaps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, NeutrocapsError) as exc:
        print(f"neutrocaps: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"neutrocaps: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
