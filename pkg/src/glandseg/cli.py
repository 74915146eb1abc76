"""Command-line entry point: ``glandseg {synth,train,segment,evaluate,gridsearch}``.

Every command reads the same flat config (``--config``, plus ``--set key=value``
overrides), writes into ``--out`` and records the resolved configuration in
``<out>/run.cfg``.  Exit codes: 0 success, 1 usage or config error, 2 data
error (missing or malformed inputs), 3 numeric failure.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, cnn, dataset, pipeline
from .config import ConfigError, load_config
from .dataset import ManifestError, SynthParams
from .imaging import CorruptImageError, ImageFormatError
from .tvseg import TvDiverged

log = logging.getLogger("glandseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="config file (key = value lines)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key; repeatable")
    p.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides paths.out)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="glandseg", description="Gland segmentation with CNN pixel classifiers "
                     "and weighted-TV refinement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic train/test dataset")
    p.add_argument("--train", nargs=2, type=int, metavar=("BENIGN", "MALIGNANT"),
                   help="training image counts (default from synth.*)")
    p.add_argument("--test", nargs=2, type=int, metavar=("BENIGN", "MALIGNANT"),
                   help="test image counts (default from synth.*)")

    p = sub.add_parser("train", parents=[common], help="train the object and separator networks")
    p.add_argument("--manifest", help="training manifest (overrides paths.manifest)")

    p = sub.add_parser("segment", parents=[common], help="segment images with trained networks")
    p.add_argument("images", nargs="*", help="RGB images; alternatively use --manifest")
    p.add_argument("--manifest", help="segment every image of a manifest, with ground truth")
    p.add_argument("--object-ckpt", help="overrides paths.object_checkpoint")
    p.add_argument("--separator-ckpt", help="overrides paths.separator_checkpoint")

    p = sub.add_parser("evaluate", parents=[common], help="score predicted label maps")
    p.add_argument("pred_dir", help="directory with <stem>_labels.fmap files")
    p.add_argument("manifest", help="ground-truth manifest")

    p = sub.add_parser("gridsearch", parents=[common], help="tune alpha, beta and lambda")
    p.add_argument("--manifest", help="tuning manifest (overrides paths.test_manifest)")
    p.add_argument("--object-ckpt", help="overrides paths.object_checkpoint")
    p.add_argument("--separator-ckpt", help="overrides paths.separator_checkpoint")
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = Path(args.out if args.out else cfg.paths.out)
    return cfg, out


def _load_models(cfg, args):
    obj = getattr(args, "object_ckpt", None) or cfg.paths.object_checkpoint
    sep = getattr(args, "separator_ckpt", None) or cfg.paths.separator_checkpoint
    cfg.paths.object_checkpoint, cfg.paths.separator_checkpoint = str(obj or ""), str(sep or "")
    models = []
    for kind, path in (("object", obj), ("separator", sep)):
        if not path:
            raise FileNotFoundError(f"no {kind} checkpoint given (paths.{kind}_checkpoint)")
        if not Path(path).is_file():
            raise FileNotFoundError(f"{kind} checkpoint not found: {path}")
        spec, params, _ = cnn.load_checkpoint(path)
        models.append((spec, params))
    return models


def cmd_synth(cfg, out, args):
    s = cfg.synth
    n_train = args.train or (s.train_benign, s.train_malignant)
    n_test = args.test or (s.test_benign, s.test_malignant)
    train = dataset.generate_synthetic_dataset(cfg.seed, *n_train,
                                               sizes=[(s.train_size, s.train_size)] * sum(n_train))
    test = dataset.generate_synthetic_dataset(cfg.seed + 1000, *n_test,
                                              SynthParams(size_range=(s.test_size_min, s.test_size_max)))
    for name, samples in (("train", train), ("test", test)):
        path = dataset.write_dataset(samples, out / name)
        log.info("wrote %d images, manifest %s", len(samples), path)
    return {"train_seed": cfg.seed, "test_seed": cfg.seed + 1000}


def cmd_train(cfg, out, args):
    if args.manifest:
        cfg.paths.manifest = args.manifest
    if not cfg.paths.manifest:
        raise FileNotFoundError("no training manifest given (paths.manifest or --manifest)")
    obj, sep = pipeline.train_models(cfg, out)
    print(obj)
    print(sep)
    return {"object_checkpoint": obj, "separator_checkpoint": sep}


def cmd_segment(cfg, out, args):
    if args.manifest and args.images:
        raise ConfigError("give images or --manifest, not both")
    if args.manifest:
        items = [(r.image, r.labels) for r in dataset.read_manifest(args.manifest)]
    else:
        items = [(Path(p), None) for p in args.images]
    if not items:
        raise ConfigError("no images to segment")
    for img, _ in items:
        if not Path(img).is_file():
            raise FileNotFoundError(f"image not found: {img}")
    obj, sep = _load_models(cfg, args)
    done = pipeline.segment_to_dir(items, obj, sep, cfg, out, jobs=args.jobs)
    for stem, (decision, n) in done.items():
        print(f"{stem}\t{n} objects\t{decision.record()}")
    return {"images": len(items), "manifest": args.manifest or "-"}


def cmd_evaluate(cfg, out, args):
    report = pipeline.evaluate_dir(args.pred_dir, args.manifest)
    table = report.to_table()
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(table)
    sys.stdout.write(table)
    return {"pred_dir": args.pred_dir, "manifest": args.manifest}


def cmd_gridsearch(cfg, out, args):
    manifest = args.manifest or cfg.paths.test_manifest
    if not manifest:
        raise FileNotFoundError("no tuning manifest given (paths.test_manifest or --manifest)")
    g = cfg.gridsearch
    if not (g.alpha and g.beta and g.lam):
        raise ConfigError("empty parameter grid")
    obj, sep = _load_models(cfg, args)
    maps, gts = [], []
    for rec in dataset.read_manifest(manifest):
        rgb, labels, _ = dataset.load_record(rec, need_separator=False)
        maps.append(pipeline.classifier_maps(rgb, obj, sep, cfg))
        gts.append(labels)
    best, table = pipeline.grid_search(maps, gts, g, cfg.fusion, cfg.pd_params(), cfg.post.min_area,
                                       jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["alpha\tbeta\tlam\tmean_object_dice"] + [f"{a!r}\t{b!r}\t{l!r}\t{s:.6f}" for a, b, l, s in table]
    (out / "gridsearch.tsv").write_text("\n".join(lines) + "\n")
    (out / "best.cfg").write_text(f"edge.alpha = {best[0]!r}\nedge.beta = {best[1]!r}\ntv.lam = {best[2]!r}\n")
    print(f"best alpha={best[0]} beta={best[1]} lam={best[2]} mean_object_dice={best[3]:.4f}")
    return {"best": f"{best[0]} {best[1]} {best[2]} {best[3]:.6f}"}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "segment": cmd_segment,
            "evaluate": cmd_evaluate, "gridsearch": cmd_gridsearch}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = _config(args)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](cfg, out, args)
        pipeline.write_run_manifest(cfg, out, " ".join(["glandseg"] + (argv if argv is not None else sys.argv[1:])),
                                    {"version": __version__, "numpy": np.__version__, **(extra or {})})
    except ConfigError as exc:
        print(f"glandseg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TvDiverged, cnn.TrainingDiverged, FloatingPointError) as exc:
        print(f"glandseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ManifestError, ImageFormatError, CorruptImageError, ValueError, OSError) as exc:
        print(f"glandseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
