"""End-to-end orchestration: training both networks, segmenting images,
evaluation and the TV parameter grid search."""
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cnn
from .classify import classify_malignancy
from .config import dump_config
from .dataset import load_record, normalize_labels, read_manifest, sample_patches, transform_labels
from .fusion import FusionParams, fuse_maps
from .imaging import downsample_half, load_image, save_image, upsample_bilinear, write_fmap
from .postmetrics import MetricsReport, boundary_mask, connected_components, evaluate, object_dice, remove_small_blobs
from .preprocess import preprocess_pipeline
from .tvseg import EdgeParams, PdParams, TvProblem, edge_function, format_diagnostics, solve_tv, threshold_segmentation

log = logging.getLogger(__name__)

__all__ = [
    "network_specs",
    "prepare",
    "half_res_targets",
    "build_patch_sets",
    "train_models",
    "ClassifierMaps",
    "classifier_maps",
    "segment_maps",
    "segment_image",
    "SegmentResult",
    "render_overlay",
    "render_difference",
    "segment_to_dir",
    "evaluate_dir",
    "grid_search",
    "write_run_manifest",
]

BLUE, GREEN, CYAN, YELLOW = (0, 0, 255), (0, 255, 0), (0, 255, 255), (255, 255, 0)


def network_specs(variant):
    if variant == "tiny":
        return cnn.tiny_object_net_spec(), cnn.tiny_separator_net_spec()
    return cnn.object_net_spec(), cnn.separator_net_spec()


def prepare(rgb, cfg):
    """Preprocessed full-resolution image in [0, 1] and the half-resolution
    classifier input, centred to [-0.5, 0.5]."""
    full = preprocess_pipeline(rgb, cfg.stain_matrix(), cfg.clahe_params())
    return full, (downsample_half(full) - 0.5).astype(np.float32)


def half_res_targets(labels, separator, malignant, sep_threshold=0.5):
    """Four-class map and separator mask at half resolution."""
    gland = downsample_half((np.asarray(labels) > 0).astype(np.float64)) > 0.5
    classes = transform_labels(gland, malignant)
    sep = None
    if separator is not None:
        sep = (downsample_half(np.asarray(separator, dtype=np.float64)) >= sep_threshold).astype(np.int8)
    return classes, sep


def _heldout_images(flags, fraction, seed):
    """Stratified by malignancy: ``fraction`` of each group, at least one if possible."""
    rng = np.random.default_rng(seed)
    chosen = []
    flags = np.asarray(flags, dtype=bool)
    for group in (np.flatnonzero(~flags), np.flatnonzero(flags)):
        if len(group) < 2:
            continue
        k = min(len(group) - 1, max(1, int(round(fraction * len(group)))))
        chosen.extend(rng.choice(group, k, replace=False).tolist())
    return sorted(chosen)


def build_patch_sets(records, cfg):
    """Sample the Object-Net and Separator-Net patch sets from manifest records."""
    obj_spec, sep_spec = network_specs(cfg.net.variant)
    images, classmaps, sepmaps, flags = [], [], [], []
    for rec in records:
        rgb, labels, sep = load_record(rec, need_separator=True)
        _, half = prepare(rgb, cfg)
        classes, sep_half = half_res_targets(labels, sep, rec.malignant, cfg.sampling.separator_threshold)
        images.append(half)
        classmaps.append(classes)
        sepmaps.append(sep_half)
        flags.append(rec.malignant)
    heldout = _heldout_images(flags, cfg.sampling.heldout_fraction, cfg.seed + 1)
    s = cfg.sampling
    obj = sample_patches(images, classmaps, s.object_per_class, obj_spec.input_size, cfg.seed + 2,
                         heldout_images=heldout, heldout_per_class=s.heldout_object_per_class, n_classes=4,
                         border=s.border)
    sep = sample_patches(images, sepmaps, s.separator_per_class, sep_spec.input_size, cfg.seed + 3,
                         heldout_images=heldout, heldout_per_class=s.heldout_separator_per_class,
                         rotations={1: s.separator_rotations}, n_classes=2, border=s.border)
    return obj, sep


def _curve_text(curve):
    lines = ["epoch\tloss\ttrain_error\theldout_error"]
    lines += [f"{r['epoch']}\t{r['loss']:.6f}\t{r['train_error']:.6f}\t{r['heldout_error']:.6f}" for r in curve]
    return "\n".join(lines) + "\n"


def train_models(cfg, out_dir):
    """Train both networks from ``cfg.paths.manifest``; returns the checkpoint paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(cfg.paths.manifest)
    if not records:
        raise ValueError(f"{cfg.paths.manifest}: no training images")
    obj_set, sep_set = build_patch_sets(records, cfg)
    paths = []
    for name, spec, data, offset in (("object", network_specs(cfg.net.variant)[0], obj_set, 4),
                                     ("separator", network_specs(cfg.net.variant)[1], sep_set, 5)):
        tcfg = cfg.trainer(offset)
        log.info("training %s on %d patches", spec.name, len(data))
        params, curve = cnn.train(spec, data, tcfg,
                                  log=lambda r, n=spec.name: log.info("%s %s", n, json.dumps(r)))
        best = min(curve, key=lambda r: r["heldout_error"])
        ckpt = out_dir / f"{name}.ckpt"
        cnn.save_checkpoint(ckpt, spec, params, meta={"best_epoch": best["epoch"],
                                                      "heldout_error": best["heldout_error"],
                                                      "rng_seed": tcfg.rng_seed})
        (out_dir / f"{name}_curve.tsv").write_text(_curve_text(curve))
        paths.append(ckpt)
    return tuple(paths)


@dataclass
class ClassifierMaps:
    """Full-resolution classifier outputs for one image."""

    gray: np.ndarray        # preprocessed input, [0, 1]
    objects: np.ndarray     # (H, W, 4)
    separator: np.ndarray   # (H, W) separator probability


def classifier_maps(rgb, object_model, separator_model, cfg):
    """Preprocess, classify at half resolution, upsample the maps bilinearly."""
    full, half = prepare(rgb, cfg)
    h, w = full.shape
    obj_spec, obj_params = object_model
    sep_spec, sep_params = separator_model
    obj_half = cnn.predict_map(obj_spec, obj_params, half)
    sep_half = cnn.predict_map(sep_spec, sep_params, half)[..., 1]
    objects = upsample_bilinear(obj_half.astype(np.float64), w, h)
    separator = upsample_bilinear(sep_half.astype(np.float64), w, h)
    return ClassifierMaps(full, objects, separator)


@dataclass
class SegmentResult:
    mask: np.ndarray
    labels: np.ndarray
    u: np.ndarray
    weights: np.ndarray
    decision: object
    tv_history: list


def segment_maps(maps, fusion, edge, lam, pd, min_area):
    """Fusion, weighted-TV solve, 0.5 threshold, labelling and blob removal."""
    _, _, w = fuse_maps(maps.objects, maps.separator, fusion)
    g = edge_function(maps.gray, edge)
    state = solve_tv(TvProblem(g, w, lam), pd)
    mask = threshold_segmentation(state)
    labels = remove_small_blobs(connected_components(mask), min_area)
    return SegmentResult(labels > 0, labels, state.u, w, classify_malignancy(maps.objects), state.history)


def segment_image(rgb, object_model, separator_model, cfg):
    maps = classifier_maps(rgb, object_model, separator_model, cfg)
    return segment_maps(maps, cfg.fusion, cfg.edge, cfg.tv.lam, cfg.pd_params(), cfg.post.min_area)


def _outline(mask):
    return boundary_mask(mask) if mask.any() else mask


def render_overlay(rgb, pred_mask, gt_mask=None):
    """Prediction outline in blue, ground-truth outline (if given) in green."""
    out = np.array(rgb, dtype=np.uint8, copy=True)
    if gt_mask is not None:
        out[_outline(np.asarray(gt_mask, dtype=bool))] = GREEN
    out[_outline(np.asarray(pred_mask, dtype=bool))] = BLUE
    return out


def render_difference(pred_mask, gt_mask):
    """False negatives cyan, false positives yellow, agreeing foreground white."""
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = 255
    out[gt & ~pred] = CYAN
    out[pred & ~gt] = YELLOW
    return out


def _segment_one(args):
    image_path, gt_path, object_model, separator_model, cfg, out_dir = args
    image_path = Path(image_path)
    stem = image_path.stem
    rgb = load_image(image_path)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"{image_path}: expected an RGB image")
    res = segment_image(rgb, object_model, separator_model, cfg)
    save_image(res.mask.astype(np.uint8) * 255, out_dir / f"{stem}_mask.png")
    write_fmap(res.labels.astype(np.float32), out_dir / f"{stem}_labels.fmap")
    gt_mask = None
    if gt_path is not None:
        gt_mask = normalize_labels(load_image(gt_path)) > 0
        save_image(render_difference(res.mask, gt_mask), out_dir / f"{stem}_diff.png")
    save_image(render_overlay(rgb, res.mask, gt_mask), out_dir / f"{stem}_overlay.png")
    (out_dir / f"{stem}_tv.log").write_text("".join(format_diagnostics(r) + "\n" for r in res.tv_history))
    return stem, res.decision, int(res.labels.max())


def segment_to_dir(items, object_model, separator_model, cfg, out_dir, jobs=1):
    """Segment ``items`` (image path, optional GT label path) into ``out_dir``.

    Writes ``<stem>_mask.png``, ``<stem>_labels.fmap``, ``<stem>_overlay.png``,
    ``<stem>_diff.png`` (with ground truth only), ``<stem>_tv.log`` and one
    line per image in ``decisions.tsv``.  Images are independent, so with
    ``jobs > 1`` they are spread over worker processes; each writes only its
    own files.  Returns ``{stem: (MalignancyDecision, n_objects)}``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(img, gt, object_model, separator_model, cfg, out_dir) for img, gt in items]
    stems = [Path(t[0]).stem for t in tasks]
    if len(set(stems)) != len(stems):
        raise ValueError("input images must have distinct file names")
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(min(jobs, len(tasks))) as ex:
            done = list(ex.map(_segment_one, tasks))
    else:
        done = [_segment_one(t) for t in tasks]
    lines = ["image\tclass\tconfidence\ttie"]
    for stem, d, _ in done:
        lines.append(f"{stem}\t{d.name}\t{d.confidence:.4f}\t{int(d.tie)}")
    (out_dir / "decisions.tsv").write_text("\n".join(lines) + "\n")
    return {stem: (d, n) for stem, d, n in done}


def evaluate_dir(pred_dir, gt_manifest):
    """Compare ``<stem>_labels.fmap`` files against the manifest's label images.

    Raises ``FileNotFoundError`` listing every manifest image without a
    prediction and every prediction without a manifest entry.
    """
    pred_dir = Path(pred_dir)
    records = read_manifest(gt_manifest)
    preds = {p.name[:-len("_labels.fmap")]: p for p in pred_dir.glob("*_labels.fmap")}
    names = [r.name for r in records]
    missing = [n for n in names if n not in preds]
    extra = sorted(set(preds) - set(names))
    if missing or extra:
        raise FileNotFoundError("unmatched files: " + ", ".join(
            [f"no prediction for {n}" for n in missing] + [f"no ground truth for {n}" for n in extra]))
    rows = []
    for rec in records:
        pred = np.rint(load_image(preds[rec.name])).astype(np.int64)
        gt = normalize_labels(load_image(rec.labels))
        rows.append(evaluate(pred, gt))
    return MetricsReport(names, rows)


def _grid_point(args):
    maps_list, gts, fusion, alpha, beta, lam, pd, min_area = args
    edge = EdgeParams(alpha, beta)
    scores = [object_dice(segment_maps(m, fusion, edge, lam, pd, min_area).labels, gt)
              for m, gt in zip(maps_list, gts)]
    return float(np.mean(scores))


def grid_search(maps_list, gts, grid, fusion=FusionParams(), pd=None, min_area=500, jobs=1):
    """Exhaustive search over ``grid.alpha x grid.beta x grid.lam``.

    ``maps_list`` holds precomputed :class:`ClassifierMaps` (the classifier
    does not depend on the TV parameters).  Returns ``(best, table)`` where
    ``table`` rows are ``(alpha, beta, lam, mean object Dice)`` in grid order;
    ties prefer smaller lambda, then alpha, then beta.
    """
    points = list(itertools.product(grid.alpha, grid.beta, grid.lam))
    if not points:
        raise ValueError("empty parameter grid")
    pd = pd if pd is not None else PdParams()
    tasks = [(maps_list, gts, fusion, a, b, l, pd, min_area) for a, b, l in points]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            scores = list(ex.map(_grid_point, tasks))
    else:
        scores = [_grid_point(t) for t in tasks]
    table = [(a, b, l, s) for (a, b, l), s in zip(points, scores)]
    best = min(table, key=lambda r: (-r[3], r[2], r[0], r[1]))
    return best, table


def write_run_manifest(cfg, out_dir, command, extra=None):
    """Record the resolved configuration and seeds of a run in ``out_dir/run.cfg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = f"# command: {command}\n"
    if extra:
        header += "".join(f"# {k}: {v}\n" for k, v in extra.items())
    (out_dir / "run.cfg").write_text(header + dump_config(cfg))
