"""Instance labelling, small-blob removal and object-level evaluation metrics.

The object-level scores follow the GlaS challenge conventions:

* detection: a prediction is a true positive when it covers more than half of
  a ground-truth object; pairs are matched one-to-one, greedily by overlap.
* object Dice / Hausdorff: every object is compared with its partner in the
  other map (maximal overlap; for Hausdorff, the nearest object when nothing
  overlaps) and the per-object scores are area-weighted, symmetrically.

When several partners tie on overlap (or distance), the one giving the best
score is used, which keeps every metric independent of the id numbering.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

__all__ = [
    "connected_components",
    "remove_small_blobs",
    "relabel_sequential",
    "boundary_mask",
    "overlap_table",
    "object_f1",
    "object_dice",
    "object_hausdorff",
    "hausdorff_distance",
    "evaluate",
    "MetricsReport",
    "RunningStats",
]

_EIGHT = np.ones((3, 3), dtype=bool)


def relabel_sequential(labels):
    """Renumber positive ids 1..n in raster order of each object's first pixel."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first)]
    lut = np.zeros(int(flat.max()) + 1 if flat.size else 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels]


def connected_components(mask):
    """8-connected labelling; ids follow raster order of first pixels."""
    labels, _ = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)
    return relabel_sequential(labels)


def remove_small_blobs(labels, min_area=500):
    """Drop objects with fewer than ``min_area`` pixels and renumber the rest."""
    labels = np.asarray(labels)
    areas = np.bincount(labels.ravel())
    small = areas < min_area
    small[0] = False
    out = np.where(small[labels], 0, labels)
    return relabel_sequential(out)


def boundary_mask(obj):
    """Object pixels with a 4-neighbour outside the object or on the image border."""
    obj = np.asarray(obj, dtype=bool)
    padded = np.pad(obj, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)[1:-1, 1:-1]
    return obj & ~interior


def overlap_table(pred, gt):
    """Counts ``T[i, j]`` of pixels with pred id ``i`` and gt id ``j`` (row/col 0 = background)."""
    pred, gt = _check(pred, gt)
    n_p, n_g = int(pred.max()) + 1, int(gt.max()) + 1
    return np.bincount(pred.ravel().astype(np.int64) * n_g + gt.ravel(),
                       minlength=n_p * n_g).reshape(n_p, n_g)


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    return relabel_sequential(pred), relabel_sequential(gt)


def object_f1(pred, gt):
    """Object detection precision, recall and F1.

    Two empty maps score (1, 1, 1).
    """
    table = overlap_table(pred, gt)
    n_p, n_g = table.shape[0] - 1, table.shape[1] - 1
    if n_p == 0 and n_g == 0:
        return 1.0, 1.0, 1.0
    gt_area = table.sum(axis=0)
    inter = table[1:, 1:]
    cand = np.argwhere(inter > 0.5 * gt_area[None, 1:])
    cand = sorted(cand.tolist(), key=lambda ij: (-inter[ij[0], ij[1]], ij[0], ij[1]))
    used_p, used_g = set(), set()
    for i, j in cand:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    tp = len(used_p)
    precision = tp / n_p if n_p else 0.0
    recall = tp / n_g if n_g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _directional_dice(inter, area_a, area_b):
    """Area-weighted Dice of every object of A with its best-overlap partner in B."""
    total = area_a.sum()
    if total == 0:
        return 0.0
    score = 0.0
    for i in range(len(area_a)):
        row = inter[i]
        if row.size == 0 or row.max() == 0:
            continue
        tied = np.flatnonzero(row == row.max())
        dice = max(2.0 * row[j] / (area_a[i] + area_b[j]) for j in tied)
        score += area_a[i] / total * dice
    return score


def object_dice(pred, gt):
    """Symmetric area-weighted object-level Dice; two empty maps score 1."""
    table = overlap_table(pred, gt)
    area_p, area_g = table[1:].sum(axis=1), table[:, 1:].sum(axis=0)
    if area_p.size == 0 and area_g.size == 0:
        return 1.0
    inter = table[1:, 1:]
    return 0.5 * (_directional_dice(inter.T, area_g, area_p) + _directional_dice(inter, area_p, area_g))


def hausdorff_distance(a, b):
    """Symmetric Hausdorff distance between two (N, 2) point sets."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Hausdorff distance of an empty set")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def _directional_hausdorff(labels_a, labels_b, inter, area_a, penalty):
    n_a, n_b = len(area_a), inter.shape[1]
    total = area_a.sum()
    if total == 0:
        return 0.0
    bnd_a = [np.argwhere(boundary_mask(labels_a == i + 1)) for i in range(n_a)]
    bnd_b = [np.argwhere(boundary_mask(labels_b == j + 1)) for j in range(n_b)]
    pix_b = [np.argwhere(labels_b == j + 1) for j in range(n_b)]
    score = 0.0
    for i in range(n_a):
        if n_b == 0:
            h = penalty
        else:
            row = inter[i]
            if row.max() > 0:
                tied = np.flatnonzero(row == row.max())
            else:
                # nearest object by closest-pixel distance
                pix_a = cKDTree(np.argwhere(labels_a == i + 1))
                gaps = np.array([pix_a.query(pb)[0].min() for pb in pix_b])
                tied = np.flatnonzero(gaps == gaps.min())
            h = min(hausdorff_distance(bnd_a[i], bnd_b[j]) for j in tied)
        score += area_a[i] / total * h
    return score


def object_hausdorff(pred, gt):
    """Symmetric area-weighted object-level Hausdorff distance.

    Objects with no counterpart at all (the other map is empty) are charged
    the image diagonal; two empty maps score 0.
    """
    pred, gt = _check(pred, gt)
    table = overlap_table(pred, gt)
    area_p, area_g = table[1:].sum(axis=1), table[:, 1:].sum(axis=0)
    if area_p.size == 0 and area_g.size == 0:
        return 0.0
    penalty = float(np.hypot(*pred.shape))
    inter = table[1:, 1:]
    return 0.5 * (_directional_hausdorff(gt, pred, inter.T, area_g, penalty)
                  + _directional_hausdorff(pred, gt, inter, area_p, penalty))


class RunningStats:
    """Single-pass mean and sample standard deviation (Welford's algorithm)."""

    def __init__(self):
        self.n, self.mean, self._m2 = 0, 0.0, 0.0

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (x - self.mean)

    @property
    def sd(self):
        return float(np.sqrt(self._m2 / (self.n - 1))) if self.n > 1 else 0.0


METRIC_COLUMNS = ("precision", "recall", "f1", "object_dice", "hausdorff")


@dataclass
class MetricsReport:
    names: list
    rows: list  # one dict of METRIC_COLUMNS per image

    def aggregate(self):
        """``{column: (mean, sd)}`` over all images."""
        out = {}
        for col in METRIC_COLUMNS:
            stats = RunningStats()
            for row in self.rows:
                stats.push(row[col])
            out[col] = (stats.mean, stats.sd)
        return out

    def to_table(self, sep="\t"):
        lines = [sep.join(("image",) + METRIC_COLUMNS)]
        for name, row in zip(self.names, self.rows):
            lines.append(sep.join([name] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS]))
        agg = self.aggregate()
        lines.append(sep.join(["mean"] + [f"{agg[c][0]:.6f}" for c in METRIC_COLUMNS]))
        lines.append(sep.join(["sd"] + [f"{agg[c][1]:.6f}" for c in METRIC_COLUMNS]))
        lines.append(sep.join(["mean(sd)"] + [f"{agg[c][0]:.2f}({agg[c][1]:.2f})" for c in METRIC_COLUMNS]))
        return "\n".join(lines) + "\n"


def evaluate(pred, gt):
    """All object-level metrics for one image as a dict."""
    p, r, f = object_f1(pred, gt)
    return {"precision": p, "recall": r, "f1": f,
            "object_dice": object_dice(pred, gt), "hausdorff": object_hausdorff(pred, gt)}
