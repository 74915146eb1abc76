"""Problem generators shared by the unit and acceptance tests."""
import numpy as np
from scipy import ndimage

from glandseg.tvseg import EdgeParams, TvProblem, edge_function


def random_tv_problem(seed, n=32):
    """Smooth random edge map and weight field, ~20% zero weights."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((n, n)), rng.uniform(0.5, 3))
    img = (img - img.min()) / max(np.ptp(img), 1e-12)
    g = edge_function(img, EdgeParams(rng.uniform(1, 10), rng.uniform(0.5, 1.5)))
    w = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), rng.uniform(0, 3))
    w = w / np.abs(w).max() * rng.uniform(0.5, 5)
    w[rng.random((n, n)) < 0.2] = 0.0
    return TvProblem(g, w, rng.uniform(0.05, 1))


def disk_problem(size=64, radius=12, inside=-2.0, outside=2.0, lam=0.1):
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    disk = np.hypot(yy - c, xx - c) <= radius
    return TvProblem(np.ones((size, size)), np.where(disk, inside, outside), lam), disk


def random_label_map(rng, max_side=16, max_objects=5):
    """Random instance map built from a few overlapping rectangles / blobs."""
    h, w = rng.integers(2, max_side + 1, 2)
    labels = np.zeros((h, w), int)
    for k in range(1, rng.integers(0, max_objects + 1) + 1):
        if rng.random() < 0.5:
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            r1, c1 = r0 + rng.integers(1, h + 1), c0 + rng.integers(1, w + 1)
            labels[r0:r1, c0:c1] = k
        else:
            labels[rng.random((h, w)) < 0.15] = k
    return labels
