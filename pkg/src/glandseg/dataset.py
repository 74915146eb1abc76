"""Training data: label transforms, balanced patch sampling, rotation
augmentation, a synthetic H&E gland generator and dataset manifests."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cnn import PatchSet
from .imaging import load_image, save_image
from .preprocess import RUIFROK_HE

__all__ = [
    "BENIGN_BACKGROUND",
    "BENIGN_GLAND",
    "MALIGNANT_BACKGROUND",
    "MALIGNANT_GLAND",
    "normalize_labels",
    "transform_labels",
    "sample_patches",
    "augment_rotations",
    "rotate_patch",
    "SynthParams",
    "SyntheticSample",
    "generate_synthetic_dataset",
    "separator_ground_truth",
    "ManifestRecord",
    "ManifestError",
    "read_manifest",
    "write_manifest",
    "write_dataset",
]

BENIGN_BACKGROUND, BENIGN_GLAND, MALIGNANT_BACKGROUND, MALIGNANT_GLAND = 0, 1, 2, 3


def normalize_labels(labels):
    """Renumber instance ids to the contiguous range 0..n, keeping 0 as background.

    Ids keep their relative order.
    """
    labels = np.asarray(labels)
    ids, inverse = np.unique(labels, return_inverse=True)
    if ids[0] != 0:
        inverse = inverse + 1
    return inverse.reshape(labels.shape).astype(np.int32)


def transform_labels(instances, malignant):
    """Map an instance label image to the four-class scheme.

    benign: background -> 0, gland -> 1; malignant: background -> 2, gland -> 3.
    """
    gland = np.asarray(instances) > 0
    offset = MALIGNANT_BACKGROUND if malignant else BENIGN_BACKGROUND
    return (gland.astype(np.int8) + offset).astype(np.int8)


def rotate_patch(patch, degrees):
    """Bilinear rotation about the patch center, mirror-extended at the border."""
    if degrees % 360 == 0:
        return np.array(patch, copy=True)
    return ndimage.rotate(patch, degrees, reshape=False, order=1, mode="mirror",
                          prefilter=False)


def augment_rotations(patch, copies=9):
    """The patch plus ``copies`` rotated versions in steps of 360/(copies+1) degrees.

    With the default this gives rotations every 36 degrees.  Accepts (S, S) or
    (C, S, S); returns (copies + 1, ...) stacked in rotation order.
    """
    patch = np.asarray(patch)
    if patch.shape[-1] != patch.shape[-2]:
        raise ValueError(f"rotation needs a square patch, got {patch.shape[-2:]}")
    step = 360.0 / (copies + 1)
    out = []
    for k in range(copies + 1):
        if patch.ndim == 2:
            out.append(rotate_patch(patch, k * step))
        else:
            out.append(np.stack([rotate_patch(ch, k * step) for ch in patch]))
    return np.stack(out).astype(patch.dtype, copy=False)


def _eligible(classmap, cls, margin):
    h, w = classmap.shape
    sel = np.zeros(classmap.shape, dtype=bool)
    if h > 2 * margin and w > 2 * margin:
        sel[margin:h - margin, margin:w - margin] = True
    return np.argwhere(sel & (classmap == cls))


def sample_patches(images, classmaps, per_class, patch, seed, heldout_images=(),
                   heldout_per_class=None, rotations=None, n_classes=None, border="valid"):
    """Draw a class-balanced patch set.

    Parameters
    ----------
    images, classmaps : sequences of 2-D arrays
        Classifier input images and their per-pixel class ids (same shapes).
    per_class : int
        Patches per class in the training split.
    patch : int
        Patch side length.
    border : {"valid", "mirror"}
        ``valid`` keeps centers ``patch // 2`` away from the border;
        ``mirror`` allows every pixel and reflects the image at the border,
        the same extension used for dense prediction.
    seed : int
    heldout_images : iterable of int
        Image indices forming the held-out split.
    heldout_per_class : int, optional
        Patches per class in the held-out split (defaults to ``per_class``).
    rotations : dict, optional
        ``{class id: copies}``; those classes draw from (center, rotation)
        pairs, rotating every ``360 / (copies + 1)`` degrees.
    n_classes : int, optional
        Defaults to ``max(class id) + 1``.

    Raises
    ------
    ValueError
        When a class has fewer eligible (center, rotation) candidates than
        requested in some split.
    """
    rng = np.random.default_rng(seed)
    rotations = rotations or {}
    heldout_images = set(int(i) for i in heldout_images)
    if heldout_per_class is None:
        heldout_per_class = per_class
    if n_classes is None:
        n_classes = int(max(np.max(c) for c in classmaps)) + 1
    if border not in ("valid", "mirror"):
        raise ValueError(f"border must be 'valid' or 'mirror', got {border!r}")
    half = patch // 2
    margin = half if border == "valid" else 0
    splits = [(False, [i for i in range(len(images)) if i not in heldout_images], per_class)]
    if heldout_images:
        splits.append((True, sorted(heldout_images), heldout_per_class))

    prov, flags = [], []
    for is_heldout, idxs, count in splits:
        for cls in range(n_classes):
            cand = [np.column_stack([np.full(len(rc), i), rc])
                    for i in idxs for rc in [_eligible(classmaps[i], cls, margin)]]
            cand = np.concatenate(cand) if cand else np.zeros((0, 3), dtype=int)
            n_rot = rotations.get(cls, 0) + 1
            pool = len(cand) * n_rot
            if pool < count:
                split = "held-out" if is_heldout else "training"
                raise ValueError(
                    f"class {cls} exhausted in {split} split: {pool} candidates, {count} requested")
            pick = rng.choice(pool, size=count, replace=False)
            chosen = cand[pick // n_rot]
            rot = pick % n_rot
            prov.append(np.column_stack([chosen, rot]))
            flags.append(np.full(count, is_heldout))
    prov = np.concatenate(prov).astype(np.int64)
    heldout = np.concatenate(flags)

    dtype = np.asarray(images[0]).dtype
    if not np.issubdtype(dtype, np.floating):
        dtype = np.float32
    patches = np.empty((len(prov), 1, patch, patch), dtype=dtype)
    pad = half - margin
    sources = {}
    for n, (i, r, c, k) in enumerate(prov):
        if i not in sources:
            sources[i] = np.pad(np.asarray(images[i], dtype=dtype), pad, mode="reflect")
        # center (r, c) sits at (r + pad, c + pad) in the padded image
        p = sources[i][r + pad - half:r + pad - half + patch, c + pad - half:c + pad - half + patch]
        if k:
            n_rot = rotations[int(classmaps[i][r, c])] + 1
            p = rotate_patch(p, k * 360.0 / n_rot)
        patches[n, 0] = p
    labels = np.array([classmaps[i][r, c] for i, r, c, _ in prov], dtype=np.int64)
    return PatchSet(patches, labels, heldout, prov)


# --- synthetic data -------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic H&E gland generator (sizes in pixels)."""

    size_range: tuple = (64, 128)
    glands_per_10k_px: float = 3.0
    radius_range: tuple = (11.0, 17.0)
    touch_probability: float = 0.6
    min_touch_gap: int = 1
    max_touch_gap: int = 3
    separator_gap: float = 6.0
    nuclei_density_benign: float = 0.004
    nuclei_density_malignant: float = 0.012
    noise: float = 2.0


@dataclass
class SyntheticSample:
    rgb: np.ndarray
    labels: np.ndarray
    separator: np.ndarray
    malignant: bool


def _smooth_noise(rng, shape, sigma, amplitude):
    n = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return amplitude * n / (n.std() + 1e-12)


def _gland_mask(shape, center, radii, angle, harmonics):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    theta = np.arctan2(v, u)
    rad = np.hypot(u / radii[1], v / radii[0])
    scale = 1.0 + sum(a * np.cos(k * theta + ph) for k, a, ph in harmonics)
    return rad <= scale


def _place_glands(rng, shape, malignant, params):
    h, w = shape
    labels = np.zeros(shape, dtype=np.int32)
    target = max(2, int(round(params.glands_per_10k_px * h * w / 1e4)))
    amp = 0.16 if malignant else 0.05
    attempts = 0
    while labels.max() < target and attempts < 60 * target:
        attempts += 1
        r0 = rng.uniform(*params.radius_range)
        radii = (r0 * rng.uniform(0.75, 1.0), r0)
        harmonics = [(k, rng.uniform(0, amp), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)]
        angle = rng.uniform(0, np.pi)
        touching = labels.max() > 0 and rng.random() < params.touch_probability
        if touching:
            k = rng.integers(1, labels.max() + 1)
            cy, cx = ndimage.center_of_mass(labels == k)
            phi = rng.uniform(0, 2 * np.pi)
            gap = int(rng.integers(params.min_touch_gap, params.max_touch_gap + 1))
            dist = 0.5 * r0
            while True:
                center = (cy + dist * np.sin(phi), cx + dist * np.cos(phi))
                mask = _gland_mask(shape, center, radii, angle, harmonics)
                grown = ndimage.binary_dilation(mask, iterations=gap) if gap else mask
                if not np.any(grown & (labels > 0)):
                    break
                dist += 1.0
        else:
            center = (rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w))
            mask = _gland_mask(shape, center, radii, angle, harmonics)
            if np.any(ndimage.binary_dilation(mask, iterations=6) & (labels > 0)):
                continue
        if not (0 <= center[0] < h and 0 <= center[1] < w):
            continue
        if mask.sum() < 0.5 * np.pi * radii[0] * radii[1]:
            continue  # mostly outside the image
        labels[mask] = labels.max() + 1
    return labels


def separator_ground_truth(labels, gap=6.0):
    """Lines between instances whose boundaries are at most ``gap`` apart.

    A medial pixel is one whose two nearest instances are (nearly) equidistant
    and within ``gap / 2 + 1``; the medial set is dilated by one pixel to give
    lines about three pixels thick.  Every marked pixel therefore lies within
    ``gap`` of at least two distinct instances.
    """
    labels = np.asarray(labels)
    ids = [k for k in np.unique(labels) if k > 0]
    if len(ids) < 2:
        return np.zeros(labels.shape, dtype=bool)
    dists = np.stack([ndimage.distance_transform_edt(labels != k) for k in ids])
    dists.sort(axis=0)
    d1, d2 = dists[0], dists[1]
    medial = (d2 <= gap / 2 + 1) & (d2 - d1 <= 1.0)
    sep = ndimage.binary_dilation(medial, structure=ndimage.generate_binary_structure(2, 1))
    return sep & (d2 <= gap)


def _render(rng, labels, malignant, params):
    h, w = labels.shape
    gland = labels > 0
    depth = np.zeros(labels.shape)
    for k in range(1, labels.max() + 1):
        depth = np.maximum(depth, ndimage.distance_transform_edt(labels == k))

    if malignant:
        hema = 0.30 + _smooth_noise(rng, labels.shape, 4, 0.05)
        eosin = 0.25 + _smooth_noise(rng, labels.shape, 4, 0.05)
        density, epi = params.nuclei_density_malignant, 5.5 + _smooth_noise(rng, labels.shape, 3, 1.5)
    else:
        hema = 0.08 + _smooth_noise(rng, labels.shape, 4, 0.03)
        eosin = 0.40 + _smooth_noise(rng, labels.shape, 4, 0.05)
        density, epi = params.nuclei_density_benign, np.full(labels.shape, 3.5)

    nuclei = np.zeros(labels.shape)
    n_nuc = rng.poisson(density * h * w)
    nuclei[rng.integers(0, h, n_nuc), rng.integers(0, w, n_nuc)] = 1.0
    nuclei = ndimage.gaussian_filter(nuclei, 1.0) * 2 * np.pi
    hema = hema + 0.5 * nuclei * ~gland

    band = gland & (depth <= epi)
    cyto = gland & (depth > epi) & (depth <= epi + 3)
    lumen = gland & (depth > epi + 3)
    if malignant:
        hema[band] = 0.95 + _smooth_noise(rng, labels.shape, 1, 0.15)[band]
        eosin[band] = 0.30
        hema[cyto] = 0.55
        eosin[cyto] = 0.45
        debris = _smooth_noise(rng, labels.shape, 1.5, 1.0) > 1.0
        hema[lumen] = np.where(debris[lumen], 0.5, 0.15)
        eosin[lumen] = 0.15
    else:
        hema[band] = 0.80 + _smooth_noise(rng, labels.shape, 1, 0.08)[band]
        eosin[band] = 0.25
        hema[cyto] = 0.10
        eosin[cyto] = 0.50
        hema[lumen] = 0.02
        eosin[lumen] = 0.04

    conc = np.stack([np.clip(hema, 0, None), np.clip(eosin, 0, None),
                     np.abs(rng.normal(0, 0.01, labels.shape))], axis=-1)
    od = conc @ RUIFROK_HE.matrix
    rgb = 256.0 * np.power(10.0, -od) - 1.0 + rng.normal(0, params.noise, od.shape)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(seed, n_benign, n_malignant, params=SynthParams(), sizes=None):
    """Synthetic H&E-like images with exact instance and separator labels.

    Benign glands are near-elliptic with a thin nuclear rim and a clear lumen;
    malignant ones are deformed, with a thick irregular rim, debris-filled
    lumen, denser stroma, and touch their neighbours more often.  Image ``i``
    uses its own generator seeded from ``(seed, i)``, so output is identical
    for a given seed regardless of how many images are requested.

    Parameters
    ----------
    seed : int
    n_benign, n_malignant : int
        Benign images come first in the returned list.
    params : SynthParams
    sizes : sequence of (height, width), optional
        Fixed image sizes; otherwise drawn from ``params.size_range``.
    """
    samples = []
    for i in range(n_benign + n_malignant):
        malignant = i >= n_benign
        rng = np.random.default_rng([seed, i])
        if sizes is not None:
            shape = tuple(sizes[i])
        else:
            lo, hi = params.size_range
            shape = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        p = params
        if malignant:
            p = SynthParams(**{**p.__dict__, "touch_probability": min(1.0, p.touch_probability + 0.2)})
        labels = _place_glands(rng, shape, malignant, p)
        rgb = _render(rng, labels, malignant, p)
        samples.append(SyntheticSample(rgb, labels, separator_ground_truth(labels, p.separator_gap),
                                       malignant))
    return samples


# --- manifests ------------------------------------------------------------

class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    image: Path
    labels: Path
    separator: Path = None
    malignant: bool = False
    line: int = 0
    source: Path = None  # manifest the record came from

    @property
    def name(self):
        return self.image.stem

    @property
    def where(self):
        return f"{self.source}:{self.line}" if self.source is not None else f"record {self.image}"


def read_manifest(path):
    """Parse a manifest; one ``image  labels  separator|-  benign|malignant`` per line.

    Fields are tab- or space-separated, ``#`` starts a comment, relative
    paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        img, lab, sep, flag = fields
        if flag not in ("benign", "malignant"):
            raise ManifestError(f"{path}:{lineno}: malignancy flag must be benign or malignant, got {flag!r}")
        records.append(ManifestRecord(base / img, base / lab, None if sep == "-" else base / sep,
                                      flag == "malignant", lineno, path))
    return records


def write_manifest(path, records):
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = ["# image\tlabels\tseparator\tclass"]
    for r in records:
        sep = rel(r.separator) if r.separator is not None else "-"
        lines.append("\t".join([rel(r.image), rel(r.labels), sep,
                                "malignant" if r.malignant else "benign"]))
    path.write_text("\n".join(lines) + "\n")


def write_dataset(samples, out_dir, prefix="img"):
    """Save synthetic samples as PNGs plus a ``manifest.txt``; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = f"{prefix}{i:03d}"
        img, lab, sep = (out_dir / f"{stem}.png", out_dir / f"{stem}_labels.png",
                         out_dir / f"{stem}_sep.png")
        if s.labels.max() > 255:
            raise ValueError(f"{stem}: more than 255 instances do not fit an 8-bit label PNG")
        save_image(s.rgb, img)
        save_image(s.labels.astype(np.uint8), lab)
        save_image(s.separator.astype(np.uint8) * 255, sep)
        records.append(ManifestRecord(img, lab, sep, s.malignant))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, records)
    return manifest


def load_record(record, need_separator=False):
    """Read one manifest record: (rgb, normalized labels, separator mask or None)."""
    rgb = load_image(record.image)
    labels = normalize_labels(load_image(record.labels))
    if labels.shape != rgb.shape[:2]:
        raise ManifestError(f"{record.where}: label image {record.labels} has shape "
                            f"{labels.shape}, image has {rgb.shape[:2]}")
    sep = None
    if record.separator is not None:
        sep = load_image(record.separator) > 0
    elif need_separator:
        raise ManifestError(f"{record.where}: image {record.image.name} has no separator labels")
    return rgb, labels, sep
