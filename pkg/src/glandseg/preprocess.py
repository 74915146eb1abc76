"""H&E color deconvolution and CLAHE, producing the classifier input channel."""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StainMatrix",
    "ClaheParams",
    "RUIFROK_HE",
    "optical_density",
    "color_deconvolve",
    "reconstruct_rgb",
    "clahe",
    "clahe_tile_luts",
    "clipped_histogram",
    "stain_intensity",
    "preprocess_pipeline",
]


class StainMatrix:
    """Three unit-length stain absorption vectors (rows) in RGB optical density.

    A zero third row is replaced by the normalized cross product of the first
    two, the usual complement used for two-stain protocols.
    """

    def __init__(self, rows):
        m = np.array(rows, dtype=np.float64).reshape(3, 3)
        if np.allclose(m[2], 0.0):
            m[2] = np.cross(m[0], m[1])
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            raise ValueError("stain vectors must be non-zero")
        m = m / norms[:, None]
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"stain matrix is singular (condition number {cond:.3g})")
        self.matrix = m
        self._inverse = np.linalg.inv(m)

    @classmethod
    def from_values(cls, values):
        """Build from nine numbers, row by row."""
        values = [float(v) for v in values]
        if len(values) != 9:
            raise ValueError(f"stain matrix needs 9 values, got {len(values)}")
        return cls(values)

    def values(self):
        return [float(v) for v in self.matrix.ravel()]

    def __repr__(self):
        return f"StainMatrix({self.matrix.tolist()!r})"


# Hematoxylin / eosin vectors from Ruifrok & Johnston (2001); residual = complement.
RUIFROK_HE = StainMatrix([
    [0.644211, 0.716556, 0.266844],
    [0.092789, 0.954111, 0.283111],
    [0.0, 0.0, 0.0],
])


@dataclass(frozen=True)
class ClaheParams:
    tile_grid: tuple = (8, 8)
    clip_limit: float = 0.01
    bins: int = 256

    def __post_init__(self):
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1:
            raise ValueError(f"tile grid must be at least 1x1, got {self.tile_grid}")
        if not 0 < self.clip_limit <= 1:
            raise ValueError(f"clip_limit must lie in (0, 1], got {self.clip_limit}")
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")


def optical_density(rgb):
    """Per-channel OD = -log10((v + 1) / 256) of 8-bit intensities."""
    return -np.log10((np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0)


def color_deconvolve(rgb, stains=RUIFROK_HE):
    """Stain concentrations ``c`` solving ``OD = M^T c`` at every pixel.

    Parameters
    ----------
    rgb : array (H, W, 3)
        Intensities in [0, 255].
    stains : StainMatrix

    Returns
    -------
    array (H, W, 3)
        Concentration per stain, in stain-matrix row order.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    od = optical_density(rgb)
    # OD_row = c_row @ M  =>  c_row = OD_row @ M^-1
    return od @ stains._inverse


def reconstruct_rgb(conc, stains=RUIFROK_HE):
    """Inverse of :func:`color_deconvolve` without quantization (float RGB)."""
    od = np.asarray(conc, dtype=np.float64) @ stains.matrix
    return 256.0 * np.power(10.0, -od) - 1.0


def stain_intensity(conc):
    """Transmitted-light rendering ``10**-c`` of one concentration channel.

    Negative concentrations (numerical undershoot) are treated as zero, so the
    result lies in (0, 1] with 1 meaning stain-free.
    """
    return np.power(10.0, -np.maximum(np.asarray(conc, dtype=np.float64), 0.0))


def _tile_edges(n, parts):
    return np.linspace(0, n, parts + 1).round().astype(int)


def _bin_index(gray, bins, value_range):
    lo, hi = value_range
    idx = np.floor((np.asarray(gray, dtype=np.float64) - lo) / (hi - lo) * bins)
    return np.clip(idx, 0, bins - 1).astype(np.intp)


def clipped_histogram(hist, clip_limit):
    """Clip a histogram at ``clip_limit * total`` and spread the excess uniformly.

    Returns ``(clipped, redistributed)``: the histogram right after clipping
    and the final one with the excess added back evenly over all bins.
    """
    hist = np.asarray(hist, dtype=np.float64)
    ceiling = clip_limit * hist.sum()
    clipped = np.minimum(hist, ceiling)
    excess = hist.sum() - clipped.sum()
    return clipped, clipped + excess / len(hist)


def clahe_tile_luts(bin_idx, params):
    """Per-tile transfer functions, shape (rows, cols, bins), values in [0, 1]."""
    rows, cols = params.tile_grid
    h, w = bin_idx.shape
    ye, xe = _tile_edges(h, rows), _tile_edges(w, cols)
    luts = np.empty((rows, cols, params.bins))
    for r in range(rows):
        for c in range(cols):
            tile = bin_idx[ye[r]:ye[r + 1], xe[c]:xe[c + 1]]
            hist = np.bincount(tile.ravel(), minlength=params.bins)
            _, hist = clipped_histogram(hist, params.clip_limit)
            cdf = np.cumsum(hist)
            luts[r, c] = cdf / cdf[-1]
    return luts


def _blend_coords(n, parts):
    """Lower tile index and blend weight per pixel along one axis."""
    edges = _tile_edges(n, parts)
    centers = 0.5 * (edges[:-1] + edges[1:]) - 0.5
    pos = np.arange(n, dtype=np.float64)
    i0 = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, parts - 1)
    i1 = np.minimum(i0 + 1, parts - 1)
    span = centers[i1] - centers[i0]
    t = np.where(span > 0, (pos - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, np.clip(t, 0.0, 1.0)


def clahe(gray, params=ClaheParams(), value_range=(0.0, 1.0)):
    """Contrast limited adaptive histogram equalization.

    Each tile of the grid gets a clipped-histogram equalization mapping; pixel
    values are blended bilinearly between the mappings of the four nearest
    tile centers (clamped at the image border).  The output spans the same
    nominal ``value_range`` as the input.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"CLAHE expects a single-channel image, got shape {gray.shape}")
    rows, cols = params.tile_grid
    h, w = gray.shape
    if h < rows or w < cols:
        raise ValueError(f"image {w}x{h} smaller than the {rows}x{cols} tile grid")
    lo, hi = value_range
    b = _bin_index(gray, params.bins, value_range)
    luts = clahe_tile_luts(b, params)

    r0, r1, ty = _blend_coords(h, rows)
    c0, c1, tx = _blend_coords(w, cols)
    R0, R1, TY = r0[:, None], r1[:, None], ty[:, None]
    C0, C1, TX = c0[None, :], c1[None, :], tx[None, :]
    top = (1 - TX) * luts[R0, C0, b] + TX * luts[R0, C1, b]
    bottom = (1 - TX) * luts[R1, C0, b] + TX * luts[R1, C1, b]
    mapped = (1 - TY) * top + TY * bottom
    return lo + (hi - lo) * mapped


def preprocess_pipeline(rgb, stains=RUIFROK_HE, params=ClaheParams()):
    """RGB -> first stain channel (as transmitted intensity) -> CLAHE, in [0, 1]."""
    conc = color_deconvolve(rgb, stains)
    return clahe(stain_intensity(conc[:, :, 0]), params, value_range=(0.0, 1.0))
