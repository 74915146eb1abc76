"""Fuse object and separator probability maps into the TV data-term weights."""
from dataclasses import dataclass

import numpy as np

__all__ = ["FusionParams", "fuse_foreground", "fuse_background", "logit", "weight_map", "fuse_maps"]


@dataclass(frozen=True)
class FusionParams:
    rho: float = 1.0
    tau: float = 0.65
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")


def _same_shape(*maps):
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError(f"map shapes differ: {[a.shape for a in arrs]}")
    return arrs


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _sum_with_complement(x, y, sep, rho, sign):
    """``x + y + sign * rho * sep`` and ``1 -`` that sum, both correctly
    rounded to within a few ulps.

    Carrying the sum as an unevaluated pair (hi + lo) keeps the complement
    accurate when the sum is close to 1, where the logit is most sensitive.
    """
    s, e1 = _two_sum(x, y)
    p, e2 = _two_prod(np.broadcast_to(np.float64(rho), np.shape(sep)), sep)
    hi, e3 = _two_sum(s, sign * p)
    lo = e1 + e3 + sign * e2
    total, lo = _two_sum(hi, lo)
    # 1 - total is exact for total in [0.5, 2]; elsewhere the complement is >= 0.5
    return total, (1.0 - total) - lo


def fuse_foreground(c1, c3, sep, rho, complement=False):
    """``max(C1 + C3 - rho * S, 0)``: gland evidence minus separator evidence.

    With ``complement=True`` also returns ``1 - p_fg`` evaluated without
    cancellation.
    """
    c1, c3, sep = _same_shape(c1, c3, sep)
    p, q = _sum_with_complement(c1, c3, sep, rho, -1.0)
    neg = p <= 0
    p, q = np.where(neg, 0.0, p), np.where(neg, 1.0, q)
    return (p, q) if complement else p


def fuse_background(c0, c2, sep, rho, complement=False):
    """``min(C0 + C2 + rho * S, 1)``; ``complement`` as in :func:`fuse_foreground`."""
    c0, c2, sep = _same_shape(c0, c2, sep)
    p, q = _sum_with_complement(c0, c2, sep, rho, 1.0)
    full = p >= 1
    p, q = np.where(full, 1.0, p), np.where(full, 0.0, q)
    return (p, q) if complement else p


def logit(p, epsilon=1e-6, complement=None):
    """Natural-log logit of ``p`` clamped to ``[epsilon, 1 - epsilon]``.

    ``complement`` may supply an accurately computed ``1 - p``.
    """
    p = np.asarray(p, dtype=np.float64)
    # clamp the complement separately: 1 - p is exact for p >= 0.5, whereas
    # 1 - (1 - eps) would lose ~1e-10 to cancellation
    q = 1.0 - p if complement is None else np.asarray(complement, dtype=np.float64)
    q = np.clip(q, epsilon, 1.0 - epsilon)
    p = np.clip(p, epsilon, 1.0 - epsilon)
    return np.log(p) - np.log(q)


def weight_map(p_fg, p_bg, params=FusionParams(), q_fg=None, q_bg=None):
    """Per-pixel data weights: negative favours foreground, positive background.

    The winning map (foreground on strict ``p_fg > p_bg``, background
    otherwise) supplies the confidence; pixels whose winning confidence is
    below ``tau`` get weight 0 so only the weighted TV term acts there.
    ``q_fg`` and ``q_bg`` optionally give accurate complements ``1 - p``.
    """
    p_fg, p_bg = _same_shape(p_fg, p_bg)
    fg_wins = p_fg > p_bg
    confidence = np.where(fg_wins, p_fg, p_bg)
    w = np.where(fg_wins, -logit(p_fg, params.epsilon, q_fg), logit(p_bg, params.epsilon, q_bg))
    w[confidence < params.tau] = 0.0
    return w


def fuse_maps(object_maps, separator_map, params=FusionParams()):
    """Object-net (H, W, 4) and separator probability (H, W) -> (p_fg, p_bg, w)."""
    om = np.asarray(object_maps, dtype=np.float64)
    if om.ndim != 3 or om.shape[2] != 4:
        raise ValueError(f"object maps must be (H, W, 4), got {om.shape}")
    p_fg, q_fg = fuse_foreground(om[..., 1], om[..., 3], separator_map, params.rho, complement=True)
    p_bg, q_bg = fuse_background(om[..., 0], om[..., 2], separator_map, params.rho, complement=True)
    return p_fg, p_bg, weight_map(p_fg, p_bg, params, q_fg, q_bg)
