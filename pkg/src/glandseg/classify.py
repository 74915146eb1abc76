"""Whole-image benign / malignant decision from four-class probability maps."""
from dataclasses import dataclass

import numpy as np

__all__ = ["MalignancyDecision", "classify_malignancy", "BENIGN", "MALIGNANT"]

BENIGN, MALIGNANT = 0, 1
CLASS_NAMES = ("benign", "malignant")


@dataclass(frozen=True)
class MalignancyDecision:
    label: int
    confidence: float
    p_benign: float
    p_malignant: float
    tie: bool = False

    @property
    def name(self):
        return CLASS_NAMES[self.label]

    def record(self):
        return f"{self.name}\t{self.confidence:.4f}" + ("\ttie" if self.tie else "")


def classify_malignancy(maps, atol=1e-5, tie_tol=1e-12):
    """Average benign (C0 + C1) and malignant (C2 + C3) mass over the image.

    The larger average wins; averages within ``tie_tol`` are a tie, which
    goes to benign and is flagged.  Raises
    ``ValueError`` unless ``maps`` has four channels of per-pixel
    distributions summing to 1 within ``atol``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[2] != 4:
        raise ValueError(f"expected (H, W, 4) class maps, got shape {maps.shape}")
    if not np.allclose(maps.sum(axis=2), 1.0, atol=atol):
        raise ValueError("class probabilities do not sum to 1 at every pixel")
    p_benign = float(np.mean(maps[..., 0] + maps[..., 1]))
    p_malignant = float(np.mean(maps[..., 2] + maps[..., 3]))
    tie = abs(p_malignant - p_benign) <= tie_tol
    if p_malignant > p_benign and not tie:
        return MalignancyDecision(MALIGNANT, p_malignant, p_benign, p_malignant)
    return MalignancyDecision(BENIGN, p_benign, p_benign, p_malignant, tie=tie)
