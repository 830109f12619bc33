"""Registration quality: surface distances, overlap, image similarity, paired tests."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from .errors import ContractError, DegenerateInputError
from .segment import Mask
from .volume import Volume

EXACT_MAX_N = 12


@dataclass(frozen=True)
class StructureDistanceResult:
    structure: str
    mdta: float
    hausdorff: float
    dice: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    n_pairs: int
    significant_at: float = 0.05
    exact: bool = True

    @property
    def significant(self) -> bool:
        return self.p_value < self.significant_at


@dataclass(frozen=True)
class ImageSimilarity:
    mse: float
    ncc: float


# ---------------------------------------------------------------------------
# surfaces and distances

def surface_points(mask: Mask) -> np.ndarray:
    """Centres of foreground voxels with a 6-connected background neighbour.

    Voxels on the volume border count as touching background.
    """
    if not mask.bits.any():
        raise DegenerateInputError(f"mask '{mask.label}' is empty")
    inner = ndimage.binary_erosion(mask.bits, structure=ndimage.generate_binary_structure(3, 1),
                                   border_value=0)
    idx = np.argwhere(mask.bits & ~inner)
    return mask.geometry.index_to_physical(idx)


def _points(a):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if not len(a):
        raise ContractError("point set is empty")
    return a


def _directed(a, b):
    d, _ = cKDTree(b).query(a)
    return d


def mdta(a, b) -> float:
    """Symmetric mean distance-to-agreement between two point sets (mm)."""
    a, b = _points(a), _points(b)
    return 0.5 * (float(_directed(a, b).mean()) + float(_directed(b, a).mean()))


def hausdorff(a, b) -> float:
    a, b = _points(a), _points(b)
    return max(float(_directed(a, b).max()), float(_directed(b, a).max()))


def dice(a: Mask, b: Mask) -> float:
    if a.geometry != b.geometry:
        raise ContractError("dice needs masks on the same grid")
    na, nb = int(a.bits.sum()), int(b.bits.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a.bits & b.bits).sum()) / (na + nb)


def structure_metrics(propagated: Mask, reference: Mask, label: str | None = None) -> StructureDistanceResult:
    pa, pb = surface_points(propagated), surface_points(reference)
    return StructureDistanceResult(label or reference.label, mdta(pa, pb), hausdorff(pa, pb),
                                   dice(propagated, reference))


def image_similarity(a: Volume, b: Volume) -> ImageSimilarity:
    if a.geometry != b.geometry:
        raise ContractError("image_similarity needs volumes on the same grid")
    x = a.values.astype(np.float64).ravel()
    y = b.values.astype(np.float64).ravel()
    mse = float(np.mean((x - y) ** 2))
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    ncc = float((xc * yc).sum() / denom) if denom > 0 else float("nan")
    return ImageSimilarity(mse, ncc)


# ---------------------------------------------------------------------------
# statistics

def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    r2 = np.rint(2 * ranks).astype(np.int64)     # mid-ranks are half-integers
    signs = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    t = signs @ r2
    w2 = int(round(2 * w_plus))
    lower = np.count_nonzero(t <= w2) / t.size
    upper = np.count_nonzero(t >= w2) / t.size
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(x, y, significant_at: float = 0.05) -> PairedTestResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped.  Exact null distribution by enumeration for
    up to 12 pairs, otherwise the normal approximation with tie and
    continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError("paired samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateInputError("all paired differences are zero")
    if n < 5:
        raise DegenerateInputError(f"need at least 5 non-zero differences, got {n}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = _exact_p(ranks, w_plus)
        return PairedTestResult(statistic, p, n, significant_at, exact=True)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, 2.0 * float(stats.norm.sf(z)))
    return PairedTestResult(statistic, p, n, significant_at, exact=False)


def bonferroni_threshold(alpha: float = 0.05, m: int = 1) -> float:
    if not 0 < alpha < 1:
        raise ContractError("alpha must lie in (0, 1)")
    if m < 1:
        raise ContractError("need at least one test")
    return alpha / m
