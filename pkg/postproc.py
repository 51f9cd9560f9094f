"""
Post-processing: pixel interpolation, three-class Otsu segmentation and
class-wise SSIM scoring of segmentations
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from matplotlib.tri import Triangulation
from scipy.spatial import cKDTree
from skimage.filters import threshold_multiotsu, threshold_otsu
from skimage.metrics import structural_similarity

from cem_forward import Conductivity
from errors import ParseError, ValidationError
from mesh import Mesh

logger = logging.getLogger(__name__)

BACKGROUND, RESISTIVE, CONDUCTIVE = 0, 1, 2
HISTOGRAM_BINS = 256
THRESHOLD_GAIN_RATIO = 0.01
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 7


@dataclass
class PixelImage:
    """Row-major raster; row 0 is the top edge (largest y)"""
    values: np.ndarray
    extent: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    mask: Optional[np.ndarray] = None
    fallback_pixels: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValidationError(f"image must be 2-D, got shape {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def grid(cls, width: int, height: int, extent=(-1.0, 1.0, -1.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates (X, Y), each (height, width)."""
        xmin, xmax, ymin, ymax = extent
        x = xmin + (np.arange(width) + 0.5) * (xmax - xmin) / width
        y = ymax - (np.arange(height) + 0.5) * (ymax - ymin) / height
        return np.meshgrid(x, y)


@dataclass
class SegmentationScore:
    ssim_conductive: float
    ssim_resistive: float
    variant: str = 'global'

    @property
    def combined(self) -> float:
        return 0.5 * (self.ssim_conductive + self.ssim_resistive)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['combined'] = self.combined
        return out


# ==================== INTERPOLATION ====================

def interpolate_to_grid(mesh: Mesh, cond: Conductivity, width: int, height: int,
                        radius: Optional[float] = None) -> PixelImage:
    """Piecewise-linear sigma on a pixel grid covering the disk's bounding box."""
    if width < 1 or height < 1:
        raise ValidationError("grid must have at least one pixel")
    sigma = cond.nodal(mesh)
    if radius is None:
        radius = float(np.linalg.norm(mesh.points[mesh.is_boundary], axis=1).max())
    extent = (-radius, radius, -radius, radius)
    X, Y = PixelImage.grid(width, height, extent)
    inside = X ** 2 + Y ** 2 <= radius ** 2
    values = np.full(X.shape, float(cond.sigma0))

    px, py = X[inside], Y[inside]
    triangulation = Triangulation(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles)
    owner = triangulation.get_trifinder()(px, py)
    missing = owner < 0
    fallback = int(missing.sum())
    if fallback:
        # pixels between the inscribed polygon and the circle
        centroids = mesh.points[mesh.triangles].mean(axis=1)
        _, owner[missing] = cKDTree(centroids).query(np.column_stack([px[missing], py[missing]]))
        logger.warning(f"[Postproc] {fallback} pixels used the nearest-triangle fallback")

    weights = _barycentric(mesh, owner, px, py)
    weights[missing] = np.clip(weights[missing], 0.0, None)
    weights[missing] /= weights[missing].sum(axis=1, keepdims=True)
    values[inside] = np.einsum('pk,pk->p', weights, sigma[mesh.triangles[owner]])
    return PixelImage(values=values, extent=extent, mask=inside, fallback_pixels=fallback)


def _barycentric(mesh: Mesh, owner: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    corners = mesh.points[mesh.triangles[owner]]          # (p, 3, 2)
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    l1 = ((px - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (py - a[:, 1])) / det
    l2 = ((b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (px - a[:, 0]) * (b[:, 1] - a[:, 1])) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


# ==================== SEGMENTATION ====================

def _between_class_variance(values: np.ndarray, thresholds: List[float]) -> float:
    groups = np.digitize(values, thresholds, right=True)
    mean = values.mean()
    total = 0.0
    for g in np.unique(groups):
        members = values[groups == g]
        total += members.size * (members.mean() - mean) ** 2
    return total / values.size


def _snap_to_gap(unique: np.ndarray, centre: float) -> float:
    """Midpoint of the data gap at the upper edge of the histogram bin centred on `centre`.

    skimage reports bin centres while the whole bin belongs to the lower class.
    """
    edge = centre + 0.5 * (unique[-1] - unique[0]) / HISTOGRAM_BINS
    below, above = unique[unique < edge], unique[unique >= edge]
    if below.size == 0 or above.size == 0:
        return centre
    return 0.5 * (below[-1] + above[0])


def otsu_thresholds(values: np.ndarray) -> List[float]:
    """Up to two thresholds; one is dropped when it adds < 1% of the total variance."""
    values = np.asarray(values, dtype=float).ravel()
    unique = np.unique(values)
    if unique.size < 2:
        return []
    if unique.size == 2:
        centres = [threshold_otsu(values, nbins=HISTOGRAM_BINS)]
    else:
        centres = threshold_multiotsu(values, classes=3, nbins=HISTOGRAM_BINS)
    thresholds = [_snap_to_gap(unique, float(c)) for c in centres]

    total = values.var()
    while thresholds:
        full = _between_class_variance(values, thresholds)
        gains = [full - _between_class_variance(values, thresholds[:i] + thresholds[i + 1:])
                 for i in range(len(thresholds))]
        weakest = int(np.argmin(gains))
        if gains[weakest] >= THRESHOLD_GAIN_RATIO * total:
            break
        thresholds.pop(weakest)
    return thresholds


def segment(image: PixelImage, sigma0: float) -> PixelImage:
    """Label map: 2 conductive, 1 resistive, 0 background (group closest to sigma0)."""
    values = np.asarray(image.values, dtype=float)
    labels = np.zeros(values.shape, dtype=np.uint8)
    inside = values[image.mask]
    thresholds = otsu_thresholds(inside) if inside.size else []
    if thresholds:
        groups = np.digitize(values, thresholds, right=True)
        means = np.array([inside[groups[image.mask] == g].mean() if (groups[image.mask] == g).any() else np.inf
                          for g in range(len(thresholds) + 1)])
        background = int(np.argmin(np.abs(means - sigma0)))
        labels[(groups > background) & image.mask] = CONDUCTIVE
        labels[(groups < background) & image.mask] = RESISTIVE
    logger.debug(f"[Postproc] thresholds={thresholds} "
                 f"conductive={int((labels == CONDUCTIVE).sum())} resistive={int((labels == RESISTIVE).sum())}")
    return PixelImage(values=labels, extent=image.extent, mask=image.mask)


# ==================== SCORING ====================

def global_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM from whole-image statistics, data range 1."""
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b, cov = np.mean(da * da), np.mean(db * db), np.mean(da * db)
    return float((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                 / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)))


def score(result: PixelImage, truth: PixelImage, variant: str = 'global') -> SegmentationScore:
    """Mean of the conductive and resistive class SSIMs."""
    if result.values.shape != truth.values.shape:
        raise ValidationError(f"label maps differ in size: {result.values.shape} vs {truth.values.shape}")
    if variant == 'windowed' and min(result.values.shape) < SSIM_WINDOW:
        raise ValidationError(f"windowed SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, "
                              f"got {result.width}x{result.height}")
    per_class = {}
    for label in (CONDUCTIVE, RESISTIVE):
        a = (result.values == label).astype(float)
        b = (truth.values == label).astype(float)
        if variant == 'global':
            per_class[label] = global_ssim(a, b)
        elif variant == 'windowed':
            per_class[label] = float(structural_similarity(a, b, win_size=SSIM_WINDOW, data_range=1.0))
        else:
            raise ValidationError(f"unknown SSIM variant {variant!r}")
    return SegmentationScore(ssim_conductive=per_class[CONDUCTIVE], ssim_resistive=per_class[RESISTIVE],
                             variant=variant)


def write_score_report(result: SegmentationScore, path: str, extra: Optional[Dict] = None):
    report = result.to_dict()
    report.update(extra or {})
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)


# ==================== FILES ====================

def write_pgm(image: PixelImage, path: str, maxval: int = 2):
    """Plain (P2) PGM; one image row per line."""
    values = np.asarray(image.values)
    lines = ['P2', f'{image.width} {image.height}', str(maxval)]
    lines += [' '.join(str(int(v)) for v in row) for row in values]
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path: str) -> PixelImage:
    """Label map from a P2 PGM; values must be 0, 1 or 2."""
    tokens = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, raw in enumerate(f, start=1):
            tokens += [(number, t) for t in raw.split('#', 1)[0].split()]
    if not tokens or tokens[0][1] != 'P2':
        raise ParseError("not a plain PGM (expected magic 'P2')", path, tokens[0][0] if tokens else None)
    if len(tokens) < 4:
        raise ParseError("truncated PGM header", path)
    try:
        width, height, maxval = (int(t) for _, t in tokens[1:4])
    except ValueError:
        raise ParseError("invalid PGM header", path, tokens[1][0])
    if width < 1 or height < 1 or maxval < 1:
        raise ParseError(f"invalid PGM size {width}x{height} (maxval {maxval})", path, tokens[1][0])

    body = tokens[4:]
    if len(body) != width * height:
        raise ParseError(f"expected {width * height} pixels, found {len(body)}", path,
                         body[-1][0] if body else None)
    values = np.empty(len(body), dtype=np.uint8)
    for k, (number, token) in enumerate(body):
        if token not in ('0', '1', '2'):
            raise ParseError(f"label must be 0, 1 or 2, got {token!r}", path, number)
        values[k] = int(token)
    return PixelImage(values=values.reshape(height, width))


def write_raster_csv(image: PixelImage, path: str):
    pd.DataFrame(image.values).to_csv(path, header=False, index=False, float_format='%.10g')
