"""Image analysis: QC metrics, breast segmentation, density estimation,
microcalcification detection, and intensity standardization.

All routines are pure functions over an Image value and run in double
precision. Formulas are standard textbook definitions: population standard
deviation for contrast, Otsu thresholding (ties to the smallest bin),
white top-hat with a mean + k*sigma gate for spot candidates. Connectivity
is 4 for tissue segmentation and 8 for spots; borders replicate edge pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from . import dataset as dsmod

STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
STRUCT_8 = np.ones((3, 3), dtype=bool)

DEFAULT_MC_PARAMS = {"r": 4, "k": 4.0, "area_min": 2, "area_max": 100}


class AnalysisError(Exception):
    pass


class BadImage(AnalysisError):
    pass


class NoContrast(AnalysisError):
    pass


class EmptyForeground(AnalysisError):
    pass


class ZeroVariance(AnalysisError):
    pass


@dataclass
class Image:
    rows: int
    cols: int
    bits: int
    pixels: np.ndarray  # shape (rows, cols), unsigned samples

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise BadImage(f"bits must be 8 or 16, got {self.bits}")
        if self.rows < 8 or self.cols < 8:
            raise BadImage("image must be at least 8x8")
        self.pixels = np.asarray(self.pixels).reshape(self.rows, self.cols)
        if self.pixels.min() < 0 or self.pixels.max() > self.maxval:
            raise BadImage("sample out of range for bit depth")

    @property
    def maxval(self) -> int:
        return (1 << self.bits) - 1


def image_from_dataset(ds: dsmod.Dataset) -> Image:
    rows = ds.require(dsmod.ROWS).as_int()
    cols = ds.require(dsmod.COLUMNS).as_int()
    bits = ds.require(dsmod.BITS_ALLOCATED).as_int()
    raw = ds.require(dsmod.PIXEL_DATA).value
    dtype = np.uint8 if bits == 8 else np.dtype("<u2")
    pixels = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    return Image(rows, cols, bits, pixels)


def pixels_to_bytes(pixels: np.ndarray, bits: int) -> bytes:
    dtype = np.uint8 if bits == 8 else np.dtype("<u2")
    return np.ascontiguousarray(pixels.astype(dtype)).tobytes()


@dataclass
class McDetection:
    centroids: list[tuple[float, float]]
    count: int
    params: dict = field(default_factory=lambda: dict(DEFAULT_MC_PARAMS))


@dataclass
class QcReport:
    mean_brightness: float
    rms_contrast: float
    breast_density: float
    microcalc_count: int
    no_contrast: bool = False


def mean_brightness(img: Image) -> float:
    return float(np.mean(img.pixels.astype(np.float64)))


def rms_contrast(img: Image) -> float:
    """Population standard deviation of all samples."""
    return float(np.std(img.pixels.astype(np.float64)))


def histogram_bins(img: Image) -> np.ndarray:
    """Samples mapped to 256 bins; 16-bit samples are shifted down 8 bits."""
    if img.bits == 8:
        return img.pixels.astype(np.int64)
    return img.pixels.astype(np.int64) >> 8


def histogram(values: np.ndarray) -> np.ndarray:
    return np.bincount(values.ravel(), minlength=256)[:256]


def otsu(hist: np.ndarray) -> int:
    """Threshold k in [0, 254] maximizing between-class variance with
    class 0 = bins <= k. Ties break to the smallest k."""
    hist = np.asarray(hist, dtype=np.float64)
    if (hist > 0).sum() < 2:
        raise NoContrast("histogram has fewer than 2 non-empty bins")
    total = hist.sum()
    bins = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)[:255]
    w1 = total - w0
    sum0 = np.cumsum(hist * bins)[:255]
    mu_total = (hist * bins).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (mu_total - sum0) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between[np.isnan(var_between)] = -1.0
    return int(np.argmax(var_between))


@dataclass
class BreastMask:
    mask: np.ndarray  # bool, same shape as image

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def segment_breast(img: Image) -> BreastMask:
    """Otsu over the whole image, then keep the largest 4-connected
    foreground component (ties: the one containing the smallest flat pixel
    index). No hole filling."""
    bins = histogram_bins(img)
    k = otsu(histogram(bins))
    fg = bins > k
    if not fg.any():
        raise EmptyForeground("no pixels above the global threshold")
    labels, n = ndi.label(fg, structure=STRUCT_4)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    best = counts.max()
    candidates = np.flatnonzero(counts == best)
    if len(candidates) > 1:
        flat = labels.ravel()
        first_index = {lab: np.argmax(flat == lab) for lab in candidates}
        chosen = min(candidates, key=lambda lab: first_index[lab])
    else:
        chosen = candidates[0]
    return BreastMask(labels == chosen)


def breast_density(img: Image, mask: BreastMask) -> float:
    """Second Otsu over the masked histogram; density = fraction of mask
    pixels above that threshold. Single-bin mask histograms give 0.0."""
    bins = histogram_bins(img)
    hist = histogram(bins[mask.mask])
    if (hist > 0).sum() < 2:
        return 0.0
    k2 = otsu(hist)
    inside = bins[mask.mask]
    return float((inside > k2).sum() / inside.size)


def detect_microcalcs(img: Image, mask: BreastMask, params: dict | None = None) -> McDetection:
    """White top-hat spot detector.

    residual = img - opening(img) with a square structuring element of side
    2r+1 (edge-replicated borders); candidates are residual > mean + k*sigma
    (statistics over the mask), 8-connected, with component area inside
    [area_min, area_max]. Centroids are unweighted pixel-coordinate means,
    sorted by (row, col).
    """
    p = dict(DEFAULT_MC_PARAMS, **(params or {}))
    side = 2 * p["r"] + 1
    pix = img.pixels.astype(np.float64)
    opened = ndi.grey_dilation(
        ndi.grey_erosion(pix, size=(side, side), mode="nearest"),
        size=(side, side), mode="nearest")
    residual = pix - opened
    inside = residual[mask.mask]
    t = inside.mean() + p["k"] * inside.std()
    cand = (residual > t) & mask.mask
    labels, n = ndi.label(cand, structure=STRUCT_8)
    centroids = []
    if n:
        areas = np.bincount(labels.ravel())
        for lab in range(1, n + 1):
            if p["area_min"] <= areas[lab] <= p["area_max"]:
                rr, cc = np.nonzero(labels == lab)
                centroids.append((float(rr.mean()), float(cc.mean())))
    centroids.sort()
    return McDetection(centroids, len(centroids), p)


def standardize(img: Image, mask: BreastMask) -> Image:
    """Linear intensity map a*x + b putting the mask at mean 0.5*maxval and
    std 0.125*maxval, applied everywhere, clamped and rounded half-up."""
    inside = img.pixels[mask.mask].astype(np.float64)
    std = inside.std()
    if std == 0.0:
        raise ZeroVariance("mask has zero intensity variance")
    a = 0.125 * img.maxval / std
    b = 0.5 * img.maxval - a * inside.mean()
    mapped = a * img.pixels.astype(np.float64) + b
    out = np.floor(np.clip(mapped, 0, img.maxval) + 0.5).astype(np.int64)
    out = np.minimum(out, img.maxval)
    return Image(img.rows, img.cols, img.bits, out)


def qc_report(img: Image, params: dict | None = None) -> QcReport:
    """QC metric bundle with default parameters. Images with no usable
    contrast report density 0 and count 0 with a warning flag."""
    mean = mean_brightness(img)
    contrast = rms_contrast(img)
    try:
        mask = segment_breast(img)
    except (NoContrast, EmptyForeground):
        return QcReport(mean, contrast, 0.0, 0, no_contrast=True)
    density = breast_density(img, mask)
    det = detect_microcalcs(img, mask, params)
    return QcReport(mean, contrast, density, det.count)
