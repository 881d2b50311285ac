"""Synthetic mammogram phantoms with machine-readable ground truth.

A phantom is a tissue region (half-disc against the left edge, or a
rectangle) on a darker background, an optional brighter dense sub-region
(always rectangular, so morphological opening preserves it exactly), optional
Gaussian bright spots standing in for microcalcifications, and Gaussian
pixel noise. The generator records exact ground truth: the tissue pixel
set, the actual dense fraction, and every spot centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dataset as dsmod
from .analysis import pixels_to_bytes

SPOT_SIGMA = 1.5
SPOT_MIN_SEPARATION = 12  # 3 * default detector radius


class BadSpec(Exception):
    pass


@dataclass
class PhantomSpec:
    rows: int = 128
    cols: int = 128
    bits: int = 8
    seed: int = 0
    shape: str = "half_disc"        # half_disc | rect
    background: int = 30
    breast_value: int = 110
    dense_value: int = 190
    dense_fraction: float = 0.0
    spot_count: int = 0
    spot_amplitude: float = 16.0    # 8x the default noise sigma
    noise_sigma: float = 2.0
    edge_ramp: int = 0              # px of linear falloff at a half-disc rim
    index: int = 0                  # image number within the study
    patient_id: str | None = None
    sex: str = "F"
    age: int = 57

    def check(self):
        if self.rows < 32 or self.cols < 32:
            raise BadSpec("phantom must be at least 32x32")
        if self.bits not in (8, 16):
            raise BadSpec("bits must be 8 or 16")
        if self.shape not in ("half_disc", "rect"):
            raise BadSpec(f"unknown shape {self.shape!r}")
        if not (0.0 <= self.dense_fraction <= 0.6):
            raise BadSpec("dense_fraction must be in [0, 0.6]")
        if not (0 <= self.background < self.breast_value < self.dense_value <= 255):
            raise BadSpec("need background < breast_value < dense_value <= 255")


@dataclass
class GroundTruth:
    breast_mask: np.ndarray
    dense_fraction: float
    spot_centroids: list[tuple[float, float]]
    mean_brightness: float
    rms_contrast: float
    patient_id: str
    study_uid: str
    sop_uid: str

    def to_doc(self) -> dict:
        return {
            "breast_area": int(self.breast_mask.sum()),
            "dense_fraction": self.dense_fraction,
            "spot_centroids": self.spot_centroids,
            "mean_brightness": self.mean_brightness,
            "rms_contrast": self.rms_contrast,
            "patient_id": self.patient_id,
            "study_uid": self.study_uid,
            "sop_uid": self.sop_uid,
        }


def _breast_geometry(spec: PhantomSpec):
    rr, cc = np.mgrid[0:spec.rows, 0:spec.cols]
    if spec.shape == "rect":
        r0, r1 = 6, spec.rows - 6
        c0, c1 = 6, int(spec.cols * 0.75)
        mask = (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
        dist = None
    else:
        radius = min(spec.rows // 2, spec.cols) - 6
        center = (spec.rows / 2.0, 0.0)
        dist = np.hypot(rr - center[0], cc - center[1])
        mask = dist <= radius
    return mask, dist


def _dense_rect(spec: PhantomSpec, mask: np.ndarray, rng) -> np.ndarray:
    """A rectangular dense region inside the tissue; rectangles at least the
    structuring-element size survive opening exactly."""
    target = spec.dense_fraction * mask.sum()
    side = max(10, int(round(math.sqrt(target))))
    rows_idx, cols_idx = np.nonzero(mask)
    # anchor the rectangle around the tissue centroid
    r0 = int(rows_idx.mean()) - side // 2
    c0 = int(cols_idx.mean()) - side // 2
    dense = np.zeros_like(mask)
    dense[r0:r0 + side, c0:c0 + side] = True
    dense &= mask
    if dense.sum() < target * 0.8:
        raise BadSpec("dense_fraction too large for this geometry")
    return dense


def _place_spots(spec: PhantomSpec, mask: np.ndarray, dense: np.ndarray,
                 rng) -> list[tuple[int, int]]:
    from scipy.ndimage import binary_erosion
    se = np.ones((2 * SPOT_MIN_SEPARATION + 1,) * 2, dtype=bool)
    interior = binary_erosion(mask, se)
    if dense.any():
        interior &= binary_erosion(~dense, se)  # keep spots clear of the dense region
    candidates = np.argwhere(interior)
    if spec.spot_count and len(candidates) == 0:
        raise BadSpec("no interior room for spots")
    spots: list[tuple[int, int]] = []
    attempts = 0
    while len(spots) < spec.spot_count:
        attempts += 1
        if attempts > 10_000:
            raise BadSpec("could not place spots with the required separation")
        r, c = candidates[rng.integers(len(candidates))]
        if all((r - sr) ** 2 + (c - sc) ** 2 >= SPOT_MIN_SEPARATION ** 2
               for sr, sc in spots):
            spots.append((int(r), int(c)))
    return spots


def generate_phantom(spec: PhantomSpec) -> tuple[bytes, GroundTruth]:
    """Deterministic from the seed: returns encoded MGD bytes (with original,
    not yet anonymized, patient identity) plus the ground truth."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    scale = 257 if spec.bits == 16 else 1
    maxval = (1 << spec.bits) - 1

    mask, dist = _breast_geometry(spec)
    img = np.full((spec.rows, spec.cols), float(spec.background))
    img[mask] = spec.breast_value
    if spec.edge_ramp > 0 and dist is not None:
        radius = min(spec.rows // 2, spec.cols) - 6
        ramp = np.clip((radius - dist) / spec.edge_ramp, 0.0, 1.0)
        img = spec.background + (spec.breast_value - spec.background) * ramp

    dense = np.zeros_like(mask)
    if spec.dense_fraction > 0:
        dense = _dense_rect(spec, mask, rng)
        img[dense] = spec.dense_value
    actual_fraction = float(dense.sum() / mask.sum()) if mask.any() else 0.0

    spots = _place_spots(spec, mask, dense, rng) if spec.spot_count else []
    if spots:
        rr, cc = np.mgrid[0:spec.rows, 0:spec.cols]
        for sr, sc in spots:
            d2 = (rr - sr) ** 2 + (cc - sc) ** 2
            img += spec.spot_amplitude * np.exp(-d2 / (2 * SPOT_SIGMA ** 2))

    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    pixels = np.clip(np.floor(img * scale + 0.5), 0, maxval).astype(np.int64)

    patient_id = spec.patient_id or f"PT-{spec.seed:08d}"
    study_uid = f"1.2.840.{spec.seed}"
    sop_uid = f"1.3.840.{spec.seed}.{spec.index}"
    ds = dsmod.from_values({
        dsmod.SOP_INSTANCE_UID: sop_uid,
        dsmod.STUDY_DATE: "20240115",
        dsmod.TAG_BY_NAME["Modality"]: "MG",
        dsmod.TAG_BY_NAME["InstitutionName"]: "phantom-lab",
        dsmod.PATIENT_NAME: "Phantom^Subject",
        dsmod.PATIENT_ID: patient_id,
        dsmod.PATIENT_BIRTH_DATE: "19670301",
        dsmod.PATIENT_SEX: spec.sex,
        dsmod.PATIENT_AGE: f"{spec.age:03d}Y",
        dsmod.STUDY_INSTANCE_UID: study_uid,
        dsmod.SERIES_INSTANCE_UID: f"1.4.840.{spec.seed}.{spec.index}",
        dsmod.ROWS: spec.rows,
        dsmod.COLUMNS: spec.cols,
        dsmod.BITS_ALLOCATED: spec.bits,
        dsmod.BITS_STORED: spec.bits,
        dsmod.PIXEL_DATA: pixels_to_bytes(pixels, spec.bits),
    })
    truth = GroundTruth(
        breast_mask=mask,
        dense_fraction=actual_fraction,
        spot_centroids=[(float(r), float(c)) for r, c in spots],
        mean_brightness=float(pixels.mean()),
        rms_contrast=float(pixels.std()),
        patient_id=patient_id,
        study_uid=study_uid,
        sop_uid=sop_uid,
    )
    return dsmod.encode(ds), truth
