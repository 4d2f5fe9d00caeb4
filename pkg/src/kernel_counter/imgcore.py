"""
Image side of the counter: color-threshold filtering, object counting and
feature extraction.

Images are handled as ``float64`` arrays of shape ``(H, W, 3)`` with every
channel in ``[0, 1]``; binary images are boolean ``(H, W)`` arrays where
``True`` marks a "black" pixel kept by the filter.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

N_BINS = 256
DEFAULT_CONNECTIVITY = 8

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


class ImageError(ValueError):
    """Raised for images that cannot be decoded or violate the [0, 1] range."""


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def validate_image(img) -> np.ndarray:
    """Return ``img`` as a float64 ``(H, W, 3)`` array, checking its range."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.size and (not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ImageError("channel values must lie in [0, 1]")
    return arr


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Scale a decoded raster to ``[0, 1]`` RGB.

    8-bit channels are divided by 255 and 16-bit channels by 65535; float
    rasters are assumed to be in range already. Grayscale is replicated to
    three channels and an alpha channel is dropped.
    """
    raw = np.asarray(raw)
    if raw.dtype == np.uint8:
        arr = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        arr = raw.astype(np.float64) / 65535.0
    elif np.issubdtype(raw.dtype, np.floating):
        arr = raw.astype(np.float64)
    else:
        raise ImageError(f"unsupported pixel type {raw.dtype}")

    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return validate_image(arr)


def load_image(path) -> np.ndarray:
    """Decode an 8/16-bit raster file into a ``[0, 1]`` RGB array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"cannot decode image: {path}")
    # OpenCV stores color channels as BGR(A)
    if raw.ndim == 3 and raw.shape[2] == 3:
        raw = raw[:, :, ::-1]
    elif raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[:, :, [2, 1, 0, 3]]
    return to_unit_range(raw)


def save_image(path, img, bits: int = 8) -> None:
    """Write a ``[0, 1]`` RGB array as an 8- or 16-bit lossless raster."""
    img = validate_image(img)
    if bits == 8:
        raw = np.rint(img * 255.0).astype(np.uint8)
    elif bits == 16:
        raw = np.rint(img * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if not cv2.imwrite(str(path), np.ascontiguousarray(raw[:, :, ::-1])):
        raise ImageError(f"cannot write image: {path}")


# ---------------------------------------------------------------------------
# Thresholds, filtering and counting
# ---------------------------------------------------------------------------


def as_threshold(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape != (3,):
        raise ValueError(f"a threshold vector has 3 components, got {t.shape[0]}")
    if not np.isfinite(t).all() or t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"threshold components must lie in [0, 1]: {t.tolist()}")
    return t


def as_threshold_set(thresholds) -> np.ndarray:
    """Validate a set of ``T`` threshold vectors, returned as a ``(T, 3)`` array.

    Raises
    ------
    ValueError
        If the set is empty, a component is out of range, or two vectors
        coincide.
    """
    arr = np.asarray(thresholds, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need at least one threshold vector")
    rows = np.stack([as_threshold(t) for t in arr])
    if len({tuple(t) for t in rows.tolist()}) != len(rows):
        raise ValueError("threshold vectors must be pairwise distinct")
    return rows


def filter_image(img, t) -> np.ndarray:
    """Binary filtering: a pixel is kept iff every channel is ``<=`` its threshold."""
    img = validate_image(img)
    t = as_threshold(t)
    return np.all(img <= t, axis=2)


def label_objects(mask, connectivity: int = DEFAULT_CONNECTIVITY, min_area: int = 1):
    """Label connected groups of ``True`` pixels.

    Returns
    -------
    labels : ndarray of int
        0 for background, ``1..n`` for objects.
    n : int
        Number of objects with at least ``min_area`` pixels.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if min_area > 1 and n:
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        keep = areas >= min_area
        keep[0] = False
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[keep] = np.arange(1, int(keep.sum()) + 1)
        labels = remap[labels]
        n = int(keep.sum())
    return labels, int(n)


def count_objects(mask, connectivity: int = DEFAULT_CONNECTIVITY, min_area: int = 1) -> int:
    return label_objects(mask, connectivity, min_area)[1]


def extract_features(img, thresholds, connectivity: int = DEFAULT_CONNECTIVITY,
                     min_area: int = 1) -> np.ndarray:
    """Object counts of ``img`` filtered by each threshold vector.

    Returns an int64 vector of length ``T``.
    """
    img = validate_image(img)
    tset = as_threshold_set(thresholds)
    return np.array(
        [count_objects(np.all(img <= t, axis=2), connectivity, min_area) for t in tset],
        dtype=np.int64,
    )


def write_features_csv(path, rows: Iterable[tuple[str, Sequence[int]]]) -> int:
    """Write ``image_id,r_1,...,r_T`` rows; returns the number of rows written."""
    rows = list(rows)
    width = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id"] + [f"r_{k + 1}" for k in range(width)])
        for image_id, counts in rows:
            writer.writerow([image_id] + [int(c) for c in counts])
    return len(rows)


# ---------------------------------------------------------------------------
# Histogram-based threshold adaptation and brightness augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColorHistogram:
    """Per-channel pixel counts over 256 uniform bins of ``[0, 1]``."""

    counts: np.ndarray  # (3, N_BINS) int64
    maxima: Optional[np.ndarray] = None  # exact per-channel maxima, if known

    @classmethod
    def from_image(cls, img) -> "ColorHistogram":
        img = validate_image(img)
        pix = img.reshape(-1, 3)
        idx = np.minimum((pix * N_BINS).astype(np.int64), N_BINS - 1)
        counts = np.stack([np.bincount(idx[:, c], minlength=N_BINS) for c in range(3)])
        maxima = pix.max(axis=0) if len(pix) else None
        return cls(counts.astype(np.int64), maxima)

    @classmethod
    def pooled(cls, hists: Iterable["ColorHistogram"]) -> "ColorHistogram":
        """Sum of histograms, i.e. every image weighted by its pixel count."""
        total = np.zeros((3, N_BINS), dtype=np.int64)
        maxima = np.zeros(3)
        for h in hists:
            total = total + h.counts
            maxima = None if (maxima is None or h.maxima is None) else np.maximum(maxima, h.maxima)
        return cls(total, maxima if total[0].sum() else None)

    @property
    def total(self) -> int:
        return int(self.counts[0].sum())

    def cdf_knots(self) -> np.ndarray:
        """CDF values at the 257 bin edges, one row per channel."""
        if self.total == 0:
            raise ValueError("empty histogram")
        cum = np.cumsum(self.counts, axis=1) / self.total
        return np.hstack([np.zeros((3, 1)), cum])

    def cdf(self, values) -> np.ndarray:
        """Fraction of pixels with channel ``k`` value ``<= values[k]``."""
        edges = np.linspace(0.0, 1.0, N_BINS + 1)
        knots = self.cdf_knots()
        return np.array([np.interp(values[c], edges, knots[c]) for c in range(3)])

    def quantile(self, probs) -> np.ndarray:
        """Inverse CDF with linear interpolation inside the bins.

        Results are capped at the channel maxima when those are known; no
        pixel lies between a maximum and the top of its bin, so the cap does
        not change any filtered image.
        """
        edges = np.linspace(0.0, 1.0, N_BINS + 1)
        knots = self.cdf_knots()
        out = np.empty(3)
        for c in range(3):
            p = float(np.clip(probs[c], 0.0, 1.0))
            i = int(np.searchsorted(knots[c], p, side="left"))
            if i == 0:
                out[c] = 0.0
                continue
            lo, hi = knots[c, i - 1], knots[c, i]
            out[c] = edges[i - 1] + (p - lo) / (hi - lo) * (edges[i] - edges[i - 1])
        if self.maxima is not None:
            out = np.minimum(out, self.maxima)
        return np.clip(out, 0.0, 1.0)


def adapt_thresholds(t, reference: ColorHistogram, target: ColorHistogram) -> np.ndarray:
    """Carry a threshold vector from the reference corpus over to a new image.

    Each component ``t_k`` is turned into the probability ``a_k`` that a
    reference pixel has channel ``k`` at most ``t_k``; the adapted threshold
    is the target image's quantile of order ``a_k``.
    """
    t = as_threshold(t)
    if reference.total == 0 or target.total == 0:
        raise ValueError("empty histogram")
    return target.quantile(reference.cdf(t))


def adapt_threshold_set(thresholds, reference: ColorHistogram,
                        target: ColorHistogram) -> np.ndarray:
    tset = as_threshold_set(thresholds)
    return np.stack([adapt_thresholds(t, reference, target) for t in tset])


def extract_features_adapted(img, thresholds, reference: ColorHistogram,
                             connectivity: int = DEFAULT_CONNECTIVITY,
                             min_area: int = 1) -> np.ndarray:
    """Feature vector of ``img`` using thresholds adapted to its own histogram.

    Adapted vectors may coincide (e.g. when several land in an empty region
    of the target histogram), so the distinctness check is not applied here.
    """
    img = validate_image(img)
    target = ColorHistogram.from_image(img)
    counts = []
    for t in as_threshold_set(thresholds):
        t_new = adapt_thresholds(t, reference, target)
        counts.append(count_objects(np.all(img <= t_new, axis=2), connectivity, min_area))
    return np.array(counts, dtype=np.int64)


def augment_brightness(img, delta: float) -> np.ndarray:
    """Shift every channel by ``delta`` and clamp to ``[0, 1]``."""
    if not np.isfinite(delta):
        raise ValueError("delta must be finite")
    img = validate_image(img)
    return np.clip(img + float(delta), 0.0, 1.0)
