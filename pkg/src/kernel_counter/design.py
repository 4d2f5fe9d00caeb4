"""
Threshold design from annotated images.

A Monte Carlo search samples threshold vectors uniformly in the unit cube and
scores each by true and false positive objects against reference cell masks.
For every achieved number of true positives the sample with the fewest false
positives is kept (the conditional optimum). Thresholds are then chosen by
signal-to-noise ratio ``#TP / #FP``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .imgcore import DEFAULT_CONNECTIVITY, label_objects, validate_image


@dataclass(frozen=True)
class AnnotatedImage:
    """An image plus one boolean mask per true cell, shape ``(R, H, W)``."""

    image: np.ndarray
    reference_masks: np.ndarray

    def __post_init__(self):
        img = validate_image(self.image)
        masks = np.asarray(self.reference_masks, dtype=bool)
        if masks.ndim == 2:
            masks = masks[None]
        if masks.size == 0:
            masks = np.zeros((0,) + img.shape[:2], dtype=bool)
        if masks.shape[1:] != img.shape[:2]:
            raise ValueError("reference masks must match the image size")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "reference_masks", masks)

    @classmethod
    def from_label_image(cls, image, labels) -> "AnnotatedImage":
        """Build from an integer label image (0 = background, k = k-th cell)."""
        labels = np.asarray(labels)
        ids = [k for k in np.unique(labels) if k != 0]
        masks = np.stack([labels == k for k in ids]) if ids else np.zeros((0,) + labels.shape, bool)
        return cls(image, masks)

    @property
    def n_cells(self) -> int:
        return self.reference_masks.shape[0]


def match_objects(labels, n_objects: int, reference_masks) -> tuple[int, int]:
    """Greedy one-to-one matching of filtered objects to reference cells.

    Pairs are taken in order of decreasing overlap (ties: lower object index,
    then lower reference index); a pair needs at least one shared pixel and
    each object and reference is used once. Unmatched objects are false
    positives.

    Returns
    -------
    (tp, fp)
    """
    labels = np.asarray(labels)
    masks = np.asarray(reference_masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    if n_objects == 0:
        return 0, 0
    if masks.shape[0] == 0:
        return 0, n_objects
    overlap = np.stack(
        [np.bincount(labels[m], minlength=n_objects + 1)[1:] for m in masks], axis=1)
    obj, ref = np.nonzero(overlap)
    if obj.size == 0:
        return 0, n_objects
    order = np.lexsort((ref, obj, -overlap[obj, ref]))
    used_obj, used_ref = set(), set()
    for i in order:
        o, r = int(obj[i]), int(ref[i])
        if o in used_obj or r in used_ref:
            continue
        used_obj.add(o)
        used_ref.add(r)
    tp = len(used_obj)
    return tp, n_objects - tp


def evaluate_threshold(annotated: Sequence[AnnotatedImage], t,
                       connectivity: int = DEFAULT_CONNECTIVITY) -> tuple[int, int]:
    """TP and FP of one threshold vector, summed over the annotated images."""
    t = np.asarray(t, dtype=np.float64)
    tp = fp = 0
    for a in annotated:
        labels, n = label_objects(np.all(a.image <= t, axis=2), connectivity)
        dtp, dfp = match_objects(labels, n, a.reference_masks)
        tp += dtp
        fp += dfp
    return tp, fp


@dataclass(frozen=True)
class TableEntry:
    tp: int
    fp: int
    threshold: np.ndarray

    @property
    def snr(self) -> float:
        if self.tp == 0:
            return 0.0
        return math.inf if self.fp == 0 else self.tp / self.fp


@dataclass(frozen=True)
class ConditionalOptimaTable:
    entries: dict  # tp -> TableEntry

    def __len__(self) -> int:
        return len(self.entries)

    def min_fp(self) -> dict:
        return {tp: e.fp for tp, e in self.entries.items()}

    def sorted_entries(self) -> list[TableEntry]:
        return [self.entries[k] for k in sorted(self.entries)]

    def write_csv(self, path) -> None:
        """CSV ``tp,fp,snr,t1,t2,t3`` ordered by ``tp``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tp", "fp", "snr", "t1", "t2", "t3"])
            for e in self.sorted_entries():
                writer.writerow([e.tp, e.fp, repr(e.snr)] + [repr(float(x)) for x in e.threshold])


def _as_annotated_list(annotated) -> list[AnnotatedImage]:
    if isinstance(annotated, AnnotatedImage):
        return [annotated]
    return list(annotated)


def score_thresholds(annotated, thresholds, connectivity: int = DEFAULT_CONNECTIVITY,
                     max_cells: int = 1 << 24):
    """TP/FP for many threshold vectors.

    Samples producing identical binary images are scored once.
    """
    annotated = _as_annotated_list(annotated)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros(len(thresholds), dtype=np.int64)
    for a in annotated:
        pix = a.image.reshape(-1, 3)
        memo: dict[bytes, tuple[int, int]] = {}
        chunk = max(1, min(len(thresholds), max_cells // max(len(pix), 1)))
        for start in range(0, len(thresholds), chunk):
            block = thresholds[start:start + chunk]
            masks = np.all(pix[None, :, :] <= block[:, None, :], axis=2)
            packed = np.packbits(masks, axis=1)
            for i in range(len(block)):
                key = packed[i].tobytes()
                res = memo.get(key)
                if res is None:
                    labels, n = label_objects(masks[i].reshape(a.image.shape[:2]), connectivity)
                    res = match_objects(labels, n, a.reference_masks)
                    memo[key] = res
                tp[start + i] += res[0]
                fp[start + i] += res[1]
    return tp, fp


def conditional_optima(thresholds, tp, fp) -> ConditionalOptimaTable:
    """Per achieved ``tp``, the first threshold with the fewest false positives."""
    entries = {}
    for i in range(len(tp)):
        k = int(tp[i])
        best = entries.get(k)
        if best is None or fp[i] < best.fp:
            entries[k] = TableEntry(k, int(fp[i]), np.array(thresholds[i], dtype=np.float64))
    return ConditionalOptimaTable(entries)


def monte_carlo_search(annotated: Union[AnnotatedImage, Sequence[AnnotatedImage]],
                       m_runs: int, seed: int = 0,
                       connectivity: int = DEFAULT_CONNECTIVITY) -> ConditionalOptimaTable:
    """Monte Carlo search for the conditional optimal thresholds.

    With several images, TP and FP are summed across them for each sample.
    The first ``m`` samples do not depend on ``m_runs``, so a longer search
    with the same seed extends a shorter one.
    """
    if m_runs < 1:
        raise ValueError("m_runs must be >= 1")
    thresholds = np.random.default_rng(seed).random((m_runs, 3))
    tp, fp = score_thresholds(annotated, thresholds, connectivity)
    return conditional_optima(thresholds, tp, fp)


def grid_search(annotated, resolution: float = 0.05,
                connectivity: int = DEFAULT_CONNECTIVITY) -> ConditionalOptimaTable:
    """Exhaustive search over a regular threshold lattice."""
    steps = int(round(1.0 / resolution))
    axis = np.linspace(0.0, 1.0, steps + 1)
    lattice = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    tp, fp = score_thresholds(annotated, lattice, connectivity)
    return conditional_optima(lattice, tp, fp)


def select_thresholds(table: ConditionalOptimaTable, T: int) -> np.ndarray:
    """The ``T`` distinct conditional optima with the largest SNR.

    Entries without false positives rank first (largest ``tp`` first);
    remaining ties go to the larger ``tp``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if len(table) == 0:
        raise ValueError("empty table")
    ranked = sorted(table.entries.values(), key=lambda e: (-e.snr, -e.tp))
    chosen: list[np.ndarray] = []
    seen = set()
    for e in ranked:
        key = tuple(e.threshold.tolist())
        if key in seen:
            continue
        seen.add(key)
        chosen.append(e.threshold)
        if len(chosen) == T:
            break
    if len(chosen) < T:
        warnings.warn(f"only {len(chosen)} distinct thresholds available, {T} requested",
                      stacklevel=2)
    return np.stack(chosen)


def write_thresholds_csv(path, thresholds) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t1", "t2", "t3"])
        for t in np.atleast_2d(thresholds):
            writer.writerow([repr(float(x)) for x in t])
