"""
Dataset manifests, feature caching and model/result persistence.

Manifest format (one directive per line, ``#`` starts a comment, fields are
shell-quoted)::

    kc-manifest 1
    connectivity 8
    min-area 1
    threshold 0.20 0.20 0.20
    threshold 0.45 0.40 0.50
    entry images/a.png count:12
    entry images/b.png soft:1,1,0.5 beta=0.8
    entry images/c.png interval:8,12
    entry images/d.png experts:10|12|11
    entry images/e.png count:10 interval:9,12 expert=B

``thresholds-file PATH`` may replace or extend the ``threshold`` lines; the
file holds one ``t1,t2,t3`` row per vector. Relative paths are resolved
against the manifest's directory.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shlex
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imgcore import (
    DEFAULT_CONNECTIVITY,
    ColorHistogram,
    augment_brightness,
    as_threshold_set,
    extract_features,
    extract_features_adapted,
    load_image,
)
from .kc import (
    STANDARDIZATION_POLICIES,
    KernelModel,
    LabeledExample,
    Prediction,
    augment_with_interval_midpoints,
    soft_label,
)

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "kc-manifest"
MANIFEST_VERSION = 1
MODEL_FORMAT = "kernel-counter-model"
MODEL_VERSION = 1
CACHE_FORMAT = "kernel-counter-feature-cache"
CACHE_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset and persistence errors."""


class ManifestError(DatasetError):
    pass


class LabelError(ManifestError):
    pass


class MissingImageError(DatasetError, FileNotFoundError):
    pass


class CacheMismatchError(DatasetError):
    pass


class ModelFormatError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def _numbers(text: str, sep: str) -> list[float]:
    try:
        return [float(v) for v in text.split(sep) if v.strip() != ""]
    except ValueError as exc:
        raise LabelError(f"non-numeric value in label: {text!r}") from exc


def parse_label(spec: str) -> dict:
    """Parse one label token into ``LabeledExample`` keyword arguments."""
    kind, sep, body = spec.partition(":")
    if not sep:
        raise LabelError(f"label must look like kind:value, got {spec!r}")
    if kind == "count":
        vals = _numbers(body, ",")
        if len(vals) != 1 or vals[0] < 0:
            raise LabelError(f"count label needs one value >= 0: {spec!r}")
        return {"count": vals[0]}
    if kind == "soft":
        try:
            return {"count": soft_label(_numbers(body, ","))}
        except ValueError as exc:
            raise LabelError(f"{exc}: {spec!r}") from exc
    if kind == "interval":
        vals = _numbers(body, ",")
        if len(vals) != 2 or not (0 <= vals[0] <= vals[1]):
            raise LabelError(f"interval label needs 0 <= low <= high: {spec!r}")
        return {"interval": (vals[0], vals[1])}
    if kind == "experts":
        vals = _numbers(body, "|")
        if not vals or min(vals) < 0:
            raise LabelError(f"experts label needs counts >= 0: {spec!r}")
        return {"experts": tuple(vals)}
    raise LabelError(f"unknown label kind {kind!r}")


def format_label(ex: LabeledExample) -> str:
    """Inverse of :func:`parse_label` (soft labels are stored as counts)."""
    parts = []
    if ex.count is not None:
        parts.append(f"count:{ex.count!r}")
    if ex.interval is not None:
        parts.append(f"interval:{ex.interval[0]!r},{ex.interval[1]!r}")
    if ex.experts is not None:
        parts.append("experts:" + "|".join(repr(v) for v in ex.experts))
    return " ".join(parts)


def _parse_label_fields(tokens: Sequence[str], where: str) -> dict:
    kwargs: dict = {}
    for tok in tokens:
        if tok.startswith("beta="):
            try:
                beta = float(tok[5:])
            except ValueError as exc:
                raise LabelError(f"{where}: bad beta {tok!r}") from exc
            if not 0.0 <= beta <= 1.0:
                raise LabelError(f"{where}: beta must lie in [0, 1]")
            kwargs["confidence"] = beta
        elif tok.startswith("expert="):
            kwargs["expert_id"] = tok[7:]
        else:
            parsed = parse_label(tok)
            if set(parsed) & set(kwargs):
                raise LabelError(f"{where}: label given twice")
            kwargs.update(parsed)
    if not {"count", "interval", "experts"} & set(kwargs):
        raise LabelError(f"{where}: entry has no label")
    if "experts" in kwargs and len({"count", "interval"} & set(kwargs)):
        raise LabelError(f"{where}: experts label cannot be combined with other labels")
    return kwargs


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: dict
    line: int
    name: str = ""


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    thresholds: Optional[np.ndarray]
    connectivity: int = DEFAULT_CONNECTIVITY
    min_area: int = 1
    root: Path = Path(".")


def read_thresholds_file(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ManifestError(f"bad threshold row in {path}: {row}")
                continue  # header
    if not rows:
        raise ManifestError(f"no thresholds in {path}")
    try:
        return as_threshold_set(rows)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def parse_manifest(text: str, root=".") -> Manifest:
    root = Path(root)
    entries, thresholds = [], []
    connectivity, min_area = DEFAULT_CONNECTIVITY, 1
    seen_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from exc
        if not tokens:
            continue
        where = f"line {lineno}"
        key, args = tokens[0], tokens[1:]
        if not seen_header:
            if key != MANIFEST_MAGIC or len(args) != 1:
                raise ManifestError(f"{where}: expected '{MANIFEST_MAGIC} {MANIFEST_VERSION}' header")
            if args[0] != str(MANIFEST_VERSION):
                raise ManifestError(f"{where}: unsupported manifest version {args[0]}")
            seen_header = True
            continue
        if key == "connectivity":
            if args not in (["4"], ["8"]):
                raise ManifestError(f"{where}: connectivity must be 4 or 8")
            connectivity = int(args[0])
        elif key == "min-area":
            if len(args) != 1 or not args[0].isdigit() or int(args[0]) < 1:
                raise ManifestError(f"{where}: min-area must be a positive integer")
            min_area = int(args[0])
        elif key == "threshold":
            try:
                thresholds.append([float(v) for v in args])
            except ValueError as exc:
                raise ManifestError(f"{where}: bad threshold") from exc
        elif key == "thresholds-file":
            if len(args) != 1:
                raise ManifestError(f"{where}: thresholds-file takes one path")
            thresholds.extend(read_thresholds_file(root / args[0]).tolist())
        elif key == "entry":
            if len(args) < 2:
                raise ManifestError(f"{where}: entry needs a path and a label")
            entries.append(ManifestEntry(root / args[0], _parse_label_fields(args[1:], where),
                                         lineno, args[0]))
        else:
            raise ManifestError(f"{where}: unknown directive {key!r}")
    if not seen_header:
        raise ManifestError("empty manifest (missing header)")
    tset = None
    if thresholds:
        try:
            tset = as_threshold_set(thresholds)
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc
    return Manifest(tuple(entries), tset, connectivity, min_area, root)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), path.parent)


# ---------------------------------------------------------------------------
# Dataset and feature cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    examples: tuple[LabeledExample, ...]
    thresholds: Optional[np.ndarray]
    connectivity: int = DEFAULT_CONNECTIVITY
    min_area: int = 1
    hashes: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.examples)

    def to_model(self, eta=1.0, standardization="pooled") -> KernelModel:
        return KernelModel.from_examples(
            self.examples, eta=eta, thresholds=self.thresholds,
            connectivity=self.connectivity, min_area=self.min_area,
            standardization=standardization)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def threshold_hash(thresholds, connectivity: int, min_area: int) -> str:
    payload = json.dumps({"t": np.asarray(thresholds, dtype=float).tolist(),
                          "c": int(connectivity), "m": int(min_area)})
    return hashlib.sha256(payload.encode()).hexdigest()


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_feature_cache(path, key: str) -> dict:
    """Cached feature vectors by image hash; errors if built for another key."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CacheMismatchError(f"unreadable feature cache {path}: {exc}") from exc
    if data.get("format") != CACHE_FORMAT or data.get("version") != CACHE_VERSION:
        raise CacheMismatchError(f"{path} is not a version {CACHE_VERSION} feature cache")
    if data.get("key") != key:
        raise CacheMismatchError(
            f"{path} was built for another threshold set or connectivity")
    return {h: np.asarray(v, dtype=np.int64) for h, v in data["features"].items()}


def write_feature_cache(path, key: str, features: dict) -> None:
    payload = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "key": key,
               "features": {h: [int(x) for x in v] for h, v in sorted(features.items())}}
    _atomic_write(path, json.dumps(payload, indent=1))


def load_dataset(manifest_path, cache_path=None, refresh_cache: bool = False,
                 workers: int = 1) -> Dataset:
    """Extract (or read cached) features for every manifest entry."""
    manifest = read_manifest(manifest_path)
    if not manifest.entries:
        return Dataset((), manifest.thresholds, manifest.connectivity, manifest.min_area)
    if manifest.thresholds is None:
        raise ManifestError("manifest has entries but no thresholds")
    for e in manifest.entries:
        if not e.path.is_file():
            raise MissingImageError(f"line {e.line}: image not found: {e.path}")

    hashes = [file_hash(e.path) for e in manifest.entries]
    dupes = {h for h in hashes if hashes.count(h) > 1}
    if dupes:
        warnings.warn(f"{len(dupes)} image(s) appear more than once in the manifest", stacklevel=2)

    key = threshold_hash(manifest.thresholds, manifest.connectivity, manifest.min_area)
    cached: dict = {}
    if cache_path is not None and Path(cache_path).exists() and not refresh_cache:
        cached = read_feature_cache(cache_path, key)

    todo = sorted({(h, str(e.path)) for h, e in zip(hashes, manifest.entries) if h not in cached})

    def work(item):
        h, path = item
        img = load_image(path)
        return h, extract_features(img, manifest.thresholds, manifest.connectivity, manifest.min_area)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, dict(todo).items()))
    else:
        results = [work(item) for item in dict(todo).items()]
    features = dict(cached)
    features.update(results)
    if cache_path is not None and (results or refresh_cache):
        write_feature_cache(cache_path, key, features)

    examples = []
    for h, e in zip(hashes, manifest.entries):
        try:
            examples.append(LabeledExample(
                features=features[h], image_id=e.name, source=str(e.path), **e.label))
        except ValueError as exc:
            raise LabelError(f"line {e.line}: {exc}") from exc
    return Dataset(tuple(examples), manifest.thresholds, manifest.connectivity,
                   manifest.min_area, tuple(hashes))


def augment_dataset(dataset: Dataset, deltas: Sequence[float],
                    reference: str = "corpus") -> Dataset:
    """Append brightness-shifted copies of every image, then interval midpoints.

    Shifted images are featurized with thresholds adapted from the reference
    histogram: ``"corpus"`` pools all source images of the dataset,
    ``"source"`` uses each example's own original image.
    """
    deltas = [float(d) for d in deltas]
    if not all(np.isfinite(deltas)):
        raise ValueError("brightness offsets must be finite")
    if reference not in ("corpus", "source"):
        raise ValueError("reference must be 'corpus' or 'source'")
    examples = list(dataset.examples)
    if deltas:
        if dataset.thresholds is None:
            raise ValueError("augmentation needs the dataset's thresholds")
        if any(ex.source is None for ex in examples):
            raise ValueError("augmentation needs the source image of every example")
        images = {src: load_image(src) for src in dict.fromkeys(ex.source for ex in examples)}
        hists = {src: ColorHistogram.from_image(img) for src, img in images.items()}
        corpus = ColorHistogram.pooled(hists.values())
        for ex in dataset.examples:
            ref = corpus if reference == "corpus" else hists[ex.source]
            for delta in deltas:
                feats = extract_features_adapted(
                    augment_brightness(images[ex.source], delta), dataset.thresholds, ref,
                    dataset.connectivity, dataset.min_area)
                examples.append(replace(ex, features=feats, image_id=f"{ex.image_id}@{delta:+g}"))
    examples = augment_with_interval_midpoints(examples)
    return replace(dataset, examples=tuple(examples), hashes=())


# ---------------------------------------------------------------------------
# Labeled feature tables
# ---------------------------------------------------------------------------


def write_feature_table(path, dataset: Dataset) -> None:
    """CSV of labeled features; thresholds and connectivity go in ``#`` lines."""
    buf = io.StringIO()
    if dataset.thresholds is not None:
        buf.write("# thresholds: " + ";".join(
            ",".join(repr(float(x)) for x in t) for t in dataset.thresholds) + "\n")
    buf.write(f"# connectivity: {dataset.connectivity}\n# min-area: {dataset.min_area}\n")
    width = dataset.examples[0].features.shape[0] if dataset.examples else 0
    writer = csv.writer(buf)
    writer.writerow(["image_id", "label", "confidence", "expert_id", "source"]
                    + [f"r_{k + 1}" for k in range(width)])
    for ex in dataset.examples:
        writer.writerow([ex.image_id, format_label(ex), repr(ex.confidence), ex.expert_id,
                         ex.source or ""] + [repr(float(x)) for x in ex.features])
    _atomic_write(path, buf.getvalue())


def read_feature_table(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"feature table not found: {path}")
    meta, body = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or rows[0][:5] != ["image_id", "label", "confidence", "expert_id", "source"]:
        raise ManifestError(f"{path}: not a labeled feature table")
    examples = []
    for i, row in enumerate(rows[1:], start=2):
        try:
            kwargs = _parse_label_fields(row[1].split(), f"{path} row {i}")
            examples.append(LabeledExample(
                features=np.array([float(v) for v in row[5:]]), image_id=row[0],
                confidence=float(row[2]), expert_id=row[3], source=row[4] or None, **kwargs))
        except (ValueError, IndexError) as exc:
            raise LabelError(f"{path} row {i}: {exc}") from exc
    thresholds = None
    if meta.get("thresholds"):
        thresholds = as_threshold_set([[float(x) for x in t.split(",")]
                                       for t in meta["thresholds"].split(";")])
    return Dataset(tuple(examples), thresholds, int(meta.get("connectivity", 8)),
                   int(meta.get("min-area", 1)))


# ---------------------------------------------------------------------------
# Models and predictions
# ---------------------------------------------------------------------------


def model_to_dict(model: KernelModel) -> dict:
    eta = model.eta if np.ndim(model.eta) == 0 else [float(e) for e in model.eta]
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "eta": eta,
        "standardization": model.standardization,
        "connectivity": model.connectivity,
        "min_area": model.min_area,
        "thresholds": None if model.thresholds is None else model.thresholds.tolist(),
        "examples": [
            {"image_id": i, "features": f.tolist(), "label": float(y), "confidence": float(c)}
            for i, f, y, c in zip(model.image_ids, model.features, model.labels, model.confidence)
        ],
        "meta": model.meta,
    }


def model_from_dict(data: dict) -> KernelModel:
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a kernel-counter model file")
    if data.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {data.get('version')!r}")
    try:
        exs = data["examples"]
        if data["standardization"] not in STANDARDIZATION_POLICIES:
            raise ValueError(f"unknown standardization {data['standardization']!r}")
        return KernelModel(
            features=np.array([e["features"] for e in exs], dtype=np.float64),
            labels=np.array([e["label"] for e in exs], dtype=np.float64),
            confidence=np.array([e["confidence"] for e in exs], dtype=np.float64),
            image_ids=tuple(str(e["image_id"]) for e in exs),
            eta=data["eta"],
            thresholds=None if data["thresholds"] is None else np.array(data["thresholds"]),
            connectivity=int(data["connectivity"]),
            min_area=int(data["min_area"]),
            standardization=data["standardization"],
            meta=dict(data.get("meta") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc


def export_model(model: KernelModel, path) -> None:
    _atomic_write(path, json.dumps(model_to_dict(model), indent=1))


def import_model(path) -> KernelModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc
    return model_from_dict(data)


def export_results(predictions: Sequence[tuple[str, Prediction]], path) -> int:
    """CSV ``image_id,prediction,rounded,variance``; returns the row count."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["image_id", "prediction", "rounded", "variance"])
    for image_id, p in predictions:
        writer.writerow([image_id, repr(float(p.value)), p.rounded, repr(float(p.variance))])
    _atomic_write(path, buf.getvalue())
    return len(predictions)


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"image_id": r["image_id"], "prediction": float(r["prediction"]),
             "rounded": int(r["rounded"]), "variance": float(r["variance"])}
            for r in csv.DictReader(fh)
        ]
