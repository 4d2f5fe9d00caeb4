"""
The kernel counter: a Gaussian kernel smoother over standardized
object-count vectors.

For a test vector the training counts are averaged with weights
``exp(-L_d / eta)`` normalized to one, where ``L_d`` is the squared distance
between standardized feature vectors. The same machinery with a training
vector as reference smooths the expert labels and yields variance estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

POOLED = "pooled"
TRAIN_ONLY = "train-only"
STANDARDIZATION_POLICIES = (POOLED, TRAIN_ONLY)


def round_half_away(x):
    """Nearest integer, halves rounded away from zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Labeled examples
# ---------------------------------------------------------------------------


def soft_label(object_probabilities: Iterable[float]) -> float:
    """Count of candidate objects weighted by the expert's confidence in each."""
    p = np.asarray(list(object_probabilities), dtype=np.float64)
    if p.size and (not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("object probabilities must lie in [0, 1]")
    return float(p.sum())


@dataclass(frozen=True)
class LabeledExample:
    """A feature vector with its expert label.

    Exactly one of ``count``, ``interval`` or ``experts`` is normally given;
    ``count`` together with ``interval`` is allowed and feeds
    :func:`augment_with_interval_midpoints`.
    """

    features: np.ndarray
    count: Optional[float] = None
    interval: Optional[tuple[float, float]] = None
    experts: Optional[tuple[float, ...]] = None
    confidence: float = 1.0
    image_id: str = ""
    expert_id: str = ""
    source: Optional[str] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if feats.size == 0 or not np.isfinite(feats).all() or feats.min() < 0:
            raise ValueError("features must be a non-empty vector of non-negative counts")
        object.__setattr__(self, "features", feats)
        if self.count is None and self.interval is None and self.experts is None:
            raise ValueError("example has no label")
        if self.count is not None:
            if not (math.isfinite(self.count) and self.count >= 0):
                raise ValueError(f"count must be >= 0, got {self.count}")
            object.__setattr__(self, "count", float(self.count))
        if self.interval is not None:
            low, upp = (float(v) for v in self.interval)
            if not (0 <= low <= upp):
                raise ValueError(f"interval must satisfy 0 <= low <= upp, got {self.interval}")
            object.__setattr__(self, "interval", (low, upp))
        if self.experts is not None:
            ex = tuple(float(v) for v in self.experts)
            if not ex or min(ex) < 0:
                raise ValueError("expert counts must be non-empty and >= 0")
            object.__setattr__(self, "experts", ex)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "confidence", float(self.confidence))

    def targets(self) -> tuple[float, ...]:
        """Training outputs this example contributes."""
        if self.experts is not None:
            return self.experts
        if self.count is not None:
            return (float(self.count),)
        return self.interval


def flatten_multi_expert(examples: Sequence[LabeledExample]) -> list[LabeledExample]:
    """One single-count example per (image, opinion) pair.

    Multi-expert labels give one example per expert and interval-only labels
    become the two outputs ``low`` and ``upp``.
    """
    out = []
    for ex in examples:
        tgts = ex.targets()
        if ex.experts is None and ex.count is not None:
            out.append(ex)
            continue
        for j, value in enumerate(tgts):
            out.append(replace(ex, count=value, interval=None, experts=None,
                               expert_id=ex.expert_id or str(j + 1)))
    return out


def augment_with_interval_midpoints(examples: Sequence[LabeledExample]) -> list[LabeledExample]:
    """Append a midpoint-labeled copy of each example whose interval midpoint
    differs from its count."""
    out = list(examples)
    for ex in examples:
        if ex.interval is None:
            continue
        mid = 0.5 * (ex.interval[0] + ex.interval[1])
        if ex.count is not None and mid == ex.count:
            continue
        out.append(replace(ex, count=mid, interval=None, experts=None))
    return out


# ---------------------------------------------------------------------------
# Standardization and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std == 0

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.constant, 1.0, self.std)
        return np.where(self.constant, 0.0, (x - self.mean) / safe)

    def scale(self, diff) -> np.ndarray:
        """Differences of raw vectors expressed in standardized units.

        Scaling the raw difference keeps equal raw offsets exactly equal,
        which subtracting two standardized vectors does not.
        """
        diff = np.asarray(diff, dtype=np.float64)
        safe = np.where(self.constant, 1.0, self.std)
        return np.where(self.constant, 0.0, diff / safe)


def fit_standardization(x) -> StandardizationStats:
    """Mean and standard deviation with the ``n - 1`` divisor, per column."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    mean = x.mean(axis=0)
    if n < 2:
        std = np.zeros(x.shape[1])
    else:
        std = np.sqrt(((x - mean) ** 2).sum(axis=0) / (n - 1))
        # exact zero for constant columns despite rounding in the mean
        std[np.all(x == x[0], axis=0)] = 0.0
    return StandardizationStats(mean, std)


def standardize(train, test=None):
    """Standardize ``D`` training vectors, pooled with ``test`` when given.

    With a test vector the statistics run over all ``D + 1`` vectors with
    divisor ``D``; the test vector is the last row of the result.
    Constant dimensions map to 0.

    Returns
    -------
    z : ndarray, ``(D, T)`` or ``(D + 1, T)``
    stats : StandardizationStats
    """
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    if train.shape[0] < 1:
        raise ValueError("need at least one training vector")
    pool = train
    if test is not None:
        test = np.asarray(test, dtype=np.float64).reshape(-1)
        if test.shape[0] != train.shape[1]:
            raise ValueError(
                f"test vector has length {test.shape[0]}, training vectors {train.shape[1]}")
        pool = np.vstack([train, test])
    stats = fit_standardization(pool)
    return stats.apply(pool), stats


def squared_distances(train_std, test_std) -> np.ndarray:
    diff = np.asarray(train_std, dtype=np.float64) - np.asarray(test_std, dtype=np.float64)
    return np.einsum("dk,dk->d", diff, diff)


def pairwise_squared_distances(z, exact: bool = True) -> np.ndarray:
    """Symmetric ``(D, D)`` matrix of squared distances with a zero diagonal.

    ``exact=False`` uses the Gram-matrix expansion, several times faster for
    wide feature vectors but accurate only to about ``1e-13`` relative.
    """
    z = np.asarray(z, dtype=np.float64)
    if exact:
        return cdist(z, z, "sqeuclidean")
    sq = np.einsum("dk,dk->d", z, z)
    dist = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(dist, 0.0, out=dist)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def nearest_neighbor(sqdist) -> int:
    """Index of the smallest distance; lowest index on ties."""
    return int(np.argmin(np.asarray(sqdist)))


def weights_from_distances(sqdist, eta) -> np.ndarray:
    """Normalized Gaussian weights ``exp(-L_d / eta_d) / sum``.

    ``eta`` is a scalar or one value per datum. The log-weights are shifted
    by their maximum before exponentiation, which the normalization cancels.
    If no weight can be formed (all log-weights ``-inf`` or ``nan``) the
    nearest neighbor gets weight one.
    """
    sqdist = np.asarray(sqdist, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta <= 0) or not np.all(np.isfinite(eta)):
        raise ValueError("eta must be positive and finite")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logw = -sqdist / eta
        top = np.max(logw)
        if not np.isfinite(top):
            w = np.zeros_like(sqdist)
            w[nearest_neighbor(sqdist)] = 1.0
            return w
        w = np.exp(logw - top)
    return w / w.sum()


def compute_weights(test_std, train_std, eta) -> np.ndarray:
    return prediction_weights(squared_distances(train_std, test_std), eta)


# distances this close, relative to the smallest, count as tied
TIE_RTOL = 1e-12


def prediction_weights(sqdist, eta) -> np.ndarray:
    """Weights for one test vector given its squared distances.

    Distances within ``TIE_RTOL`` of the smallest are tied. In the
    nearest-neighbor limit the tie goes to the lowest index. That limit is
    reached once every untied weight has underflowed and either such a
    weight exists or ``eta`` is below the resolution of the distances.
    Otherwise tied vectors share the weight, so equal distances give
    uniform weights at ordinary ``eta``.
    """
    sqdist = np.asarray(sqdist, dtype=np.float64)
    w = weights_from_distances(sqdist, eta)
    if np.ndim(eta) == 0 and sqdist.size > 1:
        m = sqdist.min()
        tied = sqdist <= m + TIE_RTOL * m
        if (tied.sum() > 1 and not w[~tied].any()
                and ((~tied).any() or float(eta) <= TIE_RTOL * m)):
            w = np.zeros_like(w)
            w[np.flatnonzero(tied)[0]] = 1.0
    return w


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    value: float
    rounded: int
    variance: float
    weights: np.ndarray

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class Smoothing:
    values: np.ndarray
    variances: np.ndarray


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Training data plus everything needed to reproduce features and weights.

    ``features`` is ``(D, T)``; ``labels``, ``confidence`` and ``image_ids``
    have length ``D``. ``eta`` is a scalar or a length-``D`` vector.
    """

    features: np.ndarray
    labels: np.ndarray
    eta: float | np.ndarray = 1.0
    confidence: Optional[np.ndarray] = None
    image_ids: tuple[str, ...] = ()
    thresholds: Optional[np.ndarray] = None
    connectivity: int = 8
    min_area: int = 1
    standardization: str = POOLED
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if feats.shape[0] < 1:
            raise ValueError("a kernel model needs at least one example")
        if labels.shape[0] != feats.shape[0]:
            raise ValueError("one label per feature vector is required")
        if not np.isfinite(labels).all():
            raise ValueError("labels must be finite")
        d = feats.shape[0]
        eta = np.asarray(self.eta, dtype=np.float64)
        if eta.ndim == 0:
            eta = float(eta)
            if not (eta > 0 and math.isfinite(eta)):
                raise ValueError("eta must be positive")
        else:
            eta = eta.reshape(-1)
            if eta.shape[0] != d or np.any(eta <= 0) or not np.isfinite(eta).all():
                raise ValueError("per-datum eta needs D positive values")
        conf = np.ones(d) if self.confidence is None else np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if conf.shape[0] != d or conf.min() < 0 or conf.max() > 1:
            raise ValueError("confidence values must lie in [0, 1], one per example")
        ids = tuple(self.image_ids) if self.image_ids else tuple(str(i + 1) for i in range(d))
        if len(ids) != d:
            raise ValueError("one image id per example is required")
        if self.standardization not in STANDARDIZATION_POLICIES:
            raise ValueError(f"unknown standardization policy {self.standardization!r}")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        thr = None if self.thresholds is None else np.atleast_2d(np.asarray(self.thresholds, dtype=np.float64))
        if thr is not None and thr.shape != (feats.shape[1], 3):
            raise ValueError("need one threshold vector per feature dimension")
        for name, value in (("features", feats), ("labels", labels), ("eta", eta),
                            ("confidence", conf), ("image_ids", ids), ("thresholds", thr)):
            object.__setattr__(self, name, value)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], **kwargs) -> "KernelModel":
        """Build a model, expanding multi-expert and interval labels.

        Examples without an image id get one before expansion, so all
        opinions about an image share its id.
        """
        named = [ex if ex.image_id else replace(ex, image_id=str(i + 1))
                 for i, ex in enumerate(examples)]
        flat = flatten_multi_expert(named)
        if not flat:
            raise ValueError("empty dataset")
        return cls(
            features=np.stack([ex.features for ex in flat]),
            labels=np.array([ex.count for ex in flat]),
            confidence=np.array([ex.confidence for ex in flat]),
            image_ids=tuple(ex.image_id for ex in flat),
            **kwargs,
        )

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_eta(self, eta) -> "KernelModel":
        return replace(self, eta=eta)

    # -- weights ----------------------------------------------------------

    @cached_property
    def _image_rows(self) -> np.ndarray:
        """First row of every distinct image id.

        Several opinions about one image are one image for the
        standardization statistics, so duplicating opinions leaves the
        standardized features unchanged.
        """
        _, first = np.unique(np.array(self.image_ids, dtype=object), return_index=True)
        return np.sort(first)

    def standardize_pair(self, x):
        """Standardized training features and test vector, per the model's policy."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise ValueError(f"feature vector has length {x.shape[0]}, model expects {self.dim}")
        stats = self._stats_for(x)
        return stats.apply(self.features), stats.apply(x)

    def _stats_for(self, x) -> StandardizationStats:
        if self.standardization == POOLED:
            return fit_standardization(np.vstack([self.features[self._image_rows], x]))
        return self._train_stats

    def distances(self, x) -> np.ndarray:
        """Squared standardized distances from ``x`` to every training vector."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise ValueError(f"feature vector has length {x.shape[0]}, model expects {self.dim}")
        diff = self._stats_for(x).scale(self.features - x)
        return np.einsum("dk,dk->d", diff, diff)

    @cached_property
    def _train_stats(self) -> StandardizationStats:
        return fit_standardization(self.features[self._image_rows])

    def standardize_training(self) -> np.ndarray:
        """Training features standardized over the distinct images."""
        return self._train_stats.apply(self.features)

    def weights(self, x, eta=None) -> np.ndarray:
        return prediction_weights(self.distances(x), self.eta if eta is None else eta)

    # -- smoothing --------------------------------------------------------

    @cached_property
    def _smoothing(self) -> Smoothing:
        dist = pairwise_squared_distances(self.standardize_training())
        eta = np.asarray(self.eta)
        rho = np.empty_like(dist)
        for j in range(self.size):
            rho[:, j] = weights_from_distances(dist[:, j], eta)
        values = np.clip(rho.T @ self.labels, self.labels.min(), self.labels.max())
        resid2 = (self.labels - values) ** 2
        variances = rho.T @ resid2
        return Smoothing(values, variances)

    def smooth(self) -> Smoothing:
        """Smoothed expert labels and their variances, one per example."""
        return self._smoothing

    def smoothing_kernel(self) -> np.ndarray:
        """Unnormalized ``rho_dj = exp(-L_dj / eta)`` (scalar ``eta`` only)."""
        if np.ndim(self.eta):
            raise ValueError("the unnormalized kernel is defined for a scalar eta")
        return np.exp(-pairwise_squared_distances(self.standardize_training()) / self.eta)

    # -- prediction -------------------------------------------------------

    def predict(self, x, eta=None) -> Prediction:
        w = self.weights(x, eta)
        value = float(w @ self.labels)
        lo, hi = float(self.labels.min()), float(self.labels.max())
        # roundoff can push a convex combination an ulp outside the label range
        value = min(max(value, lo), hi)
        resid2 = (self.labels - self.smooth().values) ** 2
        variance = max(float(w @ resid2), 0.0)
        return Prediction(value, int(round_half_away(value)), variance, w)

    def predict_many(self, xs, eta=None) -> list[Prediction]:
        return [self.predict(x, eta) for x in np.atleast_2d(xs)]

    def predict_confidence_weighted(self, x, eta=None) -> Prediction:
        """Prediction with each label scaled by its confidence, weights not
        renormalized."""
        w = self.weights(x, eta)
        value = max(float(w @ (self.confidence * self.labels)), 0.0)
        resid2 = (self.labels - self.smooth().values) ** 2
        variance = max(float(w @ resid2), 0.0)
        return Prediction(value, int(round_half_away(value)), variance, w)


def predict(model: KernelModel, features, eta=None) -> Prediction:
    return model.predict(features, eta)


def smooth(model: KernelModel) -> Smoothing:
    return model.smooth()


def predict_confidence_weighted(model: KernelModel, features, eta=None) -> Prediction:
    return model.predict_confidence_weighted(features, eta)
