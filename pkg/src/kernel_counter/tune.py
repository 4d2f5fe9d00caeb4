"""Choosing the kernel bandwidth ``eta``.

Leave-one-out cross-validation scores every candidate on a grid; the rule of
thumb gives a closed-form starting value from standardized distances.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .kc import KernelModel, pairwise_squared_distances, round_half_away, standardize

LOSSES = ("l1", "linf", "mse", "neg-r2")


def default_eta_grid() -> np.ndarray:
    """61 values of ``eta`` whose reciprocals are log-spaced over [1e-3, 1e3]."""
    return np.sort(1.0 / np.logspace(-3, 3, 61))


def r_squared(pred, truth) -> float:
    """Coefficient of determination of the least-squares line of ``pred`` on ``truth``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    sp, st = pred.std(), truth.std()
    if sp == 0 or st == 0:
        return 1.0 if np.array_equal(pred, truth) else 0.0
    r = np.corrcoef(pred, truth)[0, 1]
    return float(r * r)


def loss_value(name: str, pred, truth) -> float:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    if name == "l1":
        return float(np.mean(np.abs(err)))
    if name == "linf":
        return float(np.max(np.abs(err)))
    if name == "mse":
        return float(np.mean(err * err))
    if name == "neg-r2":
        return 1.0 - r_squared(pred, truth)
    raise ValueError(f"unknown loss {name!r}; choose from {LOSSES}")


@dataclass(frozen=True)
class TuneConfig:
    """LOO-CV settings.

    ``search="grid"`` scores every grid value. ``search="golden"`` runs a
    golden-section search over grid indices, which returns the grid
    minimizer whenever the loss curve is unimodal and costs about
    ``log(len(grid))`` evaluations instead of ``len(grid)``.
    """

    grid: np.ndarray = field(default_factory=default_eta_grid)
    loss: str = "mse"
    rounding: bool = False
    search: str = "grid"

    def __post_init__(self):
        grid = np.sort(np.asarray(self.grid, dtype=np.float64).reshape(-1))
        if grid.size == 0 or np.any(grid <= 0) or not np.isfinite(grid).all():
            raise ValueError("the eta grid must be non-empty with positive entries")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.search not in ("grid", "golden"):
            raise ValueError("search must be 'grid' or 'golden'")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class TuneResult:
    eta: float
    grid: np.ndarray
    losses: np.ndarray  # nan where the search did not evaluate

    @property
    def best_loss(self) -> float:
        return float(np.nanmin(self.losses))

    def write_curve(self, path) -> None:
        """CSV ``inv_eta,eta,loss`` in increasing ``1/eta``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["inv_eta", "eta", "loss"])
            for eta, loss in sorted(zip(self.grid, self.losses), key=lambda p: -p[0]):
                if not math.isnan(loss):
                    writer.writerow([repr(float(1.0 / eta)), repr(float(eta)), repr(float(loss))])


def loo_distances(features) -> np.ndarray:
    """Squared distances used by every LOO fold.

    Holding out one of ``D`` vectors pools the ``D - 1`` training vectors
    with the held-out one, i.e. all ``D`` of them, so the standardization is
    the same for every fold.
    """
    z, _ = standardize(features)
    return pairwise_squared_distances(z)


def loo_predictions(features, labels, eta: float, sqdist=None) -> np.ndarray:
    """Prediction for each example from the other ``D - 1``."""
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if labels.shape[0] < 2:
        raise ValueError("leave-one-out needs at least two examples")
    if sqdist is None:
        sqdist = loo_distances(features)
    return _kernels.kernel_average(np.ascontiguousarray(sqdist), labels, float(eta), True)


def _argmin_prefer_large(losses: np.ndarray) -> int:
    finite = np.where(np.isnan(losses), np.inf, losses)
    best = finite.min()
    tol = 1e-12 * max(1.0, abs(best))
    return int(np.flatnonzero(finite <= best + tol)[-1])


def _golden_indices(n: int, f: Callable[[int], float]) -> None:
    lo, hi = 0, n - 1
    while hi - lo > 3:
        m1 = lo + int(round(0.381966 * (hi - lo)))
        m2 = lo + int(round(0.618034 * (hi - lo)))
        if m2 <= m1:
            m2 = m1 + 1
        if f(m1) < f(m2):
            hi = m2
        else:
            # ties move toward the smoother model
            lo = m1
    for i in range(lo, hi + 1):
        f(i)


def loo_cv_distances(sqdist, labels, config: Optional[TuneConfig] = None) -> TuneResult:
    """LOO-CV over ``config.grid`` given precomputed fold distances."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    return loo_cv_columns(sqdist, labels[:, None], config)[0]


def loo_cv_columns(sqdist, labels, config: Optional[TuneConfig] = None) -> list[TuneResult]:
    """Independent LOO-CV for every column of a ``(D, m)`` label matrix.

    The columns share the features, hence the kernel weights, so each
    candidate ``eta`` is evaluated once for all of them.
    """
    config = config or TuneConfig()
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] < 2:
        raise ValueError("leave-one-out needs at least two examples")
    sqdist = np.ascontiguousarray(sqdist, dtype=np.float64)
    grid = config.grid
    cache: dict[int, np.ndarray] = {}

    def predictions(i: int) -> np.ndarray:
        if i not in cache:
            pred = _kernels.kernel_average(sqdist, labels, float(grid[i]), True)
            cache[i] = round_half_away(pred) if config.rounding else pred
        return cache[i]

    results = []
    for c in range(labels.shape[1]):
        losses = np.full(grid.shape, np.nan)

        def evaluate(i: int) -> float:
            if np.isnan(losses[i]):
                losses[i] = loss_value(config.loss, predictions(i)[:, c], labels[:, c])
            return losses[i]

        if config.search == "grid" or grid.size <= 4:
            for i in range(grid.size):
                evaluate(i)
        else:
            _golden_indices(grid.size, evaluate)
        results.append(TuneResult(float(grid[_argmin_prefer_large(losses)]), grid, losses))
    return results


def loo_cv(features, labels, config: Optional[TuneConfig] = None) -> TuneResult:
    """Pick ``eta`` by leave-one-out cross-validation.

    Ties between grid values go to the larger ``eta``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[0] < 2:
        raise ValueError("leave-one-out needs at least two examples")
    return loo_cv_distances(loo_distances(features), labels, config)


def tune_model(model: KernelModel, config: Optional[TuneConfig] = None) -> tuple[KernelModel, TuneResult]:
    """LOO-CV with the model's own standardization (one row per image)."""
    if model.size < 2:
        raise ValueError("leave-one-out needs at least two examples")
    z = model.standardize_training()
    result = loo_cv_distances(pairwise_squared_distances(z), model.labels, config)
    return model.with_eta(result.eta), result


def _fallback(fallback: Optional[float]) -> float:
    return float(default_eta_grid()[0] if fallback is None else fallback)


def rule_of_thumb_eta(train_std, test_std, fallback: Optional[float] = None) -> float:
    """Twice the mean squared standardized deviation from the test vector.

    A zero value (the test vector coincides with every training vector) is
    replaced by ``fallback``, by default the smallest default grid value.
    """
    train_std = np.atleast_2d(np.asarray(train_std, dtype=np.float64))
    diff = train_std - np.asarray(test_std, dtype=np.float64).reshape(1, -1)
    d, t = train_std.shape
    eta = 2.0 / (d * t) * float(np.sum(diff * diff))
    return eta if eta > 0 else _fallback(fallback)


def rule_of_thumb_eta_per_datum(train_std, test_std, fallback: Optional[float] = None) -> np.ndarray:
    """Per-example version: ``2/T`` times each squared standardized distance."""
    train_std = np.atleast_2d(np.asarray(train_std, dtype=np.float64))
    diff = train_std - np.asarray(test_std, dtype=np.float64).reshape(1, -1)
    eta = 2.0 / train_std.shape[1] * np.sum(diff * diff, axis=1)
    return np.where(eta > 0, eta, _fallback(fallback))


def rule_of_thumb_for(model: KernelModel, x, per_datum: bool = False, fallback=None):
    """Rule-of-thumb bandwidth for predicting ``x`` with ``model``."""
    train_z, test_z = model.standardize_pair(x)
    if per_datum:
        return rule_of_thumb_eta_per_datum(train_z, test_z, fallback)
    return rule_of_thumb_eta(train_z, test_z, fallback)
