"""Synthetic count model and the convergence experiments built on it.

Each filtered image keeps a fraction ``alpha_k`` of the ``N_d`` true cells
and adds ``F_k`` artifacts drawn uniformly from ``{v_k, ..., s_k}``:

    r_kd = round(alpha_k * N_d + F_k)

Random streams are derived from ``SeedSequence(seed, spawn_key=(run, T))``,
so a (run, T) cell gives the same data whatever other cells are computed
and runs can be evaluated in any order.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .kc import pairwise_squared_distances, round_half_away, standardize
from .tune import TuneConfig, loo_cv_columns

logger = logging.getLogger(__name__)

N_MAX = 200
CSV_HEADER = ["T", "gamma", "mse_mean", "mse_stderr", "runs", "D", "seed"]


def alpha_schedule(T: int) -> np.ndarray:
    """Evenly spaced capture fractions from 0 to 1."""
    if T < 2:
        raise ValueError("T must be at least 2")
    return np.arange(T) / (T - 1)


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def vi_si(alpha):
    """Artifact-count support ``(v, s)`` as a function of the capture fraction."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1) or not np.isfinite(alpha).all():
        raise ValueError("alpha must lie in [0, 1]")
    v = round_half_away(24.0 * _logistic(3.0 * alpha) - 12.0)
    s = round_half_away(1.0 + 40.0 * _logistic(3.5 * alpha) - 20.0)
    v = np.asarray(v, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    return (int(v), int(s)) if v.ndim == 0 else (v, s)


@dataclass(frozen=True)
class SyntheticModelParams:
    alphas: np.ndarray
    v: np.ndarray
    s: np.ndarray
    n_max: int = N_MAX
    gamma: int = 0

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        v = np.asarray(self.v, dtype=np.int64).reshape(-1)
        s = np.asarray(self.s, dtype=np.int64).reshape(-1)
        if not (alphas.shape == v.shape == s.shape) or alphas.size == 0:
            raise ValueError("alphas, v and s must have the same non-zero length")
        if alphas.min() < 0 or alphas.max() > 1:
            raise ValueError("alphas must lie in [0, 1]")
        if v.min() < 0 or np.any(s <= v):
            raise ValueError("need 0 <= v_k < s_k")
        if self.gamma < 0 or self.n_max < 0:
            raise ValueError("gamma and n_max must be non-negative")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_T(cls, T: int, gamma: int = 0, n_max: int = N_MAX) -> "SyntheticModelParams":
        alphas = alpha_schedule(T)
        v, s = vi_si(alphas)
        return cls(alphas, v, s, n_max, gamma)

    @property
    def T(self) -> int:
        return self.alphas.shape[0]


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray  # (D, T) int64
    true_counts: np.ndarray  # (D,) int64
    observed_counts: np.ndarray  # (D,) int64, true counts plus label noise


def generate_features(params: SyntheticModelParams, D: int, rng: np.random.Generator):
    if D < 1:
        raise ValueError("D must be >= 1")
    n = rng.integers(0, params.n_max + 1, size=D)
    f = rng.integers(params.v, params.s + 1, size=(D, params.T))
    r = round_half_away(params.alphas * n[:, None] + f).astype(np.int64)
    return r, n


def label_noise(gamma: int, D: int, rng: np.random.Generator) -> np.ndarray:
    if gamma == 0:
        return np.zeros(D, dtype=np.int64)
    return rng.integers(-gamma, gamma + 1, size=D)


def generate(params: SyntheticModelParams, D: int, seed=None) -> SyntheticDataset:
    """Draw ``D`` images from the model; labels carry uniform noise in
    ``[-gamma, gamma]`` and are not clipped."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    feat_ss, noise_ss = ss.spawn(2)
    r, n = generate_features(params, D, np.random.default_rng(feat_ss))
    noisy = n + label_noise(params.gamma, D, np.random.default_rng(noise_ss))
    return SyntheticDataset(r, n, noisy)


def mse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths must be non-empty with equal length")
    return float(np.mean((p - t) ** 2))


def model_bounds(r, alpha, v, s, rounding_slack: float = 0.0):
    """Lower and upper bounds on the true count given an observed count.

    ``lower = floor((r - s - slack) / alpha)`` clamped at 0 and
    ``upper = ceil((r - v + slack) / alpha)``. With the default ``slack = 0``
    these are the plain support bounds, which hold when ``alpha * N`` is an
    integer. Observations rounded to the nearest integer can sit up to 0.5
    away from ``alpha * N + F``; ``rounding_slack=0.5`` covers that case.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(alpha > 1):
        raise ValueError("bounds need alpha in (0, 1]")
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(v < 0) or np.any(s <= v):
        raise ValueError("need 0 <= v < s")
    r = np.asarray(r, dtype=np.float64)
    lower = np.maximum(np.floor((r - s - rounding_slack) / alpha), 0.0).astype(np.int64)
    upper = np.ceil((r - v + rounding_slack) / alpha).astype(np.int64)
    upper = np.maximum(upper, lower)
    if lower.ndim == 0:
        return int(lower), int(upper)
    return lower, upper


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRow:
    T: int
    gamma: int
    mse_mean: float
    mse_stderr: float
    runs: int
    D: int
    seed: int

    def as_csv(self) -> list:
        return [self.T, self.gamma, repr(float(self.mse_mean)), repr(float(self.mse_stderr)),
                self.runs, self.D, self.seed]


def smoothing_estimates(sqdist, labels, eta: float) -> np.ndarray:
    zeros = np.zeros_like(labels)
    return _kernels.kernel_moments(sqdist, labels, zeros, float(eta))[0]


def run_cell(run: int, T: int, D: int, gammas: Sequence[int], seed: int,
             eta: Optional[float] = None, mode: str = "smooth",
             config: Optional[TuneConfig] = None, exact_distances: bool = False) -> dict:
    """MSE of one run at one ``T`` for every noise level.

    The returned dict maps ``gamma`` to ``(mse, eta_used)``.
    """
    if mode not in ("smooth", "predict"):
        raise ValueError("mode must be 'smooth' or 'predict'")
    feat_ss, noise_ss = np.random.SeedSequence(seed, spawn_key=(run, T)).spawn(2)
    params = SyntheticModelParams.from_T(T)
    r, n = generate_features(params, D, np.random.default_rng(feat_ss))
    z, _ = standardize(r)
    sqdist = np.ascontiguousarray(pairwise_squared_distances(z, exact=exact_distances))
    # every noise level restarts the same noise stream
    noisy = np.stack([n + label_noise(g, D, np.random.default_rng(noise_ss)) for g in gammas],
                     axis=1).astype(np.float64)
    if eta is None:
        etas = [res.eta for res in loo_cv_columns(sqdist, noisy, config)]
    else:
        etas = [float(eta)] * len(gammas)
    out = {}
    for c, gamma in enumerate(gammas):
        if mode == "smooth":
            est = smoothing_estimates(sqdist, noisy[:, c], etas[c])
        else:
            est = _kernels.kernel_average(sqdist, noisy[:, c], etas[c], True)
        out[gamma] = (mse(est, n), etas[c])
    return out


def run_experiment(T_values: Sequence[int], D: int, runs: int,
                   gammas: Sequence[int] = (0,), seed: int = 0,
                   eta: Optional[float] = None, mode: str = "smooth",
                   config: Optional[TuneConfig] = None,
                   exact_distances: bool = False, progress=None) -> list[ExperimentRow]:
    """Average MSE against the true counts over ``runs`` independent data sets.

    ``eta=None`` tunes the bandwidth by LOO-CV on the noisy labels in every
    run; a number fixes it. ``mode`` selects smoothing estimates (self term
    included) or leave-one-out predictions.
    """
    if runs < 1 or D < 2:
        raise ValueError("need runs >= 1 and D >= 2")
    if mode not in ("smooth", "predict"):
        raise ValueError("mode must be 'smooth' or 'predict'")
    gammas = [int(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ValueError("gamma must be >= 0")
    if config is None:
        config = TuneConfig(search="golden")
    results = {(T, g): np.empty(runs) for T in T_values for g in gammas}
    for T in T_values:
        for run in range(runs):
            cell = run_cell(run, T, D, gammas, seed, eta, mode, config, exact_distances)
            for g, (value, _) in cell.items():
                results[(T, g)][run] = value
        if progress is not None:
            progress(T)
        logger.info("T=%d done", T)
    rows = []
    for T in T_values:
        for g in gammas:
            vals = results[(T, g)]
            stderr = float(vals.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
            rows.append(ExperimentRow(int(T), g, float(vals.mean()), stderr, runs, D, seed))
    return rows


def write_experiment_csv(path, rows: Sequence[ExperimentRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())
