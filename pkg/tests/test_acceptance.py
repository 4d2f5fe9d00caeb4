"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in an ``acceptance``
section of the terminal summary.
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from kernel_counter.cli import DEFAULT_SEED
from kernel_counter.design import AnnotatedImage, monte_carlo_search
from kernel_counter.imgcore import label_objects
from kernel_counter.kc import KernelModel, LabeledExample
from kernel_counter.synth import SyntheticModelParams, generate, model_bounds, run_experiment
from oracles import flood_fill_labels, level_grid_optima, same_partition

T_VALUES = [2, 5, 10, 20, 50, 100, 200]
GAMMAS = [0, 5, 10]


@pytest.fixture(scope="module")
def synthetic_grid():
    start = time.perf_counter()
    rows = run_experiment(T_VALUES, 2000, 200, gammas=GAMMAS, seed=DEFAULT_SEED)
    elapsed = time.perf_counter() - start
    table = {(r.T, r.gamma): (r.mse_mean, r.mse_stderr) for r in rows}
    return table, elapsed


def fmt(values):
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


def test_criterion_1_convergence_in_T(synthetic_grid, acceptance_report):
    table, elapsed = synthetic_grid
    mse = [table[(T, 0)][0] for T in T_VALUES]
    steps_ok = all(b <= 1.05 * a for a, b in zip(mse, mse[1:]))
    ratio = mse[-1] / mse[1]
    passed = steps_ok and ratio <= 0.05
    acceptance_report(1, passed, f"MSE(T)={fmt(mse)} non-increasing(5%)={steps_ok} "
                                 f"MSE(200)/MSE(5)={ratio:.4f} (<=0.05) runtime={elapsed:.0f}s")
    assert steps_ok
    assert ratio <= 0.05


def test_criterion_2_noise_robustness(synthetic_grid, acceptance_report):
    table, _ = synthetic_grid
    violations = []
    for T in T_VALUES:
        for lo, hi in zip(GAMMAS, GAMMAS[1:]):
            (m_lo, se_lo), (m_hi, se_hi) = table[(T, lo)], table[(T, hi)]
            tol = 3.0 * np.hypot(se_lo, se_hi)
            if m_hi < m_lo - tol and not (m_lo < 0.1 and m_hi < 0.1):
                violations.append((T, lo, hi))
    g10 = [table[(T, 10)][0] for T in T_VALUES]
    ratio = g10[-1] / g10[1]
    passed = not violations and ratio <= 0.1
    acceptance_report(2, passed, f"ordering violations={violations} MSE(gamma=10, T)={fmt(g10)} "
                                 f"MSE(10,200)/MSE(10,5)={ratio:.3f} (<=0.1)")
    assert not violations
    assert ratio <= 0.1


def integer_model(rng, eta):
    D = int(rng.integers(1, 30))
    T = int(rng.integers(1, 6))
    feats = rng.integers(0, 6, size=(D, T))
    labels = rng.integers(0, 200, size=D).astype(float)
    return KernelModel(feats, labels, eta), rng.integers(0, 6, size=T)


def exact_nearest(features, x):
    """Lowest index minimizing the pooled standardized distance, in rationals."""
    pool = [list(map(Fraction, map(int, row))) for row in features] + [list(map(Fraction, map(int, x)))]
    n = len(pool)
    inv_var = []
    for k in range(len(x)):
        col = [row[k] for row in pool]
        mu = sum(col) / n
        var = sum((c - mu) ** 2 for c in col) / (n - 1) if n > 1 else Fraction(0)
        inv_var.append(0 if var == 0 else 1 / var)
    dist = [sum((a - b) ** 2 * iv for a, b, iv in zip(row, pool[-1], inv_var)) for row in pool[:-1]]
    best = min(dist)
    return dist.index(best), dist.count(best) > 1


def test_criterion_3_eta_limits(acceptance_report):
    rng = np.random.default_rng(3)
    worst_mean, nn_miss, ties = 0.0, 0, 0
    for _ in range(100):
        m, x = integer_model(rng, 1.0)
        worst_mean = max(worst_mean, abs(m.predict(x, 1e12).value - m.labels.mean()))
        idx, tied = exact_nearest(m.features, x)
        ties += tied
        nn_miss += m.predict(x, 1e-12).value != m.labels[idx]
    passed = worst_mean < 1e-6 and nn_miss == 0
    acceptance_report(3, passed, f"max |predict - mean| at eta=1e12: {worst_mean:.2e}; "
                                 f"nearest-neighbor mismatches at eta=1e-12: {nn_miss}/100 "
                                 f"({ties} tied cases)")
    assert worst_mean < 1e-6
    assert nn_miss == 0


def test_criterion_4_estimator_properties(acceptance_report):
    rng = np.random.default_rng(4)
    failures = {"weights": 0, "range": 0, "nonneg": 0, "variance": 0, "symmetry": 0}
    for _ in range(10_000):
        D = int(rng.integers(1, 30))
        T = int(rng.integers(1, 8))
        m = KernelModel(rng.integers(0, 50, size=(D, T)), rng.integers(0, 200, size=D).astype(float),
                        float(10 ** rng.uniform(-3, 3)))
        p = m.predict(rng.integers(0, 50, size=T))
        failures["weights"] += bool(abs(p.weights.sum() - 1) >= 1e-12)
        failures["range"] += not (m.labels.min() <= p.value <= m.labels.max())
        failures["nonneg"] += p.value < 0
        failures["variance"] += bool(p.variance < 0 or (m.smooth().variances < 0).any())
        rho = m.smoothing_kernel()
        failures["symmetry"] += not np.array_equal(rho, rho.T)
    passed = not any(failures.values())
    acceptance_report(4, passed, f"failures over 10^4 models: {failures}")
    assert passed


def test_criterion_5_connected_components(acceptance_report):
    rng = np.random.default_rng(5)
    disagreements = 0
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        mask = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        for conn in (4, 8):
            labels, n = label_objects(mask, conn)
            ref, n_ref = flood_fill_labels(mask, conn)
            disagreements += n != n_ref or not same_partition(labels, ref)
    acceptance_report(5, disagreements == 0, f"{disagreements} disagreements over 1000 masks x 2 connectivities")
    assert disagreements == 0


def test_criterion_6_bounds_containment(acceptance_report):
    rng = np.random.default_rng(6)
    missed = plain_missed = draws = 0
    while draws < 10_000:
        T = int(rng.integers(2, 201))
        params = SyntheticModelParams.from_T(T)
        data = generate(params, 100, int(rng.integers(2**32)))
        a, v, s = params.alphas[1:], params.v[1:], params.s[1:]
        n = data.true_counts[:, None]
        lo, hi = model_bounds(data.features[:, 1:], a, v, s, rounding_slack=0.5)
        missed += int(np.any((n < lo) | (n > hi), axis=1).sum())
        lo0, hi0 = model_bounds(data.features[:, 1:], a, v, s)
        plain_missed += int(np.any((n < lo0) | (n > hi0), axis=1).sum())
        draws += len(n)
    acceptance_report(6, missed == 0, f"{missed}/{draws} draws outside the rounding-aware bounds "
                                      f"(slack 0.5); slack 0 would miss {plain_missed}")
    assert missed == 0


def test_criterion_7_multi_expert_equivalence(acceptance_report):
    rng = np.random.default_rng(7)
    worst = worst_var = 0.0
    for _ in range(100):
        D, T = int(rng.integers(2, 25)), int(rng.integers(1, 7))
        feats = rng.integers(0, 40, size=(D, T))
        counts = rng.integers(0, 150, size=D)
        eta = float(10 ** rng.uniform(-2, 2))
        one = KernelModel.from_examples([LabeledExample(f, count=c) for f, c in zip(feats, counts)], eta=eta)
        two = KernelModel.from_examples([LabeledExample(f, experts=(c, c)) for f, c in zip(feats, counts)],
                                        eta=eta)
        x = rng.integers(0, 40, size=T)
        p1, p2 = one.predict(x), two.predict(x)
        worst = max(worst, abs(p1.value - p2.value))
        worst_var = max(worst_var, abs(p1.variance - p2.variance) / max(1.0, p1.variance))
    passed = worst <= 1e-12 and worst_var <= 1e-12
    acceptance_report(7, passed, f"max |E=2 - E=1| prediction: {worst:.2e}; "
                                 f"variance (relative): {worst_var:.2e}")
    assert worst <= 1e-12
    assert worst_var <= 1e-12


def design_image(seed):
    """16x16 image with channel levels in 0..20 (value = level / 20) and its cells."""
    rng = np.random.default_rng(seed)
    levels = np.full((16, 16, 3), 19)
    levels += rng.integers(-1, 2, size=levels.shape) * (rng.random((16, 16, 1)) < 0.3)
    cells = np.zeros((16, 16), dtype=int)
    spots = [(1, 1), (1, 9), (6, 4), (10, 11), (11, 1)]
    for k, (r, c) in enumerate(spots[:int(rng.integers(3, 6))], start=1):
        h, w = (int(v) for v in rng.integers(2, 5, size=2))
        base = rng.integers(2, 12, size=3)
        levels[r:r + h, c:c + w] = base
        # a lighter rim on some cells splits them at low thresholds
        if rng.random() < 0.5:
            levels[r, c:c + w] = np.minimum(base + 5, 18)
        cells[r:r + h, c:c + w] = k
    for _ in range(int(rng.integers(2, 5))):
        r, c = (int(v) for v in rng.integers(0, 15, size=2))
        if cells[r:r + 2, c:c + 2].any():
            continue
        levels[r:r + 2, c:c + 2] = rng.integers(3, 18, size=3)
    return levels, cells


def test_criterion_8_threshold_design_oracle(acceptance_report):
    mismatched = []
    for seed in range(3):
        levels, cells = design_image(seed)
        annotated = AnnotatedImage.from_label_image(levels / 20.0, cells)
        mc = monte_carlo_search(annotated, 100_000, seed=seed).min_fp()
        grid = level_grid_optima(levels, annotated.reference_masks, 8)
        if mc != grid:
            mismatched.append((seed, mc, grid))
    acceptance_report(8, not mismatched, f"Monte Carlo (10^5 draws) vs lattice oracle: "
                                         f"{3 - len(mismatched)}/3 images agree on every gamma")
    assert not mismatched


def test_criterion_9_real_dataset(acceptance_report):
    acceptance_report(9, "SKIP", "the published 12-image archive is not available")
    pytest.skip("real-dataset archive unavailable")
