"""Downstream analysis of fitted gain distributions.

Assembles per-channel gain vectors into matrices, decomposes them into
orthogonal control-space maneuvers via SVD, compares kernel variants on
held-out data, cross-validates fits, checks linear adequacy, and runs
permutation tests between driver populations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import TooFewSamplesError
from .gp import Hyperparams, HyperBounds, fit, optimize_hyperparams, predict_mean
from .seeds import derive_seed

__all__ = [
    "GainMatrix",
    "SvdDecomp",
    "PermutationResult",
    "CvReport",
    "VariantScore",
    "assemble_gain_matrix",
    "svd_gains",
    "permutation_test",
    "kfold_cv",
    "compare_models",
    "linear_adequacy",
    "mse",
]

UNIT_TAGS = ("normalized", "raw")
STATISTIC_KINDS = ("mean_diff", "var_diff")
MODEL_VARIANTS = ("linear", "squared_exp", "combined")


@dataclass(frozen=True)
class GainMatrix:
    """2x4 combined gain matrix G' with a unit tag.

    Row 0 is the acceleration response per feature, row 1 the angular
    velocity response; units records whether the entries act on
    normalized or raw features.
    """

    entries: np.ndarray
    units: str

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.shape != (2, 4):
            raise ValueError(f"gain matrix must be 2x4, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("gain entries must be finite")
        if self.units not in UNIT_TAGS:
            raise ValueError(f"units must be one of {UNIT_TAGS}")
        object.__setattr__(self, "entries", entries)


@dataclass(frozen=True)
class SvdDecomp:
    """G' = u . diag(sigma) . v_rows with orthonormal factors.

    Columns of u are control-space directions, rows of v_rows are unit
    feature directions, sigma is ordered descending.
    """

    u: np.ndarray
    sigma: np.ndarray
    v_rows: np.ndarray


@dataclass(frozen=True)
class PermutationResult:
    statistic_observed: float
    p_value: float
    n_permutations: int
    statistic_kind: str


@dataclass(frozen=True)
class CvReport:
    """Per-fold held-out MSE values with min/avg/max summaries."""

    per_fold_mse: tuple

    @property
    def min(self) -> float:
        return float(np.min(self.per_fold_mse))

    @property
    def avg(self) -> float:
        return float(np.mean(self.per_fold_mse))

    @property
    def max(self) -> float:
        return float(np.max(self.per_fold_mse))


@dataclass(frozen=True)
class VariantScore:
    """Validation MSE and the optimized hyperparameters of one variant."""

    mse: float
    hyper: Hyperparams


def assemble_gain_matrix(g_accel, g_angvel, *,
                         accel_units: str = "normalized",
                         angvel_units: str = "normalized") -> GainMatrix:
    """Stack the two decoupled channel fits into one gain matrix.

    Both vectors must carry the same unit tag; mixing a normalized fit
    with a raw one is a contract violation.
    """
    if accel_units != angvel_units:
        raise ValueError(
            f"unit tags differ: accel {accel_units!r} vs angvel {angvel_units!r}")
    g_accel = np.asarray(g_accel, dtype=float).ravel()
    g_angvel = np.asarray(g_angvel, dtype=float).ravel()
    if g_accel.shape != (4,) or g_angvel.shape != (4,):
        raise ValueError("channel gains must be 4-vectors")
    return GainMatrix(entries=np.vstack([g_accel, g_angvel]),
                      units=accel_units)


def svd_gains(gain) -> SvdDecomp:
    """Decompose a gain matrix into orthogonal control-space maneuvers.

    Sign convention: the first nonzero component of each feature
    direction V_j is positive, which pins the otherwise ambiguous SVD
    signs and makes decompositions reproducible.
    """
    entries = gain.entries if isinstance(gain, GainMatrix) else np.asarray(
        gain, dtype=float)
    u, sigma, v_rows = np.linalg.svd(entries, full_matrices=False)
    u = u.copy()
    v_rows = v_rows.copy()
    for j in range(v_rows.shape[0]):
        nonzero = np.nonzero(np.abs(v_rows[j]) > 1e-12)[0]
        if nonzero.size and v_rows[j, nonzero[0]] < 0.0:
            v_rows[j] = -v_rows[j]
            u[:, j] = -u[:, j]
    return SvdDecomp(u=u, sigma=sigma, v_rows=v_rows)


def _group_stat(values: np.ndarray, kind: str, axis=None):
    if kind == "mean_diff":
        return values.mean(axis=axis)
    return values.var(axis=axis, ddof=1)


def permutation_test(group_a, group_b, kind: str = "mean_diff",
                     n: int = 1000, seed: int = 0) -> PermutationResult:
    """Two-sample permutation test of |stat(A) - stat(B)|.

    Permutations reshuffle the pooled sample labels; the p-value uses
    the add-one estimator (1 + #{permuted >= observed}) / (1 + n) so it
    is never zero.  Variance uses the unbiased estimator, which needs
    at least two values per group.
    """
    a = np.asarray(list(group_a), dtype=float)
    b = np.asarray(list(group_b), dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    if kind not in STATISTIC_KINDS:
        raise ValueError(f"kind must be one of {STATISTIC_KINDS}")
    if kind == "var_diff" and min(a.size, b.size) < 2:
        raise ValueError("var_diff needs at least two values per group")
    if n < 1:
        raise ValueError("n must be positive")
    observed = float(abs(_group_stat(a, kind) - _group_stat(b, kind)))
    pooled = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    shuffled = rng.permuted(np.tile(pooled, (n, 1)), axis=1)
    stat = np.abs(_group_stat(shuffled[:, :a.size], kind, axis=1)
                  - _group_stat(shuffled[:, a.size:], kind, axis=1))
    p = (1 + int(np.sum(stat >= observed))) / (1 + n)
    return PermutationResult(statistic_observed=observed, p_value=p,
                             n_permutations=n, statistic_kind=kind)


def kfold_cv(dataset: Dataset, variant: str, k: int = 5, seed: int = 0, *,
             bounds: HyperBounds | None = None,
             n_starts: int = 8) -> CvReport:
    """K-fold cross-validation with per-fold hyperparameter search.

    The partition is a seeded shuffle into near-equal folds; each fold's
    hyperparameters are re-optimized on its training split, so the
    report measures the whole fitting pipeline's generalization rather
    than a single frozen model's.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if dataset.n < k:
        raise TooFewSamplesError(
            f"{dataset.n} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    folds = np.array_split(order, k)
    per_fold = []
    for i, held_out in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        train = dataset.subset(train_idx)
        test = dataset.subset(held_out)
        result = optimize_hyperparams(
            train, variant, seed=derive_seed(seed, f"fold:{i}"),
            n_starts=n_starts, bounds=bounds)
        model = fit(train, variant, result.hyper)
        pred = predict_mean(model, test.inputs)
        per_fold.append(mse(pred, test.outputs))
    return CvReport(per_fold_mse=tuple(per_fold))


def compare_models(train: Dataset, valid: Dataset, seed: int, *,
                   bounds: HyperBounds | None = None,
                   n_starts: int = 8) -> dict:
    """Validation MSE of each kernel variant, independently optimized.

    Returns {variant: VariantScore} for the linear-only,
    squared-exponential-only, and combined kernels.
    """
    scores = {}
    for variant in MODEL_VARIANTS:
        result = optimize_hyperparams(
            train, variant, seed=derive_seed(seed, f"variant:{variant}"),
            n_starts=n_starts, bounds=bounds)
        model = fit(train, variant, result.hyper)
        pred = predict_mean(model, valid.inputs)
        scores[variant] = VariantScore(mse=mse(pred, valid.outputs),
                                       hyper=result.hyper)
    return scores


def linear_adequacy(theta: Hyperparams, threshold: float = 1.0) -> bool:
    """True when the optimized beta stays under the adequacy threshold.

    A small beta means the squared-exponential term contributes little,
    so the linear gain reading of the fit is trustworthy.  The cutoff
    is configurable; strict inequality, so beta == threshold fails.
    """
    return bool(theta.beta < threshold)


def mse(predicted, actual) -> float:
    """Mean squared error between two equal-length scalar sequences."""
    p = np.asarray(list(predicted), dtype=float)
    a = np.asarray(list(actual), dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("inputs must be nonempty")
    return float(np.mean((p - a) ** 2))
