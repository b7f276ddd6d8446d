"""Gaussian process regression with a combined linear + squared-exponential kernel.

The kernel family is

    k(x, y) = <x, y> + beta * exp(-||x - y||^2 / (2 * lengthscale^2))

with three variants: "linear" keeps only the inner product, "squared_exp"
keeps only the exponential (unit amplitude, beta unused), and "combined"
uses both.  Observation noise is folded into the Gramian as sigma_n^2 I,
and sigma_n^2 is treated as a hyperparameter alongside beta and the
lengthscale.

The linear part of a fitted model admits a closed-form gain vector
g = sum_i alpha_i x_i, so the predictive mean splits into a linear term
g^T x* plus a weighted sum of exponentials.  That split is what the rest
of the package consumes: g is an interpretable linear feedback gain and
beta measures how much the exponential term had to contribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize as sp_optimize
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .dataset import Dataset, Scaling
from .errors import IllConditionedGramError, OptimizationFailureError

VARIANTS = ("linear", "squared_exp", "combined")

# Jitter ladder: try a clean factorization first so that noiseless
# closed-form cases are reproduced exactly; escalate only on failure.
JITTERS = (0.0, 1e-8, 1e-6, 1e-4)

RESIDUAL_TOL = 1e-8

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparams:
    """Kernel hyperparameters.

    beta: weight of the squared-exponential term relative to the linear
        term (combined variant only).
    lengthscale: squared-exponential lengthscale, in input units.
    noise_var: observation noise variance sigma_n^2, folded into the
        Gramian diagonal.
    """

    beta: float = 1.0
    lengthscale: float = 1.0
    noise_var: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and np.isfinite(self.lengthscale)
                and np.isfinite(self.noise_var)):
            raise ValueError("hyperparameters must be finite")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if self.lengthscale <= 0.0:
            raise ValueError("lengthscale must be positive")
        if self.noise_var < 0.0:
            raise ValueError("noise variance must be nonnegative")


@dataclass(frozen=True)
class HyperBounds:
    """Box bounds for hyperparameter optimization (raw units)."""

    beta: tuple[float, float] = (1e-2, 1e2)
    lengthscale: tuple[float, float] = (1e-2, 10.0)
    noise_var: tuple[float, float] = (1e-4, 1.0)

    def __post_init__(self):
        for name in ("beta", "lengthscale", "noise_var"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo < hi):
                raise ValueError(f"invalid bounds for {name}: ({lo}, {hi})")


@dataclass(frozen=True)
class GpModel:
    """Result of fitting: training data plus the dual weights alpha."""

    variant: str
    hyper: Hyperparams
    train_inputs: np.ndarray
    train_outputs: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_marginal: float


@dataclass(frozen=True)
class OptimizeResult:
    """Best hyperparameters found by the multi-start search."""

    hyper: Hyperparams
    log_marginal: float
    n_starts: int
    n_converged: int


def _check_inputs(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def kernel_eval(x, y, variant: str, hyper: Hyperparams) -> float:
    """Evaluate the kernel for a single pair of input vectors."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown kernel variant {variant!r}")
    x = _check_inputs(x, "x").ravel()
    y = _check_inputs(y, "y").ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have identical shape")
    lin = float(np.dot(x, y))
    if variant == "linear":
        return lin
    sq = float(np.sum((x - y) ** 2))
    se = math.exp(-sq / (2.0 * hyper.lengthscale**2))
    if variant == "squared_exp":
        return se
    return lin + hyper.beta * se


def _sq_dists(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    return cdist(xa, xb, metric="sqeuclidean")


def cross_kernel(xa, xb, variant: str, hyper: Hyperparams) -> np.ndarray:
    """Kernel matrix between two input sets, shape (len(xa), len(xb))."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown kernel variant {variant!r}")
    xa = np.atleast_2d(_check_inputs(xa, "xa"))
    xb = np.atleast_2d(_check_inputs(xb, "xb"))
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("input dimensions do not match")
    if variant == "linear":
        return xa @ xb.T
    se = np.exp(-_sq_dists(xa, xb) / (2.0 * hyper.lengthscale**2))
    if variant == "squared_exp":
        return se
    return xa @ xb.T + hyper.beta * se


def gram_matrix(inputs, variant: str, hyper: Hyperparams) -> np.ndarray:
    """Symmetric kernel matrix of a single input set (noise not included)."""
    inputs = np.atleast_2d(_check_inputs(inputs, "inputs"))
    k = cross_kernel(inputs, inputs, variant, hyper)
    # Force exact symmetry; cdist round-off can break it at the 1e-16 level.
    return (k + k.T) / 2.0


def _factorize(kn: np.ndarray):
    """Cholesky with escalating jitter; returns (factor, jitter_used)."""
    for jitter in JITTERS:
        try:
            factor = cho_factor(
                kn + jitter * np.eye(kn.shape[0]), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            continue
        return factor, jitter
    raise IllConditionedGramError(
        f"Gramian of size {kn.shape[0]} not factorizable at jitter up to {JITTERS[-1]:g}"
    )


def fit(dataset: Dataset, variant: str, hyper: Hyperparams) -> GpModel:
    """Solve (K + sigma_n^2 I) alpha = y and package the model.

    Escalates diagonal jitter if the factorization fails or the solve is
    inaccurate; raises IllConditionedGramError once the ladder is
    exhausted.
    """
    k = gram_matrix(dataset.inputs, variant, hyper)
    kn = k + hyper.noise_var * np.eye(dataset.n)
    y = dataset.outputs
    ynorm = float(np.linalg.norm(y))
    for jitter in JITTERS:
        kj = kn + jitter * np.eye(dataset.n) if jitter else kn
        try:
            factor = cho_factor(kj, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        alpha = cho_solve(factor, y, check_finite=False)
        residual = float(np.linalg.norm(kj @ alpha - y))
        if residual <= RESIDUAL_TOL * ynorm or ynorm == 0.0:
            return GpModel(
                variant=variant,
                hyper=hyper,
                train_inputs=dataset.inputs,
                train_outputs=y,
                alpha=alpha,
                jitter=jitter,
                log_marginal=_lml_from_factor(factor, alpha, y),
            )
    raise IllConditionedGramError(
        f"no jitter up to {JITTERS[-1]:g} gave a solve with relative "
        f"residual below {RESIDUAL_TOL:g}"
    )


def _lml_from_factor(factor, alpha: np.ndarray, y: np.ndarray) -> float:
    n = y.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return float(-0.5 * np.dot(y, alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI)


def log_marginal_likelihood(dataset: Dataset, variant: str, hyper: Hyperparams) -> float:
    """Log marginal likelihood of the outputs under the noisy kernel.

    L = -1/2 y^T (K + sigma_n^2 I)^{-1} y - 1/2 log|K + sigma_n^2 I|
        - N/2 log(2 pi)
    """
    k = gram_matrix(dataset.inputs, variant, hyper)
    kn = k + hyper.noise_var * np.eye(dataset.n)
    factor, _ = _factorize(kn)
    alpha = cho_solve(factor, dataset.outputs, check_finite=False)
    return _lml_from_factor(factor, alpha, dataset.outputs)


def predict_mean(model: GpModel, xstar) -> np.ndarray:
    """Predictive mean sum_i alpha_i k(x_i, x*) at the query points."""
    xstar = np.atleast_2d(_check_inputs(xstar, "xstar"))
    k = cross_kernel(xstar, model.train_inputs, model.variant, model.hyper)
    return k @ model.alpha


def extract_gain(model: GpModel) -> np.ndarray:
    """Linear gain vector g = sum_i alpha_i x_i of the fitted model.

    For the squared_exp variant there is no linear part; the gain is the
    zero vector by construction.
    """
    if model.variant == "squared_exp":
        return np.zeros(model.train_inputs.shape[1])
    return model.train_inputs.T @ model.alpha


def predict_decomposed(model: GpModel, xstar) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean split into linear and exponential contributions.

    Returns (linear_part, exponential_part); their sum equals
    predict_mean up to floating-point association.
    """
    xstar = np.atleast_2d(_check_inputs(xstar, "xstar"))
    lin = xstar @ extract_gain(model)
    if model.variant == "linear":
        return lin, np.zeros_like(lin)
    se = np.exp(
        -_sq_dists(xstar, model.train_inputs) / (2.0 * model.hyper.lengthscale**2)
    )
    amp = 1.0 if model.variant == "squared_exp" else model.hyper.beta
    return lin, amp * (se @ model.alpha)


def denormalize_gain(gain, scaling: Scaling) -> tuple[np.ndarray, float]:
    """Convert a gain learned on normalized inputs back to raw units.

    With normalized = (raw - offset) / scale, the linear term expands to
    sum_j (g_j / scale_j) raw_j - sum_j g_j offset_j / scale_j, so the
    raw gain divides by the scale and the offsets contribute a constant,
    returned separately.
    """
    gain = np.asarray(gain, dtype=float).ravel()
    if gain.shape != scaling.scale.shape:
        raise ValueError("gain and scaling dimensions do not match")
    if np.any(scaling.scale == 0.0):
        raise ValueError("scaling has zero entries; degenerate dimensions "
                         "must be handled before denormalizing")
    raw = gain / scaling.scale
    constant = float(-np.sum(gain * scaling.offset / scaling.scale))
    return raw, constant


# ---------------------------------------------------------------------------
# Hyperparameter optimization
# ---------------------------------------------------------------------------

_PARAM_NAMES = {
    "linear": ("noise_var",),
    "squared_exp": ("lengthscale", "noise_var"),
    "combined": ("beta", "lengthscale", "noise_var"),
}

_FAIL_VALUE = -1e12


class _Objective:
    """Log marginal likelihood and gradient over log10 hyperparameters.

    Precomputes the linear Gramian and the squared-distance matrix once;
    each evaluation then costs one exponential map plus one Cholesky.
    """

    def __init__(self, dataset: Dataset, variant: str):
        self.variant = variant
        self.names = _PARAM_NAMES[variant]
        self.y = dataset.outputs
        self.n = dataset.n
        x = dataset.inputs
        self.lin = x @ x.T if variant != "squared_exp" else None
        self.sqd = _sq_dists(x, x) if variant != "linear" else None
        self.eye = np.eye(self.n)

    def hyper_from_log10(self, u: np.ndarray) -> Hyperparams:
        values = dict(zip(self.names, 10.0 ** np.asarray(u, dtype=float)))
        return Hyperparams(
            beta=values.get("beta", 0.0),
            lengthscale=values.get("lengthscale", 1.0),
            noise_var=values["noise_var"],
        )

    def _build(self, hyper: Hyperparams):
        if self.variant == "linear":
            return None, self.lin + hyper.noise_var * self.eye
        with np.errstate(under="ignore"):
            expd = np.exp(-self.sqd / (2.0 * hyper.lengthscale**2))
        if self.variant == "squared_exp":
            return expd, expd + hyper.noise_var * self.eye
        return expd, self.lin + hyper.beta * expd + hyper.noise_var * self.eye

    def value(self, u: np.ndarray) -> float:
        """Likelihood only; skips the matrix inverse the gradient needs."""
        hyper = self.hyper_from_log10(u)
        _, kn = self._build(hyper)
        try:
            factor = cho_factor(kn, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return _FAIL_VALUE
        alpha = cho_solve(factor, self.y, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        value = float(
            -0.5 * np.dot(self.y, alpha) - 0.5 * logdet - 0.5 * self.n * LOG_2PI
        )
        return value if np.isfinite(value) else _FAIL_VALUE

    def value_and_grad(self, u: np.ndarray):
        hyper = self.hyper_from_log10(u)
        n = self.n
        expd, kn = self._build(hyper)
        try:
            factor = cho_factor(kn, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return _FAIL_VALUE, np.zeros(len(self.names))
        alpha = cho_solve(factor, self.y, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        value = float(-0.5 * np.dot(self.y, alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI)
        if not np.isfinite(value):
            return _FAIL_VALUE, np.zeros(len(self.names))
        # dL/dtheta = 1/2 tr((alpha alpha^T - Kn^{-1}) dKn/dtheta)
        kinv = cho_solve(factor, self.eye, check_finite=False)
        a = np.outer(alpha, alpha) - kinv
        grads = []
        for name in self.names:
            if name == "noise_var":
                d = 0.5 * float(np.trace(a))
                theta = hyper.noise_var
            elif name == "beta":
                d = 0.5 * float(np.sum(a * expd))
                theta = hyper.beta
            else:
                amp = hyper.beta if self.variant == "combined" else 1.0
                dk = amp * expd * self.sqd / hyper.lengthscale**3
                d = 0.5 * float(np.sum(a * dk))
                theta = hyper.lengthscale
            grads.append(d * theta * math.log(10.0))
        return value, np.asarray(grads)


def _bounds_for(variant: str, bounds: HyperBounds) -> list[tuple[float, float]]:
    pairs = {
        "beta": bounds.beta,
        "lengthscale": bounds.lengthscale,
        "noise_var": bounds.noise_var,
    }
    return [
        (math.log10(pairs[name][0]), math.log10(pairs[name][1]))
        for name in _PARAM_NAMES[variant]
    ]


def _coordinate_polish(obj: _Objective, u: np.ndarray, box, best: float):
    """Hill-climb each log10 coordinate until no probe improves.

    Guarantees the local-maximum certificate: after this loop, probes at
    every step in the ladder fail to increase the likelihood.
    """
    steps = (1e-2, 1e-3, 1e-4, 1e-5)
    u = np.array(u, dtype=float)
    for _ in range(200):
        improved = False
        for step in steps:
            for j in range(len(u)):
                for sign in (1.0, -1.0):
                    cand = np.array(u)
                    cand[j] = np.clip(cand[j] + sign * step, box[j][0], box[j][1])
                    if cand[j] == u[j]:
                        continue
                    val = obj.value(cand)
                    if val > best + 1e-12:
                        u, best = cand, val
                        improved = True
        if not improved:
            break
    return u, best


def optimize_hyperparams(
    dataset: Dataset,
    variant: str,
    seed: int,
    n_starts: int = 8,
    bounds: HyperBounds | None = None,
) -> OptimizeResult:
    """Maximize the log marginal likelihood over the kernel hyperparameters.

    Multi-start bounded quasi-Newton search in log10 space: starts are
    drawn log-uniformly within the bounds from the seed, each is refined
    with L-BFGS-B using analytic gradients, and the best candidate is
    polished coordinate-wise so that finite-difference probes cannot
    improve it.  Deterministic for a fixed dataset and seed.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown kernel variant {variant!r}")
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    bounds = bounds or HyperBounds()
    obj = _Objective(dataset, variant)
    box = _bounds_for(variant, bounds)
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    starts = lo + rng.random((n_starts, len(box))) * (hi - lo)

    best_u = None
    best_val = -np.inf
    n_converged = 0
    for u0 in starts:
        res = sp_optimize.minimize(
            lambda u: tuple(-v for v in obj.value_and_grad(u)),
            u0,
            jac=True,
            method="L-BFGS-B",
            bounds=box,
            options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-9},
        )
        val = -float(res.fun)
        if not np.isfinite(val) or val <= _FAIL_VALUE / 2:
            continue
        n_converged += 1
        if val > best_val:
            best_val = val
            best_u = np.asarray(res.x)
    if best_u is None:
        fallback = obj.hyper_from_log10((lo + hi) / 2.0)
        raise OptimizationFailureError(
            "no hyperparameter start converged",
            best_hyper=fallback,
            best_value=None,
        )
    best_u, best_val = _coordinate_polish(obj, best_u, box, best_val)
    hyper = obj.hyper_from_log10(best_u)
    if variant == "linear":
        hyper = replace(hyper, beta=0.0, lengthscale=1.0)
    elif variant == "squared_exp":
        hyper = replace(hyper, beta=0.0)
    return OptimizeResult(
        hyper=hyper,
        log_marginal=best_val,
        n_starts=n_starts,
        n_converged=n_converged,
    )
