"""Closed-form and property tests for the GP regression core."""

import dataclasses
import math

import numpy as np
import numpy.testing as npt
import pytest

from dyadgain import gp
from dyadgain.dataset import Dataset, Scaling
from dyadgain.errors import OptimizationFailureError


def make_dataset(*, n=20, dim=4, seed=0, noise=0.0, gain=None):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, dim))
    if gain is None:
        gain = np.zeros(dim)
    y = x @ np.asarray(gain) + noise * rng.standard_normal(n)
    return Dataset(x, y)


# ---------------------------------------------------------------------------
# kernel_eval / gram_matrix
# ---------------------------------------------------------------------------

def test_kernel_linear_inner_product():
    h = gp.Hyperparams()
    assert gp.kernel_eval([1.0, 2.0], [3.0, 4.0], "linear", h) == 11.0


def test_kernel_squared_exp_at_equal_points_is_one():
    h = gp.Hyperparams(lengthscale=0.3)
    assert gp.kernel_eval([0.2, -1.0], [0.2, -1.0], "squared_exp", h) == 1.0


def test_kernel_combined_adds_beta_at_equal_points():
    h = gp.Hyperparams(beta=0.5, lengthscale=1.0)
    assert gp.kernel_eval([1.0, 0.0], [1.0, 0.0], "combined", h) == pytest.approx(1.5)


def test_kernel_symmetry():
    rng = np.random.default_rng(3)
    h = gp.Hyperparams(beta=0.7, lengthscale=0.8)
    for _ in range(50):
        x, y = rng.standard_normal((2, 4))
        for variant in gp.VARIANTS:
            assert gp.kernel_eval(x, y, variant, h) == pytest.approx(
                gp.kernel_eval(y, x, variant, h), abs=1e-12
            )


def test_kernel_rejects_non_finite():
    h = gp.Hyperparams()
    with pytest.raises(ValueError):
        gp.kernel_eval([np.nan, 0.0], [0.0, 0.0], "linear", h)


def test_kernel_rejects_unknown_variant():
    with pytest.raises(ValueError):
        gp.kernel_eval([1.0], [1.0], "cubic", gp.Hyperparams())


def test_gram_matches_pairwise_eval():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 3))
    h = gp.Hyperparams(beta=2.0, lengthscale=0.5)
    for variant in gp.VARIANTS:
        k = gp.gram_matrix(x, variant, h)
        for i in range(6):
            for j in range(6):
                assert k[i, j] == pytest.approx(
                    gp.kernel_eval(x[i], x[j], variant, h), abs=1e-12
                )


def test_gram_positive_semidefinite():
    # 100 random datasets; eigenvalues may dip below zero only by round-off
    rng = np.random.default_rng(11)
    for trial in range(100):
        n = int(rng.integers(2, 25))
        d = int(rng.integers(1, 6))
        x = rng.uniform(-3, 3, size=(n, d))
        h = gp.Hyperparams(
            beta=float(10 ** rng.uniform(-2, 2)),
            lengthscale=float(10 ** rng.uniform(-1, 1)),
        )
        variant = gp.VARIANTS[trial % 3]
        eigs = np.linalg.eigvalsh(gp.gram_matrix(x, variant, h))
        assert eigs.min() >= -1e-10


# ---------------------------------------------------------------------------
# fit / predict
# ---------------------------------------------------------------------------

def test_fit_single_point_closed_form():
    # K = <x, x> + beta = 1 + 1 = 2, so alpha = y / 2
    data = Dataset(np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([4.0]))
    model = gp.fit(data, "combined", gp.Hyperparams(beta=1.0, lengthscale=1.0))
    npt.assert_allclose(model.alpha, [2.0], atol=1e-12)
    npt.assert_allclose(gp.extract_gain(model), [2.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_fit_residual_is_small():
    data = make_dataset(n=40, seed=5, gain=[1.0, -2.0, 0.5, 0.0], noise=0.1)
    h = gp.Hyperparams(beta=0.5, lengthscale=1.2, noise_var=0.01)
    model = gp.fit(data, "combined", h)
    k = gp.gram_matrix(data.inputs, "combined", h)
    kn = k + (h.noise_var + model.jitter) * np.eye(data.n)
    res = np.linalg.norm(kn @ model.alpha - data.outputs)
    assert res <= 1e-8 * np.linalg.norm(data.outputs)


def test_noiseless_fit_interpolates():
    data = make_dataset(n=25, seed=9, gain=[0.3, 0.0, -1.0, 0.7])
    data = Dataset(data.inputs, data.outputs + np.sin(data.inputs[:, 0]))
    model = gp.fit(data, "combined", gp.Hyperparams(beta=1.0, lengthscale=1.0))
    pred = gp.predict_mean(model, data.inputs)
    npt.assert_allclose(pred, data.outputs, atol=1e-8)


def test_predict_decomposition_identity():
    # linear part plus exponential part must equal the kernel-sum mean
    rng = np.random.default_rng(21)
    for seed in range(10):
        data = make_dataset(n=30, seed=seed, gain=[1.0, 0.2, 0.0, -0.4], noise=0.05)
        h = gp.Hyperparams(beta=0.8, lengthscale=0.9, noise_var=0.01)
        model = gp.fit(data, "combined", h)
        xstar = rng.uniform(-1, 1, size=(15, 4))
        lin, nonlin = gp.predict_decomposed(model, xstar)
        npt.assert_allclose(lin + nonlin, gp.predict_mean(model, xstar), atol=1e-10)
        npt.assert_allclose(lin, xstar @ gp.extract_gain(model), atol=1e-12)


def test_combined_with_zero_beta_equals_linear():
    data = make_dataset(n=30, seed=13, gain=[0.5, -1.0, 0.0, 2.0], noise=0.02)
    h0 = gp.Hyperparams(beta=0.0, lengthscale=1.0, noise_var=0.01)
    hl = gp.Hyperparams(noise_var=0.01)
    xstar = np.random.default_rng(14).uniform(-1, 1, size=(20, 4))
    pred_combined = gp.predict_mean(gp.fit(data, "combined", h0), xstar)
    pred_linear = gp.predict_mean(gp.fit(data, "linear", hl), xstar)
    npt.assert_allclose(pred_combined, pred_linear, atol=1e-10)


# ---------------------------------------------------------------------------
# log marginal likelihood
# ---------------------------------------------------------------------------

def test_log_marginal_single_point_closed_forms():
    # K = [[1]] for a unit input under the linear kernel, sigma_n = 0:
    # L = -y^2/2 - log(2 pi)/2
    x = np.array([[1.0, 0.0, 0.0, 0.0]])
    h = gp.Hyperparams()
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    cases = [(1.0, -0.5 - half_log_2pi),
             (0.0, -half_log_2pi),
             (2.0, -2.0 - half_log_2pi)]
    for y, expected in cases:
        value = gp.log_marginal_likelihood(Dataset(x, np.array([y])), "linear", h)
        assert value == pytest.approx(expected, abs=1e-12)


def test_log_marginal_matches_dense_inverse():
    rng = np.random.default_rng(17)
    for seed in range(10):
        n = int(rng.integers(2, 50))
        data = make_dataset(n=n, seed=seed, gain=[1.0, 0.0, 0.0, 0.0], noise=0.2)
        h = gp.Hyperparams(beta=0.6, lengthscale=0.7, noise_var=0.05)
        kn = gp.gram_matrix(data.inputs, "combined", h) + h.noise_var * np.eye(n)
        y = data.outputs
        sign, logdet = np.linalg.slogdet(kn)
        assert sign > 0
        direct = (-0.5 * y @ np.linalg.inv(kn) @ y - 0.5 * logdet
                  - 0.5 * n * math.log(2 * math.pi))
        ours = gp.log_marginal_likelihood(data, "combined", h)
        assert ours == pytest.approx(direct, abs=1e-8)


# ---------------------------------------------------------------------------
# hyperparameter optimization
# ---------------------------------------------------------------------------

def test_optimize_pure_linear_data_pins_beta_to_floor():
    data = make_dataset(n=60, seed=23, gain=[1.5, -0.5, 0.8, 0.0])
    result = gp.optimize_hyperparams(data, "combined", seed=1)
    assert result.hyper.beta == pytest.approx(1e-2)


def test_optimize_nonlinear_data_pushes_beta_up():
    x1 = np.linspace(-1.0, 1.0, 40)
    x = np.zeros((40, 4))
    x[:, 0] = x1
    data = Dataset(x, np.sin(4.0 * x1))
    result = gp.optimize_hyperparams(data, "combined", seed=2)
    assert result.hyper.beta > 1.0


def test_optimize_is_deterministic():
    data = make_dataset(n=40, seed=29, gain=[1.0, 0.0, -1.0, 0.5], noise=0.1)
    a = gp.optimize_hyperparams(data, "combined", seed=7)
    b = gp.optimize_hyperparams(data, "combined", seed=7)
    assert a.hyper == b.hyper
    assert a.log_marginal == b.log_marginal


def test_optimize_local_max_certificate():
    # coordinate probes within bounds must not improve the likelihood
    # by more than 1e-6
    data = make_dataset(n=50, seed=31, gain=[0.5, 0.5, 0.0, 0.0], noise=0.05)
    data = Dataset(data.inputs, data.outputs + 0.3 * np.sin(3 * data.inputs[:, 1]))
    result = gp.optimize_hyperparams(data, "combined", seed=3)
    best = result.log_marginal
    bounds = gp.HyperBounds()
    theta = result.hyper
    for name, (lo, hi) in (("beta", bounds.beta),
                           ("lengthscale", bounds.lengthscale),
                           ("noise_var", bounds.noise_var)):
        base = getattr(theta, name)
        for factor in (10 ** 1e-4, 10 ** -1e-4):
            cand = base * factor
            if not lo <= cand <= hi:
                continue
            probe = dataclasses.replace(theta, **{name: cand})
            val = gp.log_marginal_likelihood(data, "combined", probe)
            assert val <= best + 1e-6


def test_optimize_respects_bounds():
    data = make_dataset(n=30, seed=37, gain=[1.0, 1.0, 0.0, 0.0], noise=0.3)
    b = gp.HyperBounds()
    for variant in gp.VARIANTS:
        r = gp.optimize_hyperparams(data, variant, seed=11)
        assert b.noise_var[0] <= r.hyper.noise_var <= b.noise_var[1]
        if variant != "linear":
            assert b.lengthscale[0] <= r.hyper.lengthscale <= b.lengthscale[1]
        if variant == "combined":
            assert b.beta[0] <= r.hyper.beta <= b.beta[1]


def test_optimize_reports_start_counts():
    data = make_dataset(n=20, seed=41, gain=[1.0, 0.0, 0.0, 0.0], noise=0.1)
    r = gp.optimize_hyperparams(data, "combined", seed=5, n_starts=4)
    assert r.n_starts == 4
    assert 1 <= r.n_converged <= 4


# ---------------------------------------------------------------------------
# gain denormalization
# ---------------------------------------------------------------------------

def test_denormalize_gain_divides_by_scale():
    scaling = Scaling(scale=[2.0, 4.0, 1.0, 1.0], offset=[1.0, 0.0, 0.0, 0.0])
    raw, constant = gp.denormalize_gain([1.0, 1.0, 0.0, 0.0], scaling)
    npt.assert_allclose(raw, [0.5, 0.25, 0.0, 0.0], atol=1e-12)
    assert constant == pytest.approx(-0.5, abs=1e-12)


def test_denormalize_round_trips_predictions():
    # g_norm on normalized inputs and (g_raw, constant) on raw inputs
    # describe the same linear function
    rng = np.random.default_rng(43)
    raw_x = rng.uniform(2.0, 9.0, size=(30, 4))
    from dyadgain.dataset import normalize_inputs

    data, scaling = normalize_inputs(Dataset(raw_x, np.zeros(30)))
    g_norm = rng.standard_normal(4)
    g_raw, constant = gp.denormalize_gain(g_norm, scaling)
    npt.assert_allclose(
        data.inputs @ g_norm, raw_x @ g_raw + constant, atol=1e-10
    )


def test_denormalize_rejects_zero_scale():
    scaling = Scaling(scale=[1.0, 0.0], offset=[0.0, 0.0], degenerate=(1,))
    with pytest.raises(ValueError):
        gp.denormalize_gain([1.0, 1.0], scaling)
