import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decbilevel.hypergradient import (
    NeumannDraws,
    Theorem,
    bias_bound,
    derived_constants,
    draw_neumann,
    hypergrad_draws,
    hypergrad_full,
    hypergrad_stoch,
    stepsize_bounds,
)
from decbilevel.problems import ProblemConstants, SyntheticQuadratic, scalar_instance

UNIT = ProblemConstants(mu_g=1.0, L_g=2.0, C_gxy=1.0, C_fy=1.0, L_fx=1.0, L_fy=1.0,
                        L_gxy=0.0, L_gyy=0.0)


def forced(K, k, xi0=0, zeta0=0, zetas=None):
    zetas = np.zeros((1, K - 1), dtype=np.int64) if zetas is None else np.asarray([zetas])
    return NeumannDraws(np.array([xi0]), np.array([zeta0]), np.array([k]), zetas, K)


def enumerated_mean(prob, x, y, K):
    """Exact expectation of the single-draw estimator by listing every outcome."""
    n = prob.n
    total = np.zeros(prob.d1)
    count = 0
    for xi0, zeta0, k in itertools.product(range(n), range(n), range(K)):
        for zetas in itertools.product(range(n), repeat=K - 1):
            total += hypergrad_draws(prob, 0, x, y, forced(K, k, xi0, zeta0, zetas))[0]
            count += 1
    return total / count


# -- full-batch hypergradient -------------------------------------------------


def test_scalar_hypergradient_at_inner_solution():
    s = scalar_instance()
    for x in (-2.0, 0.5, 1.0):
        xv = np.array([x])
        assert hypergrad_full(s, 0, xv, s.inner_opt(0, xv))[0] == pytest.approx(2 * x, abs=1e-14)


def test_correction_vanishes_when_outer_y_gradient_is_zero():
    prob = SyntheticQuadratic.generate(1, 1, 1, 3, 2)
    x = np.array([0.1, 0.2, -0.3])
    y = prob.e[0, 0]
    gx, _ = prob.outer_grads(0, x, y)
    np.testing.assert_allclose(hypergrad_full(prob, 0, x, y), gx, atol=1e-15)


def test_full_hypergradient_matches_per_agent_gradient():
    prob = SyntheticQuadratic.generate(2, 3, 4, 5, 5)
    x = np.random.default_rng(0).standard_normal(5)
    for i in range(prob.m):
        def ell_i(z):
            return prob.outer_value(i, z, prob.inner_opt(i, z))
        exact = _closed_form_hypergrad(prob, i, x)
        np.testing.assert_allclose(hypergrad_full(prob, i, x, prob.inner_opt(i, x)), exact,
                                   rtol=1e-8, atol=1e-10)
        h = 1e-6
        fd = np.array([(ell_i(x + h * e) - ell_i(x - h * e)) / (2 * h) for e in np.eye(5)])
        assert np.linalg.norm(exact - fd) <= 1e-5 * np.linalg.norm(exact)


def _closed_form_hypergrad(prob, i, x):
    # y*(x) = A^{-1}(Bx + c), so dy*/dx = A^{-1}B and grad ell_i = grad_x f + (A^{-1}B)^T grad_y f
    A, B = prob.A_bar[i], prob.B_bar[i]
    y = np.linalg.solve(A, B @ x + prob.c_bar[i])
    gx = prob.CtC_bar[i] @ x + prob.gamma * np.cos(x)
    return gx + np.linalg.solve(A, B).T @ (y - prob.e_bar[i])


def test_error_bound_away_from_inner_solution():
    prob = SyntheticQuadratic.generate(3, 2, 5, 4, 4)
    c = prob.constants(region_radius=10.0)
    L_f = derived_constants(c).L_f
    rng = np.random.default_rng(1)
    for _ in range(50):
        i = int(rng.integers(prob.m))
        x = rng.standard_normal(4)
        y = rng.uniform(-2, 2, 4)
        ys = prob.inner_opt(i, x)
        err = np.sum((hypergrad_full(prob, i, x, y) - _closed_form_hypergrad(prob, i, x)) ** 2)
        assert err <= L_f * np.sum((ys - y) ** 2) + 1e-12


# -- Neumann estimator ----------------------------------------------------------


def test_K1_estimator_is_degenerate():
    prob = SyntheticQuadratic.generate(4, 1, 3, 2, 3)
    x, y = np.ones(2), np.full(3, 0.5)
    est = hypergrad_draws(prob, 0, x, y, forced(1, 0, xi0=2, zeta0=1))[0]
    gx, gy = prob.outer_grads(0, x, y, [2])
    expected = gx - prob.hess_xy(0, x, y, [1]) @ gy / prob.L_g
    np.testing.assert_allclose(est, expected, rtol=1e-13, atol=1e-15)
    rng = np.random.default_rng(0)
    assert np.all(draw_neumann(rng, 3, 1, size=50).k == 0)


def test_estimator_is_exact_when_A_equals_L():
    s = scalar_instance(a=2.0, b=1.0, e=0.5, L_g=2.0)
    x, y = np.array([0.3]), np.array([-0.4])
    full = hypergrad_full(s, 0, x, y)
    for K in range(1, 6):
        np.testing.assert_allclose(enumerated_mean(s, x, y, K), full, rtol=1e-14)


@pytest.mark.parametrize("K", range(1, 9))
def test_enumerated_bias_is_geometric(K):
    a, L = 1.0, 2.0
    s = scalar_instance(a=a, b=1.0, e=0.5, L_g=L)
    x, y = np.array([0.3]), np.array([-0.4])
    gy = s.outer_grads(0, x, y)[1][0]
    bias = abs(enumerated_mean(s, x, y, K)[0] - hypergrad_full(s, 0, x, y)[0])
    assert bias == pytest.approx(abs(gy) / a * (1 - a / L) ** K, rel=1e-12)
    nxt = abs(enumerated_mean(s, x, y, K + 1)[0] - hypergrad_full(s, 0, x, y)[0])
    assert nxt / bias == pytest.approx(1 - a / L, abs=1e-12)


def test_multi_sample_enumeration_matches_truncated_series():
    prob = SyntheticQuadratic.generate(5, 1, 2, 2, 2)
    x, y = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    K = 3
    gx, gy = prob.outer_grads(0, x, y)
    H, Hxy, L = prob.A_bar[0], prob.hess_xy(0, x, y), prob.L_g
    series = sum(np.linalg.matrix_power(np.eye(2) - H / L, k) for k in range(K))
    np.testing.assert_allclose(enumerated_mean(prob, x, y, K), gx - Hxy @ series @ gy / L,
                               rtol=1e-12, atol=1e-14)


def test_bias_bound_examples():
    assert bias_bound(UNIT, 3) == pytest.approx(0.125, abs=1e-15)
    zero = ProblemConstants(mu_g=1, L_g=2, C_gxy=0, C_fy=1, L_fx=1, L_fy=1, L_gxy=0, L_gyy=0)
    assert all(bias_bound(zero, K) == 0 for K in range(6))
    flat = ProblemConstants(mu_g=2, L_g=2, C_gxy=1, C_fy=1, L_fx=1, L_fy=1, L_gxy=0, L_gyy=0)
    assert all(bias_bound(flat, K) == 0 for K in range(1, 6))


def test_stochastic_draw_is_reproducible():
    prob = SyntheticQuadratic.generate(6, 1, 5, 3, 3)
    x, y = np.ones(3), np.zeros(3)
    a = hypergrad_stoch(prob, 0, x, y, 4, np.random.default_rng(9))
    b = hypergrad_stoch(prob, 0, x, y, 4, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        draw_neumann(np.random.default_rng(0), 5, 0)


# -- derived constants and step sizes -------------------------------------------


def test_derived_constants_example():
    dc = derived_constants(UNIT)
    assert dc.L_f == 4.0
    assert dc.L_y == 1.0
    assert dc.L_Kd ** 2 == pytest.approx(8.0, abs=1e-14)


def test_derived_constants_degenerate_cases():
    c = ProblemConstants(mu_g=1.5, L_g=3, C_gxy=0.7, C_fy=2, L_fx=1.2, L_fy=0.9, L_gxy=0, L_gyy=0)
    dc = derived_constants(c)
    assert dc.L_Kd ** 2 == pytest.approx(2 * 1.2 ** 2 + 6 * 0.7 ** 2 * 0.9 ** 2 / 1.5 ** 2)
    c0 = ProblemConstants(mu_g=1.5, L_g=3, C_gxy=0, C_fy=2, L_fx=1.2, L_fy=0.9, L_gxy=0, L_gyy=0)
    dc0 = derived_constants(c0)
    assert dc0.L_f == pytest.approx(1.2 ** 2) and dc0.L_y == 0


def _reference_bounds(c, lam, m, K, theorem):
    """Clause lists typed in afresh from the theorem statements."""
    mu, L = c.mu_g, c.L_g
    Lf = (c.L_fx + c.L_fy * c.C_gxy / mu + c.C_fy * (c.L_gxy / mu + c.L_gyy * c.C_gxy / mu ** 2)) ** 2
    Lell = (Lf + Lf * c.C_gxy / mu) ** 2
    Ly = (c.C_gxy / mu) ** 2
    LKd2 = (2 * c.L_fx ** 2 + 6 * c.C_gxy ** 2 * c.L_fy ** 2 / mu ** 2
            + 6 * c.C_fy ** 2 * c.L_gxy ** 2 / mu ** 2 + 6 * c.C_gxy ** 2 * c.C_fy ** 2 * c.L_gyy ** 2 / mu ** 4)
    g = 1 - lam
    if theorem == "interact":
        LK = math.sqrt(LKd2)
        beta = min(3 * (mu + L) / (mu * L), 1 / (mu + L))
        r = beta * mu * L / (3 * (mu + L))
        alpha = min(1 / (4 * Lell), math.sqrt(g / (2 * m)) / (4 * LK), 1 / (m * g),
                    g ** 2 / (32 * LK ** 2), m * g / (4 * Lell),
                    9 * r ** 2 * m * g / (32 * Ly ** 2 * (1 + 1 / r) * Lf ** 2),
                    (1 - r) * (1 + r) * r * g ** 2 / (32 * Ly ** 2 * (mu + L) * LK ** 2 * beta),
                    g / (4 * LK), 1)
        return alpha, beta
    lin = K / (2 * mu * L - mu ** 2)
    LKs2 = (2 * c.L_fx ** 2 + 6 * c.C_gxy ** 2 * c.L_fy ** 2 * lin + 6 * c.C_fy ** 2 * c.L_gxy ** 2 * lin
            + 6 * c.C_gxy ** 2 * c.C_fy ** 2 * K ** 4 * c.L_gyy ** 2 / L ** 4)
    LK2 = max(LKd2, LKs2)
    LK = math.sqrt(LK2)
    beta = min(g * mu * L / (768 * LK2 * (mu + L)), g * (mu + L) / (4096 * LK2),
               3 * (mu + L) / (mu * L), Ly ** 2 * mu * L / (24 * LK2 * (mu + L)),
               g * (mu + L) / (512 * LK2), 1 / (2 * (mu + L)), 16 / (g * (mu + L)))
    r = beta * mu * L / (3 * (mu + L))
    alpha = min(1 / (8 * Lell), r / (16 * m * Ly ** 2 * (r + 1)), 1 / (8 * LK * math.sqrt(m)),
                1 / (m * g), g ** 2 / (128 * LK2), g / 4 * (m / (Lell + 16 * LK2 * m)),
                math.sqrt(g / m) / (16 * LK), 288 * r * (1 + r) * m * Ly ** 2 / (g * Lf ** 2),
                r * (1 + r) * g / (256 * Ly ** 2 * (mu + L) * LK2 * beta),
                r * (1 + r) * g ** 2 / (512 * Ly ** 2 * (mu + L) * LK2 * beta),
                math.sqrt(g) / (8 * LK), g ** 2 / 4, 32 * Ly ** 2 / (16 * (1 + 1 / r) * Ly ** 2),
                math.sqrt(g / (64 * LK2)), 32 * Ly ** 2 / g)
    return alpha, beta


# frozen from the first evaluation; cross-checked against _reference_bounds below
STEP_FIXTURE = {
    "interact": (2.217255569745991e-05, 0.3333333333333333),
    "svr": (6.165136890699522e-08, 2.2194602272727273e-05),
}


@pytest.mark.parametrize("theorem", ["interact", "svr"])
def test_stepsize_fixture(theorem):
    K = None if theorem == "interact" else 10
    ss = stepsize_bounds(derived_constants(UNIT, K), UNIT, 1 / 3, 5, theorem)
    alpha, beta = STEP_FIXTURE[theorem]
    assert ss.alpha == pytest.approx(alpha, rel=1e-12)
    assert ss.beta == pytest.approx(beta, rel=1e-12)
    ref_alpha, ref_beta = _reference_bounds(UNIT, 1 / 3, 5, 10, theorem)
    assert ss.alpha == pytest.approx(ref_alpha, rel=1e-12)
    assert ss.beta == pytest.approx(ref_beta, rel=1e-12)


positive = st.floats(0.1, 5.0)


@given(positive, st.floats(1.0, 4.0), positive, positive, positive, positive,
       st.floats(0.0, 0.95), st.integers(1, 20), st.integers(1, 12))
def test_stepsizes_agree_with_reference(mu, ratio, cg, cf, lfx, lfy, lam, m, K):
    c = ProblemConstants(mu_g=mu, L_g=mu * ratio, C_gxy=cg, C_fy=cf, L_fx=lfx, L_fy=lfy,
                         L_gxy=0.0, L_gyy=0.0)
    for theorem, KK in (("interact", None), ("svr", K)):
        ss = stepsize_bounds(derived_constants(c, KK), c, lam, m, theorem)
        a, b = _reference_bounds(c, lam, m, K, theorem)
        assert ss.beta == pytest.approx(b, rel=1e-12)
        assert ss.alpha == pytest.approx(a, rel=1e-12)
        assert 0 < ss.alpha <= 1
        assert 0 < ss.r <= 1


def test_alpha_vanishes_as_lambda_approaches_one():
    alphas = [stepsize_bounds(derived_constants(UNIT), UNIT, lam, 5).alpha
              for lam in (0.5, 0.9, 0.99, 0.999999)]
    assert all(a >= b for a, b in zip(alphas, alphas[1:]))
    assert alphas[-1] < 1e-10


def test_stepsize_argument_validation():
    with pytest.raises(ValueError):
        stepsize_bounds(derived_constants(UNIT), UNIT, 1.0, 5)
    assert Theorem("svr") is Theorem.SVR


def test_zero_cross_hessian_clauses_are_skipped():
    c = ProblemConstants(mu_g=1, L_g=2, C_gxy=0, C_fy=1, L_fx=1, L_fy=1, L_gxy=0, L_gyy=0)
    ss = stepsize_bounds(derived_constants(c), c, 1 / 3, 5)
    assert 0 < ss.alpha <= 1 and math.isfinite(ss.alpha)
